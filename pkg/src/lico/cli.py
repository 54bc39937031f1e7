"""Command-line surface: train, eval, sanity, dump-features, embed-template.

Exit codes: 0 success, 2 configuration or usage problems, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import (
    RunConfig,
    class_table_for,
    context_init_for,
    load_config,
    prepare_output_path,
    validate_input_paths,
)
from .encoder import batch_to_tensor
from .errors import ConfigError, DomainError, NonFiniteLossError
from .evaluation import (
    deletion,
    gaussian_blur,
    insertion,
    mean_curve,
    pointing_game,
    sanity_curves,
    spearman,
)
from .prompts import EMB_MAGIC
from .saliency import grad_cam, randomize_layer, write_pgm, write_raw
from .shapes import class_semantics, generate, read_box_list, write_box_list
from .training import ModelBundle, Trainer, restore_model

log = logging.getLogger("lico")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _build_bundle(config: RunConfig) -> ModelBundle:
    table, _ = class_table_for(config)
    return ModelBundle(
        config.encoder,
        config.prompt,
        table,
        seed=config.seed,
        context_init=context_init_for(config),
    )


def cmd_train(config: RunConfig) -> int:
    validate_input_paths(config.paths.embeddings, config.paths.context_embeddings)
    prepare_output_path(config.paths.metrics)
    prepare_output_path(config.paths.checkpoint)
    if config.paths.metrics and os.path.exists(config.paths.metrics):
        os.remove(config.paths.metrics)  # idempotent reruns rewrite the trace
    dataset = generate(config.data)
    bundle = _build_bundle(config)
    trainer = Trainer(dataset, bundle, config.train, prompt_mode=config.prompt_mode)
    trainer.run(metrics_path=config.paths.metrics, checkpoint_path=config.paths.checkpoint)
    return EXIT_OK


def _restore(config: RunConfig) -> ModelBundle:
    table, _ = class_table_for(config)
    return restore_model(
        config.paths.checkpoint, config.encoder, config.prompt, table, seed=config.seed
    )


def _sanity_section(config: RunConfig, bundle: ModelBundle, samples) -> dict:
    layers = list(reversed(bundle.encoder.layer_names()))
    section: dict = {"reference": 1.0, "layers": layers, "cascading": [], "independent": []}
    subset = samples[: config.eval.sanity_images]
    for mode in ("cascading", "independent"):
        sums = np.zeros(len(layers), dtype=np.float64)
        for rep in range(config.eval.sanity_seeds):
            for i, s in enumerate(subset):
                curves = sanity_curves(
                    bundle.encoder, s.image, s.label, mode,
                    seed=config.seed * 1000 + rep * 100 + i,
                )
                sums += [c for _, c in curves]
        section[mode] = list(sums / (len(subset) * config.eval.sanity_seeds))
    ref = grad_cam(bundle.encoder, subset[0].image, subset[0].label).values
    section["reference"] = spearman(ref, ref.copy())
    return section


def cmd_eval(config: RunConfig) -> int:
    validate_input_paths(config.paths.checkpoint, config.paths.embeddings, config.paths.boxes)
    prepare_output_path(config.paths.report)
    dataset = generate(config.data)
    bundle = _restore(config)
    model = bundle.encoder

    boxes = None
    if config.paths.boxes:
        boxes = read_box_list(config.paths.boxes)

    per_image = []
    ins_curves, del_curves, pointing_pairs = [], [], []
    for s in dataset.eval:
        sal = grad_cam(model, s.image, s.label)
        base = gaussian_blur(s.image)
        ins = insertion(model, s.image, sal, config.eval.step_fraction, baseline=base)
        dele = deletion(model, s.image, sal, config.eval.step_fraction, baseline=base)
        sample_boxes = [s.box] if boxes is None else [b for _, b in boxes.get(s.index, [])]
        if not sample_boxes:
            raise ConfigError(f"no boxes listed for eval image {s.index}")
        ins_curves.append(ins)
        del_curves.append(dele)
        pointing_pairs.append((sal, sample_boxes))
        per_image.append(
            {
                "image_id": s.index,
                "label": s.label,
                "insertion_auc": ins.auc,
                "deletion_auc": dele.auc,
            }
        )
    logits = model.logits_for_images(np.stack([s.image for s in dataset.eval]))
    accuracy = float(
        (logits.argmax(axis=1) == [s.label for s in dataset.eval]).mean()
    )
    ins_auc = mean_curve(ins_curves).auc
    del_auc = mean_curve(del_curves).auc
    report = {
        "per_image": per_image,
        "aggregates": {
            "accuracy": accuracy,
            "insertion_auc": ins_auc,
            "deletion_auc": del_auc,
            "overall": ins_auc - del_auc,
            "insertion_auc_image_mean": float(np.mean([c.auc for c in ins_curves])),
            "deletion_auc_image_mean": float(np.mean([c.auc for c in del_curves])),
            "pointing_game": pointing_game(pointing_pairs),
            "sanity": _sanity_section(config, bundle, dataset.eval),
        },
    }
    with open(config.paths.report, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return EXIT_OK


def cmd_sanity(config: RunConfig) -> int:
    validate_input_paths(config.paths.checkpoint, config.paths.embeddings)
    prepare_output_path(config.paths.report)
    os.makedirs(config.paths.saliency_dir, exist_ok=True)
    dataset = generate(config.data)
    bundle = _restore(config)
    sample = dataset.eval[0]
    layers = list(reversed(bundle.encoder.layer_names()))

    reference = grad_cam(bundle.encoder, sample.image, sample.label)
    write_pgm(os.path.join(config.paths.saliency_dir, "reference.pgm"), reference)
    write_raw(os.path.join(config.paths.saliency_dir, "reference.sal"), reference)

    report = {"layers": layers, "reference": spearman(reference.values, reference.values.copy())}
    for mode in ("cascading", "independent"):
        correlations = []
        for i, layer in enumerate(layers):
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5A17, i]))
            perturbed = randomize_layer(bundle.encoder, layer, mode, rng)
            sal = grad_cam(perturbed, sample.image, sample.label)
            correlations.append(spearman(reference.values, sal.values))
            name = f"{mode}_{i:02d}_{layer}.pgm"
            write_pgm(os.path.join(config.paths.saliency_dir, name), sal)
        report[mode] = correlations
    with open(config.paths.report, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return EXIT_OK


def cmd_dump_features(config: RunConfig) -> int:
    validate_input_paths(config.paths.checkpoint, config.paths.embeddings)
    prepare_output_path(config.paths.features)
    dataset = generate(config.data)
    bundle = _restore(config)
    n = bundle.encoder.config.feature_channels
    header = "label," + ",".join(f"f{i}" for i in range(n))
    lines = [header]
    for s in dataset.eval:
        maps4, _ = bundle.encoder.encode_batch(batch_to_tensor([s.image]))
        pooled = maps4.numpy()[0].mean(axis=(1, 2))
        lines.append(f"{s.label}," + ",".join(f"{v:.9g}" for v in pooled))
    with open(config.paths.features, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_embed_template(config: RunConfig) -> int:
    sem = class_semantics(config.data)
    print("class-token embedding file format")
    print("  magic   : 8 ASCII bytes 'LICOEMB1'")
    print("  header  : u32 LE version=1, u32 LE num_classes, u32 LE dim")
    print("  names   : per class, u16 LE byte length + UTF-8 name")
    print("  matrix  : num_classes x dim float32 LE, row-major (rows unit norm)")
    print(f"expected dim: {config.prompt.embed_dim}")
    print("expected class names, in order:")
    for name in sem.names:
        print(f"  {name}")
    return EXIT_OK


def cmd_export_boxes(config: RunConfig) -> int:
    # convenience for driving the pointing game from a file instead of memory
    if not config.paths.boxes:
        raise ConfigError("paths.boxes must be set to export a box list")
    prepare_output_path(config.paths.boxes)
    dataset = generate(config.data)
    write_box_list(dataset.eval, config.paths.boxes)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lico", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_ckpt in (
        ("train", False),
        ("eval", True),
        ("sanity", True),
        ("dump-features", True),
        ("embed-template", False),
        ("export-boxes", False),
    ):
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", required=True, help="JSON run configuration")
        if needs_ckpt:
            p.add_argument("-k", "--checkpoint", default=None,
                           help="checkpoint path (overrides paths.checkpoint)")
    return parser


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sanity": cmd_sanity,
    "dump-features": cmd_dump_features,
    "embed-template": cmd_embed_template,
    "export-boxes": cmd_export_boxes,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        config = load_config(args.config)
        if getattr(args, "checkpoint", None):
            from dataclasses import replace

            config = replace(config, paths=replace(config.paths, checkpoint=args.checkpoint))
        return _COMMANDS[args.command](config)
    except (ConfigError, DomainError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
