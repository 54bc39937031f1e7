"""Strict JSON run configuration.

One document drives every command; unknown keys anywhere fail fast with a
dotted-path diagnostic, and paths are validated before any compute starts.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig
from .errors import ConfigError
from .prompts import PROMPT_MODES, PromptConfig
from .shapes import COLOR_GROUPS, SHAPE_KINDS, ShapesSpec
from .training import SinkhornParams, TrainConfig


@dataclass(frozen=True)
class EvalParams:
    step_fraction: float = 0.036
    sanity_images: int = 8
    sanity_seeds: int = 1


@dataclass(frozen=True)
class Paths:
    checkpoint: str = "run/model.bin"
    metrics: str = "run/metrics.jsonl"
    report: str = "run/report.json"
    features: str = "run/features.csv"
    saliency_dir: str = "run/saliency"
    boxes: str | None = None
    embeddings: str | None = None  # class-token file from the exporter
    context_embeddings: str | None = None  # context init for fixed-template mode


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    prompt_mode: str = "learnable"
    data: ShapesSpec = field(default_factory=ShapesSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalParams = field(default_factory=EvalParams)
    paths: Paths = field(default_factory=Paths)


def _take(section: dict, path: str, known: dict) -> dict:
    unknown = set(section) - set(known)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown config key '{path}{key}'")
    return {k: section[k] for k in section}


def _tuple(value, name: str) -> tuple:
    if not isinstance(value, list):
        raise ConfigError(f"config key '{name}' must be a list")
    return tuple(value)


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    top_known = {"seed", "prompt_mode", "data", "encoder", "prompt", "train", "eval", "paths"}
    unknown = set(doc) - top_known
    if unknown:
        raise ConfigError(f"unknown config key '{sorted(unknown)[0]}'")

    seed = int(doc.get("seed", 0))
    prompt_mode = doc.get("prompt_mode", "learnable")
    if prompt_mode not in PROMPT_MODES:
        raise ConfigError(f"prompt_mode must be one of {PROMPT_MODES}")

    d = _take(doc.get("data", {}), "data.", {
        "image_size": 16, "kinds": None, "color_groups": None, "train_per_class": 200,
        "eval_per_class": 50, "noise_std": 0.05, "shape_extent": 8,
    })
    if "kinds" in d:
        d["kinds"] = _tuple(d["kinds"], "data.kinds")
    if "color_groups" in d:
        d["color_groups"] = _tuple(d["color_groups"], "data.color_groups")
    data = ShapesSpec(seed=seed, **d)
    data.validate()

    e = _take(doc.get("encoder", {}), "encoder.", {
        "channels": None, "strides": None, "kernel": 3,
    })
    if "channels" in e:
        e["channels"] = _tuple(e["channels"], "encoder.channels")
    if "strides" in e:
        e["strides"] = _tuple(e["strides"], "encoder.strides")
    encoder = EncoderConfig(num_classes=data.num_classes, **e)
    encoder.validate()

    p = _take(doc.get("prompt", {}), "prompt.", {
        "num_context": 12, "embed_dim": 32, "hidden_dim": 64,
    })
    prompt = PromptConfig(visual_dim=encoder.feature_positions, mode=prompt_mode, **p)
    prompt.validate()

    t = dict(doc.get("train", {}))
    sk = _take(t.pop("sinkhorn", {}), "train.sinkhorn.", {
        "lam": 0.1, "max_iters": 200, "tol": 1e-6, "log_domain": "auto",
    })
    t = _take(t, "train.", {
        "alpha": 10.0, "beta": 1.0, "learning_rate": 0.05, "momentum": 0.9,
        "weight_decay": 1e-4, "batch_size": 16, "epochs": 30, "dynamic_context": True,
        "pin_class_token": False, "detach_target_adjacency": False,
        "distance_metric": "euclidean", "log_every": 1, "eval_kl_batches": 4,
    })
    train = TrainConfig(seed=seed, sinkhorn=SinkhornParams(**sk), **t)
    train.validate()

    ev = _take(doc.get("eval", {}), "eval.", {
        "step_fraction": 0.036, "sanity_images": 8, "sanity_seeds": 1,
    })
    eval_params = EvalParams(**ev)
    if not 0 < eval_params.step_fraction <= 1:
        raise ConfigError("eval.step_fraction must be in (0, 1]")

    pa = _take(doc.get("paths", {}), "paths.", {
        "checkpoint": None, "metrics": None, "report": None, "features": None,
        "saliency_dir": None, "boxes": None, "embeddings": None,
        "context_embeddings": None,
    })
    paths = Paths(**{k: v for k, v in pa.items() if v is not None})

    return RunConfig(seed=seed, prompt_mode=prompt_mode, data=data, encoder=encoder,
                     prompt=prompt, train=train, eval=eval_params, paths=paths)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return parse_config(doc)


def validate_input_paths(*paths: str | None) -> None:
    for p in paths:
        if p is not None and not os.path.exists(p):
            raise ConfigError(f"input path does not exist: {p}")


def prepare_output_path(path: str | None) -> None:
    if path is None:
        return
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def class_table_for(config: RunConfig) -> tuple[np.ndarray, list[str]]:
    """Class-token table plus the class-name order it encodes."""
    from .prompts import group_structured_table, load_embedding_file
    from .shapes import class_semantics

    sem = class_semantics(config.data)
    if config.paths.embeddings:
        names, rows = load_embedding_file(config.paths.embeddings)
        if names != sem.names:
            raise ConfigError(
                "embedding file class names do not match dataset order: "
                f"{names} vs {sem.names}"
            )
        if rows.shape[1] != config.prompt.embed_dim:
            raise ConfigError(
                f"embedding width {rows.shape[1]} != prompt embed_dim {config.prompt.embed_dim}"
            )
        return rows, names
    table = group_structured_table(
        [c.kind_group for c in sem.classes],
        [c.color_group for c in sem.classes],
        dim=config.prompt.embed_dim,
        seed=config.seed,
    )
    return table, sem.names


def context_init_for(config: RunConfig) -> np.ndarray | None:
    """Context-token init rows for fixed-template mode (from an exporter file)."""
    from .prompts import load_embedding_file

    if config.prompt_mode != "fixed-template":
        return None
    path = config.paths.context_embeddings
    if not path:
        raise ConfigError("fixed-template mode needs paths.context_embeddings")
    _, rows = load_embedding_file(path)
    need = config.prompt.num_context
    if rows.shape[0] < need:
        raise ConfigError(
            f"context embedding file has {rows.shape[0]} rows, need {need}"
        )
    if rows.shape[1] != config.prompt.embed_dim:
        raise ConfigError("context embedding width does not match prompt embed_dim")
    return rows[:need]
