"""End-to-end training: batching, dynamic context, loss assembly, SGD.

Every source of randomness is a pure function of (seed, epoch or step), so a
checkpoint that stores parameters, momentum buffers and the step counters
resumes bit-compatibly with an uninterrupted run.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .encoder import EncoderConfig, ImageEncoder, batch_to_tensor, cross_entropy_batch
from .errors import ConfigError, NonFiniteLossError
from .manifold import adjacency, mm_loss, pairwise_distance
from .prompts import PromptBank, PromptConfig, TextBranch
from .shapes import Dataset, Sample
from .tensor import GradientTape, Tensor
from .transport import cost_matrix, ot_loss_batch, sinkhorn, uniform_marginals

log = logging.getLogger(__name__)

METRIC_KEYS = (
    "epoch",
    "step",
    "loss_ce",
    "loss_mm",
    "loss_ot",
    "loss_total",
    "eval_acc",
    "eval_kl",
    "tau",
    "lr",
)


@dataclass(frozen=True)
class SinkhornParams:
    lam: float = 0.1
    max_iters: int = 200
    tol: float = 1e-6
    log_domain: str | bool = "auto"


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 10.0
    beta: float = 1.0
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 30
    dynamic_context: bool = True
    pin_class_token: bool = False
    detach_target_adjacency: bool = False
    distance_metric: str = "euclidean"
    seed: int = 0
    log_every: int = 1
    eval_kl_batches: int = 4
    sinkhorn: SinkhornParams = field(default_factory=SinkhornParams)

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2 (adjacency needs rows)")
        if self.epochs < 1:
            raise ConfigError("need at least one epoch")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")


def lr_schedule(k: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay: base_lr * cos(7*pi*k / (16*K)), clamped at k = K."""
    if k < 0:
        raise ConfigError("step index must be nonnegative")
    k = min(k, total_steps)
    return base_lr * math.cos(7.0 * math.pi * k / (16.0 * total_steps))


def shuffle_context(
    tokens: int, seed: int, step: int, enabled: bool, pin_class_token: bool = False
) -> np.ndarray:
    """Fresh uniform permutation of prompt positions for one iteration."""
    if not enabled:
        return np.arange(tokens)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDC, step]))
    if pin_class_token:
        head = rng.permutation(tokens - 1)
        return np.concatenate([head, [tokens - 1]])
    return rng.permutation(tokens)


class ModelBundle:
    """Image encoder + text branch + shared learnable temperature."""

    def __init__(
        self,
        encoder_cfg: EncoderConfig,
        prompt_cfg: PromptConfig,
        class_table: np.ndarray,
        seed: int = 0,
        context_init: np.ndarray | None = None,
        tau_init: float = 3.0,
    ):
        if prompt_cfg.visual_dim != encoder_cfg.feature_positions:
            raise ConfigError(
                f"prompt visual_dim {prompt_cfg.visual_dim} must equal the encoder's "
                f"flattened spatial size {encoder_cfg.feature_positions}"
            )
        if class_table.shape[0] != encoder_cfg.num_classes:
            raise ConfigError("class table rows must match num_classes")
        if tau_init <= 0:
            raise ConfigError("tau_init must be positive")
        self.encoder = ImageEncoder(encoder_cfg, seed=seed)
        bank = PromptBank(prompt_cfg, class_table, seed=seed, context_init=context_init)
        self.text = TextBranch(bank, seed=seed)
        # tau starts in the soft-adjacency regime: at tau ~ 1 the initial
        # manifold mismatch produces alignment gradients an order of magnitude
        # above the classification ones and the encoder collapses
        self.log_tau = Tensor(np.float32(np.log(tau_init)), requires_grad=True)

    @property
    def tokens(self) -> int:
        return self.text.bank.tokens

    def trainable_parameters(self) -> dict[str, Tensor]:
        params = dict(self.encoder.parameters())
        params.update(self.text.trainable_parameters())
        params["log_tau"] = self.log_tau
        return params

    def state_tensors(self) -> dict[str, Tensor]:
        state = dict(self.encoder.parameters())
        state.update(self.text.state_tensors())
        state["log_tau"] = self.log_tau
        return state

    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))

    def decays(self, name: str, prompt_mode: str) -> bool:
        """Weight decay covers encoder and mapper (and context tokens when learnable)."""
        if name == "log_tau":
            return False
        if name == "context_tokens":
            return prompt_mode == "learnable"
        return True


@dataclass
class LossBreakdown:
    ce: float
    mm: float
    ot: float

    def total(self, alpha: float, beta: float) -> float:
        return self.ce + alpha * self.mm + beta * self.ot


def compute_losses(
    bundle: ModelBundle,
    images: Tensor,
    labels: np.ndarray,
    permutation: np.ndarray,
    tcfg: TrainConfig,
    mm_graph: bool = True,
    ot_graph: bool = True,
    plans: list | None = None,
):
    """Forward all three loss terms; returns (ce_t, mm_t, ot_t, per-sample dict, plans).

    With ``mm_graph``/``ot_graph`` off the term is still measured but built on
    gradient-severed copies. Transport plans are solved on a detached cost and
    may be passed in to be reused (finite-difference probes hold them fixed).
    """
    maps4, feats = bundle.encoder.encode_batch(images)
    logits = bundle.encoder.classify_batch(maps4)
    ce_t, ce_per = cross_entropy_batch(logits, labels)
    prompt_feats = bundle.text.prompt_features(labels, permutation)

    tau = T.exp(bundle.log_tau)
    f_in = feats if mm_graph else T.stop_gradient(feats)
    g_in = prompt_feats if mm_graph else T.stop_gradient(prompt_feats)
    a_f = adjacency(pairwise_distance(f_in, tcfg.distance_metric), tau)
    a_g = adjacency(pairwise_distance(g_in, tcfg.distance_metric), tau)
    mm_t = mm_loss(a_g, a_f, detach_target=tcfg.detach_target_adjacency)

    cf = feats if ot_graph else T.stop_gradient(feats)
    cg = prompt_feats if ot_graph else T.stop_gradient(prompt_feats)
    cost = cost_matrix(cf, cg)
    if plans is None:
        n, m = cost.shape[1], cost.shape[2]
        u, v = uniform_marginals(n, m)
        sk = tcfg.sinkhorn
        plans = [
            sinkhorn(cost.data[i], u, v, lam=sk.lam, max_iters=sk.max_iters,
                     tol=sk.tol, log_domain=sk.log_domain)
            for i in range(cost.shape[0])
        ]
    ot_t, ot_per = ot_loss_batch(cost, plans)
    per_sample = {"ce": ce_per, "ot": ot_per}
    return ce_t, mm_t, ot_t, per_sample, plans


def _check_finite(ce_t, mm_t, ot_t, per_sample) -> None:
    for term in ("ce", "ot"):
        vals = per_sample[term]
        if not np.isfinite(vals).all():
            raise NonFiniteLossError(term, int(np.argmax(~np.isfinite(vals))))
    if not np.isfinite(mm_t.item()):
        raise NonFiniteLossError("mm")
    for name, t in (("ce", ce_t), ("ot", ot_t)):
        if not np.isfinite(t.item()):
            raise NonFiniteLossError(name)


class MetricsWriter:
    """Appends JSON Lines records; IO failures are surfaced but non-fatal."""

    def __init__(self, path: str | None):
        self.path = path
        self.records: list[dict] = []

    def append(self, record: dict) -> None:
        assert tuple(sorted(record)) == tuple(sorted(METRIC_KEYS))
        self.records.append(record)
        if self.path is None:
            return
        try:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        except OSError as exc:
            log.error("failed to append metrics record: %s", exc)


class Trainer:
    def __init__(self, dataset: Dataset, bundle: ModelBundle, tcfg: TrainConfig,
                 prompt_mode: str = "learnable"):
        tcfg.validate()
        self.dataset = dataset
        self.bundle = bundle
        self.tcfg = tcfg
        self.prompt_mode = prompt_mode
        self.trainables = bundle.trainable_parameters()
        self.momentum = {k: np.zeros_like(p.data) for k, p in self.trainables.items()}
        self.step = 0
        self.epoch = 0
        self.steps_per_epoch = len(dataset.train) // tcfg.batch_size
        if self.steps_per_epoch < 1:
            raise ConfigError("training set smaller than one batch")
        self.total_steps = self.steps_per_epoch * tcfg.epochs

    # --- data plumbing ---------------------------------------------------------

    def _epoch_batches(self, epoch: int):
        order = np.random.default_rng(
            np.random.SeedSequence([self.tcfg.seed, 0xBA7C4, epoch])
        ).permutation(len(self.dataset.train))
        b = self.tcfg.batch_size
        for i in range(self.steps_per_epoch):
            chunk = order[i * b : (i + 1) * b]
            samples = [self.dataset.train[j] for j in chunk]
            yield samples

    @staticmethod
    def _to_batch(samples: list[Sample]) -> tuple[Tensor, np.ndarray]:
        images = batch_to_tensor([s.image for s in samples])
        labels = np.array([s.label for s in samples], dtype=np.int64)
        return images, labels

    # --- one optimization step ---------------------------------------------------

    def train_step(self, images: Tensor, labels: np.ndarray) -> LossBreakdown:
        tcfg = self.tcfg
        perm = shuffle_context(
            self.bundle.tokens, tcfg.seed, self.step, tcfg.dynamic_context, tcfg.pin_class_token
        )
        eta = lr_schedule(self.step, self.total_steps, tcfg.learning_rate)
        with GradientTape() as tape:
            ce_t, mm_t, ot_t, per_sample, _ = compute_losses(
                self.bundle, images, labels, perm, tcfg,
                mm_graph=tcfg.alpha > 0, ot_graph=tcfg.beta > 0,
            )
            _check_finite(ce_t, mm_t, ot_t, per_sample)
            total = ce_t
            if tcfg.alpha > 0:
                total = T.add(total, T.scalar_mul(mm_t, tcfg.alpha))
            if tcfg.beta > 0:
                total = T.add(total, T.scalar_mul(ot_t, tcfg.beta))
            if not np.isfinite(total.item()):
                raise NonFiniteLossError("total")
            grads = tape.backward(total)
        self._apply_sgd(grads, eta)
        self.step += 1
        return LossBreakdown(ce=ce_t.item(), mm=mm_t.item(), ot=ot_t.item())

    def _apply_sgd(self, grads: dict, eta: float) -> None:
        tcfg = self.tcfg
        for name, p in self.trainables.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            g = g.astype(np.float32, copy=True)
            if tcfg.weight_decay and self.bundle.decays(name, self.prompt_mode):
                g += tcfg.weight_decay * p.data
            buf = self.momentum[name]
            buf *= np.float32(tcfg.momentum)
            buf += g
            p.data = p.data - np.float32(eta) * buf

    # --- evaluation metrics -------------------------------------------------------

    def evaluate_accuracy(self, chunk: int = 64) -> float:
        samples = self.dataset.eval
        hits = 0
        for i in range(0, len(samples), chunk):
            part = samples[i : i + chunk]
            logits = self.bundle.encoder.logits_for_images(np.stack([s.image for s in part]))
            hits += int((logits.argmax(axis=1) == [s.label for s in part]).sum())
        return hits / len(samples)

    def eval_kl(self) -> float:
        """Mean manifold loss over fixed eval batches, identity token order."""
        tcfg = self.tcfg
        b = tcfg.batch_size
        n_batches = min(tcfg.eval_kl_batches, len(self.dataset.eval) // b)
        if n_batches < 1:
            raise ConfigError("eval set smaller than one batch")
        ident = np.arange(self.bundle.tokens)
        vals = []
        for i in range(n_batches):
            samples = self.dataset.eval[i * b : (i + 1) * b]
            images, labels = self._to_batch(samples)
            _, feats = self.bundle.encoder.encode_batch(images)
            prompt_feats = self.bundle.text.prompt_features(labels, ident)
            tau = float(np.exp(self.bundle.log_tau.data))
            a_f = adjacency(pairwise_distance(feats, tcfg.distance_metric), tau)
            a_g = adjacency(pairwise_distance(prompt_feats, tcfg.distance_metric), tau)
            vals.append(mm_loss(a_g, a_f).item())
        return float(np.mean(vals))

    def _record(self, epoch: int, losses: LossBreakdown) -> dict:
        tcfg = self.tcfg
        return {
            "epoch": epoch,
            "step": self.step,
            "loss_ce": losses.ce,
            "loss_mm": losses.mm,
            "loss_ot": losses.ot,
            "loss_total": losses.total(tcfg.alpha, tcfg.beta),
            "eval_acc": self.evaluate_accuracy(),
            "eval_kl": self.eval_kl(),
            "tau": self.bundle.tau(),
            "lr": lr_schedule(self.step, self.total_steps, tcfg.learning_rate),
        }

    def _measure_initial_losses(self) -> LossBreakdown:
        samples = next(iter(self._epoch_batches(0)))
        images, labels = self._to_batch(samples)
        perm = shuffle_context(
            self.bundle.tokens, self.tcfg.seed, 0, self.tcfg.dynamic_context,
            self.tcfg.pin_class_token,
        )
        ce_t, mm_t, ot_t, _, _ = compute_losses(
            self.bundle, images, labels, perm, self.tcfg, mm_graph=False, ot_graph=False
        )
        return LossBreakdown(ce=ce_t.item(), mm=mm_t.item(), ot=ot_t.item())

    # --- main loop -------------------------------------------------------------------

    def run(self, metrics_path: str | None = None, checkpoint_path: str | None = None) -> list[dict]:
        writer = MetricsWriter(metrics_path)
        if self.epoch == 0:
            writer.append(self._record(0, self._measure_initial_losses()))
        while self.epoch < self.tcfg.epochs:
            epoch = self.epoch
            sums = np.zeros(3, dtype=np.float64)
            for samples in self._epoch_batches(epoch):
                images, labels = self._to_batch(samples)
                losses = self.train_step(images, labels)
                sums += (losses.ce, losses.mm, losses.ot)
            self.epoch += 1
            mean = LossBreakdown(*(sums / self.steps_per_epoch))
            if self.epoch % self.tcfg.log_every == 0 or self.epoch == self.tcfg.epochs:
                writer.append(self._record(self.epoch, mean))
        if checkpoint_path is not None:
            self.save_checkpoint(checkpoint_path)
        return writer.records

    # --- checkpointing ------------------------------------------------------------------

    def save_checkpoint(self, path: str) -> None:
        state = {k: t.data for k, t in self.bundle.state_tensors().items()}
        for name, buf in self.momentum.items():
            state[f"momentum.{name}"] = buf
        seed = int(self.tcfg.seed)
        state["meta.counters"] = np.array(
            [self.step, self.epoch, seed & 0xFFFF, (seed >> 16) & 0xFFFF], dtype=np.float32
        )
        save_tensors(path, state)

    def load_checkpoint(self, path: str) -> None:
        state = load_tensors(path)
        counters = state.pop("meta.counters")
        self.step = int(counters[0])
        self.epoch = int(counters[1])
        seed = int(counters[2]) | (int(counters[3]) << 16)
        if seed != (self.tcfg.seed & 0xFFFFFFFF):
            log.warning("checkpoint seed %d differs from config seed %d", seed, self.tcfg.seed)
        for name, tensorv in self.bundle.state_tensors().items():
            if name not in state:
                raise ConfigError(f"checkpoint missing tensor '{name}'")
            if state[name].shape != tensorv.data.shape:
                raise ConfigError(
                    f"checkpoint tensor '{name}' has shape {state[name].shape}, "
                    f"expected {tensorv.data.shape}"
                )
            tensorv.data = state[name].copy()
        for name in self.momentum:
            key = f"momentum.{name}"
            if key in state:
                self.momentum[name] = state[key].copy()


def restore_model(
    path: str,
    encoder_cfg: EncoderConfig,
    prompt_cfg: PromptConfig,
    class_table: np.ndarray,
    seed: int = 0,
) -> ModelBundle:
    """Load a checkpoint into a freshly-built bundle (evaluation entry point)."""
    bundle = ModelBundle(encoder_cfg, prompt_cfg, class_table, seed=seed)
    state = load_tensors(path)
    for name, tensorv in bundle.state_tensors().items():
        if name not in state:
            raise ConfigError(f"checkpoint missing tensor '{name}'")
        if state[name].shape != tensorv.data.shape:
            raise ConfigError(f"checkpoint tensor '{name}' shape mismatch")
        tensorv.data = state[name].copy()
    return bundle
