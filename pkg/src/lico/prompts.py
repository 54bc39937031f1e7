"""Prompt construction and the text side of the alignment pipeline.

A prompt is M tokens: M-1 trainable context tokens followed by a frozen
class token. A fixed attention-style mixing layer plus a per-position
affine stands in for a pretrained text encoder: it is differentiable with
respect to its inputs, deterministic for a seed, and position-sensitive so
that shuffling token order actually changes the output. A one-hidden-layer
MLP then maps token features from width d to the visual width d'.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DomainError
from .tensor import Tensor

EMB_MAGIC = b"LICOEMB1"
EMB_VERSION = 1

PROMPT_MODES = ("learnable", "random-frozen", "fixed-template")


# ---------------------------------------------------------------------------
# class-token embedding file (consumed; produced by the exporter)


def load_embedding_file(path: str) -> tuple[list[str], np.ndarray]:
    """Read a class-embedding file; rows are L2-normalized on load."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != EMB_MAGIC:
        raise DomainError(f"{path}: not an embedding file (bad magic)")
    version, num_classes, dim = struct.unpack_from("<III", blob, 8)
    if version != EMB_VERSION:
        raise DomainError(f"{path}: unsupported embedding version {version}")
    offset = 20
    names = []
    for _ in range(num_classes):
        (n,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        names.append(blob[offset : offset + n].decode("utf-8"))
        offset += n
    count = num_classes * dim
    rows = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    offset += 4 * count
    if offset != len(blob):
        raise DomainError(f"{path}: trailing bytes after matrix payload")
    rows = rows.reshape(num_classes, dim).astype(np.float32).copy()
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if (norms < 1e-8).any():
        raise DomainError(f"{path}: zero-norm embedding row")
    rows /= norms
    return names, rows


def group_structured_table(
    kind_groups: list[int], color_groups: list[int], dim: int, seed: int
) -> np.ndarray:
    """Unit-norm class vectors where classes sharing a group stay correlated."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1A55]))
    n_kind = max(kind_groups) + 1
    n_color = max(color_groups) - min(color_groups) + 1
    kind_dirs = rng.normal(size=(n_kind, dim))
    color_dirs = rng.normal(size=(n_color, dim))
    rows = []
    for kg, cg in zip(kind_groups, color_groups):
        own = rng.normal(size=dim)
        v = 0.55 * kind_dirs[kg] + 0.55 * color_dirs[cg - min(color_groups)] + 0.35 * own
        rows.append(v / np.linalg.norm(v))
    return np.stack(rows).astype(np.float32)


# ---------------------------------------------------------------------------
# prompt bank


@dataclass(frozen=True)
class PromptConfig:
    num_context: int = 12  # M - 1
    embed_dim: int = 32  # d
    visual_dim: int = 16  # d'
    hidden_dim: int = 64  # mapper hidden width
    mode: str = "learnable"
    context_init_std: float = 0.02

    @property
    def tokens(self) -> int:
        return self.num_context + 1

    def validate(self) -> None:
        if self.mode not in PROMPT_MODES:
            raise ConfigError(f"prompt mode must be one of {PROMPT_MODES}, got '{self.mode}'")
        if self.num_context < 0:
            raise ConfigError("num_context must be >= 0")


class PromptBank:
    """Trainable context tokens plus a frozen per-class token table."""

    def __init__(self, config: PromptConfig, class_table: np.ndarray, seed: int = 0,
                 context_init: np.ndarray | None = None):
        config.validate()
        if class_table.ndim != 2 or class_table.shape[1] != config.embed_dim:
            raise ConfigError(
                f"class table must be (num_classes, {config.embed_dim}), got {class_table.shape}"
            )
        norms = np.linalg.norm(class_table, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ConfigError("class table rows must be unit norm")
        self.config = config
        self.class_table = Tensor(class_table.astype(np.float32), requires_grad=False)
        if context_init is not None:
            if context_init.shape != (config.num_context, config.embed_dim):
                raise ConfigError(
                    f"context init must be ({config.num_context}, {config.embed_dim}), "
                    f"got {context_init.shape}"
                )
            ctx = context_init.astype(np.float32)
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC07]))
            ctx = rng.normal(0.0, config.context_init_std,
                             size=(config.num_context, config.embed_dim)).astype(np.float32)
        self.context_tokens = Tensor(ctx, requires_grad=(config.mode == "learnable"))
        # fixed selectors: rows 0..M-2 read context tokens, row M-1 the class token
        m = config.tokens
        self._ctx_selector = Tensor(np.eye(m, config.num_context, dtype=np.float32))
        self._cls_slot = np.zeros((m, 1), dtype=np.float32)
        self._cls_slot[m - 1, 0] = 1.0

    @property
    def num_classes(self) -> int:
        return self.class_table.shape[0]

    @property
    def tokens(self) -> int:
        return self.config.tokens

    def _validate_permutation(self, permutation) -> np.ndarray:
        perm = np.asarray(permutation, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(self.tokens)):
            raise ContractError(f"permutation must be a bijection on {self.tokens} positions")
        return perm

    def build_prompt(self, class_label: int, permutation) -> Tensor:
        """Assemble one (M, d) prompt: context tokens then class token, reordered."""
        if not 0 <= class_label < self.num_classes:
            raise DomainError(f"class label {class_label} out of range")
        perm = self._validate_permutation(permutation)
        ctx_part = T.matmul(self._ctx_selector, self.context_tokens)
        cls_row = T.gather_rows(self.class_table, [class_label])
        cls_part = T.matmul(Tensor(self._cls_slot), cls_row)
        tokens = T.add(ctx_part, cls_part)
        return T.gather_rows(tokens, perm)

    def build_prompt_batch(self, labels: np.ndarray, permutation) -> Tensor:
        """Assemble (B, M, d) prompts sharing one permutation."""
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DomainError("class label out of range")
        perm = self._validate_permutation(permutation)
        b = labels.size
        m, d = self.tokens, self.config.embed_dim
        ctx_part = T.reshape(T.matmul(self._ctx_selector, self.context_tokens), (1, m, d))
        cls_rows = T.reshape(T.gather_rows(self.class_table, labels), (b, 1, d))
        slot = Tensor(self._cls_slot.reshape(1, m, 1))
        tokens = T.add(ctx_part, T.mul(cls_rows, slot))
        # shared permutation along the token axis
        return T.transpose(T.gather_rows(T.transpose(tokens, (1, 0, 2)), perm), (1, 0, 2))


class FrozenTextEncoder:
    """One seeded attention-mixing layer plus a per-position affine, all frozen."""

    def __init__(self, tokens: int, embed_dim: int, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF07E]))
        scale = 1.0 / np.sqrt(embed_dim)
        self.wq = Tensor(rng.normal(0, scale, size=(embed_dim, embed_dim)).astype(np.float32))
        self.wk = Tensor(rng.normal(0, scale, size=(embed_dim, embed_dim)).astype(np.float32))
        self.wv = Tensor(rng.normal(0, scale, size=(embed_dim, embed_dim)).astype(np.float32))
        # attention averages the class token into many near-zero context tokens;
        # the wide position gain restores O(1) token features downstream
        self.pos_scale = Tensor(rng.uniform(4.0, 8.0, size=(tokens, embed_dim)).astype(np.float32))
        self.pos_shift = Tensor(rng.normal(0, 0.1, size=(tokens, embed_dim)).astype(np.float32))
        self.tokens = tokens
        self.embed_dim = embed_dim

    def weights(self) -> dict[str, Tensor]:
        return {
            "frozen.wq": self.wq,
            "frozen.wk": self.wk,
            "frozen.wv": self.wv,
            "frozen.pos_scale": self.pos_scale,
            "frozen.pos_shift": self.pos_shift,
        }

    def encode(self, tokens: Tensor) -> Tensor:
        """(M, d) or (B, M, d) token sequence -> contextualized sequence, same shape."""
        single = tokens.data.ndim == 2
        x = T.reshape(tokens, (1,) + tokens.shape) if single else tokens
        q = T.matmul(x, self.wq)
        k = T.matmul(x, self.wk)
        v = T.matmul(x, self.wv)
        scores = T.scalar_mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.embed_dim))
        mixed = T.matmul(T.softmax(scores, axis=2), v)
        m, d = self.tokens, self.embed_dim
        out = T.add(T.mul(mixed, T.reshape(self.pos_scale, (1, m, d))),
                    T.reshape(self.pos_shift, (1, m, d)))
        return T.reshape(out, tokens.shape) if single else out


class MappingNet:
    """Per-token one-hidden-layer MLP from text width d to visual width d'."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3A9]))
        # wide output init keeps mapped prompt distances on the same scale as
        # the conv feature distances they are matched against
        s1, s2 = np.sqrt(6.0 / in_dim), 8.0 / np.sqrt(hidden_dim)
        self.w1 = Tensor(rng.uniform(-s1, s1, size=(in_dim, hidden_dim)).astype(np.float32), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden_dim, dtype=np.float32), requires_grad=True)
        self.w2 = Tensor(rng.uniform(-s2, s2, size=(hidden_dim, out_dim)).astype(np.float32), requires_grad=True)
        self.b2 = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"mapper.w1": self.w1, "mapper.b1": self.b1, "mapper.w2": self.w2, "mapper.b2": self.b2}

    def map(self, encoded: Tensor) -> Tensor:
        hidden = T.relu(T.add(T.matmul(encoded, self.w1), self.b1))
        return T.add(T.matmul(hidden, self.w2), self.b2)


class TextBranch:
    """Prompt bank -> frozen encoder -> mapping net, as one callable unit."""

    def __init__(self, bank: PromptBank, seed: int = 0):
        cfg = bank.config
        self.bank = bank
        self.encoder = FrozenTextEncoder(cfg.tokens, cfg.embed_dim, seed=seed)
        self.mapper = MappingNet(cfg.embed_dim, cfg.hidden_dim, cfg.visual_dim, seed=seed)

    def prompt_features(self, labels: np.ndarray, permutation) -> Tensor:
        """Labels (B,) -> mapped prompt features (B, M, d')."""
        prompts = self.bank.build_prompt_batch(labels, permutation)
        return self.mapper.map(self.encoder.encode(prompts))

    def prompt_features_single(self, label: int, permutation) -> Tensor:
        prompt = self.bank.build_prompt(label, permutation)
        return self.mapper.map(self.encoder.encode(prompt))

    def trainable_parameters(self) -> dict[str, Tensor]:
        params = dict(self.mapper.parameters())
        if self.bank.config.mode == "learnable":
            params["context_tokens"] = self.bank.context_tokens
        return params

    def state_tensors(self) -> dict[str, Tensor]:
        """Everything worth checkpointing, trainable or not."""
        out = dict(self.mapper.parameters())
        out["context_tokens"] = self.bank.context_tokens
        out["class_table"] = self.bank.class_table
        out.update(self.encoder.weights())
        return out
