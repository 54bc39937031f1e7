"""Batch adjacency distributions and the manifold-matching loss.

Each mini-batch item becomes a row distribution: a softmax over negative
pairwise distances (self term included, distance 0). The loss is the mean
row-wise KL from the prompt-side adjacency to the image-side adjacency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeError
from .tensor import Tensor

EPS_FLOOR = 1e-8

METRICS = ("euclidean", "cosine")


@dataclass
class AdjacencyMatrix:
    values: Tensor  # (B, B), rows sum to 1
    temperature: Tensor | float


def _diag_mask(b: int, dtype) -> Tensor:
    return Tensor((1.0 - np.eye(b)).astype(dtype))


def pairwise_distance(features: Tensor, metric: str = "euclidean") -> Tensor:
    """All-pairs distances for a stacked batch (B, ...) of equally-shaped items.

    euclidean: Frobenius norm of the item difference. cosine: one minus the
    cosine of the flattened items. Symmetric with an exactly-zero diagonal.
    """
    if metric not in METRICS:
        raise DomainError(f"metric must be one of {METRICS}, got '{metric}'")
    if features.data.ndim < 2:
        raise ShapeError("pairwise_distance expects a stacked batch (B, ...)")
    b = features.shape[0]
    flat = T.reshape(features, (b, -1)) if features.data.ndim != 2 else features
    n = flat.shape[1]
    if metric == "euclidean":
        lhs = T.reshape(flat, (b, 1, n))
        rhs = T.reshape(flat, (1, b, n))
        dist = T.l2_norm(T.sub(lhs, rhs), axis=2)
    else:
        norms = np.linalg.norm(flat.data, axis=1)
        if (norms < 1e-12).any():
            raise DomainError("cosine distance undefined for a zero-norm item")
        inv = T.exp(T.scalar_mul(T.log(T.l2_norm(flat, axis=1, keepdims=True)), -1.0))
        unit = T.mul(flat, inv)
        cosine = T.matmul(unit, T.transpose(unit))
        dist = T.relu(T.sub(Tensor(np.ones((b, b), dtype=flat.dtype)), cosine))
    # exact zeros on the diagonal regardless of rounding
    return T.mul(dist, _diag_mask(b, flat.dtype))


def adjacency(distances: Tensor, temperature: Tensor | float) -> AdjacencyMatrix:
    """Row-softmax of -D/temperature; differentiable in both arguments."""
    if distances.data.ndim != 2 or distances.shape[0] != distances.shape[1]:
        raise ShapeError(f"distances must be square, got {distances.shape}")
    if distances.shape[0] < 2:
        raise DomainError("adjacency needs a batch of at least 2")
    if isinstance(temperature, Tensor):
        if temperature.size != 1:
            raise ShapeError("temperature must be scalar")
        if float(temperature.data.reshape(-1)[0]) <= 0.0:
            raise DomainError("temperature must be positive")
        inv = T.exp(T.scalar_mul(T.log(temperature), -1.0))
        scaled = T.scalar_mul(T.mul(distances, inv), -1.0)
    else:
        if temperature <= 0.0:
            raise DomainError("temperature must be positive")
        scaled = T.scalar_mul(distances, -1.0 / float(temperature))
    return AdjacencyMatrix(values=T.softmax(scaled, axis=1), temperature=temperature)


def _values(a) -> Tensor:
    return a.values if isinstance(a, AdjacencyMatrix) else a


def mm_loss(a_g, a_f, detach_target: bool = False) -> Tensor:
    """Mean row-wise KL(prompt adjacency || image adjacency), epsilon-floored.

    Both sides receive gradients unless ``detach_target`` severs the prompt
    side (the KL target direction stays fixed either way).
    """
    g, f = _values(a_g), _values(a_f)
    if g.shape != f.shape:
        raise ShapeError(f"adjacency shapes differ: {g.shape} vs {f.shape}")
    b = g.shape[0]
    if detach_target:
        g = T.stop_gradient(g)
    eps_g = Tensor(np.full(g.shape, EPS_FLOOR, dtype=g.dtype))
    eps_f = Tensor(np.full(f.shape, EPS_FLOOR, dtype=f.dtype))
    log_ratio = T.sub(T.log(T.add(g, eps_g)), T.log(T.add(f, eps_f)))
    return T.scalar_mul(T.tsum(T.mul(g, log_ratio)), 1.0 / b)
