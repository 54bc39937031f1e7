"""Entropic optimal transport between feature maps and prompt tokens.

The cost couples L2-normalized rows by cosine distance. The solver is the
classic alternating diagonal scaling: with K = exp(-C / lam),

    r^t = u / (K s^{t-1}),   s^t = v / (K^T r^t),   T = diag(r) K diag(s)

run on a float64 copy of the cost, with a log-domain (log-sum-exp) variant
that switches on automatically when K would underflow. The returned plan is
treated as a constant by the loss: gradients flow only through the cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeError
from .tensor import Tensor

NORM_FLOOR = 1e-8
# smallest positive normal float32; below this exp(-C/lam) switches to log domain
_F32_TINY = float(np.finfo(np.float32).tiny)


@dataclass
class TransportPlan:
    values: np.ndarray  # (N, M), nonnegative
    row_marginal: np.ndarray  # u, length N
    col_marginal: np.ndarray  # v, length M
    converged: bool
    violation: float
    iterations: int
    violation_trace: list[float] = field(default_factory=list)


def _normalize_rows(x: Tensor) -> Tensor:
    norms = T.l2_norm(x, axis=-1, keepdims=True)
    floor = Tensor(np.full(norms.shape, NORM_FLOOR, dtype=x.dtype))
    inv = T.exp(T.scalar_mul(T.log(T.add(norms, floor)), -1.0))
    return T.mul(x, inv)


def cost_matrix(features: Tensor, prompt: Tensor) -> Tensor:
    """Cosine distance between feature rows and prompt rows: values in [0, 2].

    Accepts (N, d') x (M, d') or batched (B, N, d') x (B, M, d').
    """
    if features.shape[-1] != prompt.shape[-1]:
        raise ShapeError(
            f"feature width {features.shape[-1]} != prompt width {prompt.shape[-1]}"
        )
    if features.data.ndim != prompt.data.ndim or features.data.ndim not in (2, 3):
        raise ShapeError("cost_matrix expects both operands 2-d or both 3-d")
    f = _normalize_rows(features)
    g = _normalize_rows(prompt)
    axes = (0, 2, 1) if prompt.data.ndim == 3 else (1, 0)
    cos = T.matmul(f, T.transpose(g, axes))
    ones = Tensor(np.ones(cos.shape, dtype=cos.dtype))
    return T.relu(T.sub(ones, cos))


def _violation(plan: np.ndarray, u: np.ndarray, v: np.ndarray) -> float:
    return float(
        max(
            np.abs(plan.sum(axis=1) - u).max(),
            np.abs(plan.sum(axis=0) - v).max(),
        )
    )


def sinkhorn(
    cost: np.ndarray | Tensor,
    u: np.ndarray,
    v: np.ndarray,
    lam: float = 0.1,
    max_iters: int = 200,
    tol: float = 1e-6,
    log_domain: str | bool = "auto",
    keep_trace: bool = False,
) -> TransportPlan:
    """Solve entropy-regularized transport; stops at marginal violation < tol."""
    C = np.asarray(cost.data if isinstance(cost, Tensor) else cost, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if C.ndim != 2 or C.shape != (u.size, v.size):
        raise ShapeError(f"cost {C.shape} incompatible with marginals {u.size}, {v.size}")
    if lam <= 0:
        raise DomainError("regularization strength must be positive")
    if (u <= 0).any() or (v <= 0).any():
        raise DomainError("marginals must be strictly positive")
    if abs(u.sum() - 1.0) > 1e-9 or abs(v.sum() - 1.0) > 1e-9:
        raise DomainError("marginals must each sum to 1")

    if log_domain == "auto":
        use_log = np.exp(-C.max() / lam) < _F32_TINY
    else:
        use_log = bool(log_domain)

    trace: list[float] = []
    if not use_log:
        K = np.exp(-C / lam)
        s = np.ones(v.size)
        r = u / (K @ s)
        plan = r[:, None] * K * s[None, :]
        it = 0
        viol = _violation(plan, u, v)
        while viol >= tol and it < max_iters:
            r = u / (K @ s)
            s = v / (K.T @ r)
            plan = r[:, None] * K * s[None, :]
            it += 1
            viol = _violation(plan, u, v)
            if keep_trace:
                trace.append(viol)
    else:
        # scaling vectors kept as log(r), log(s); updates via log-sum-exp
        neg = -C / lam
        log_u, log_v = np.log(u), np.log(v)
        log_s = np.zeros(v.size)
        log_r = log_u - _lse(neg + log_s[None, :], axis=1)
        plan = np.exp(neg + log_r[:, None] + log_s[None, :])
        it = 0
        viol = _violation(plan, u, v)
        while viol >= tol and it < max_iters:
            log_r = log_u - _lse(neg + log_s[None, :], axis=1)
            log_s = log_v - _lse(neg + log_r[:, None], axis=0)
            plan = np.exp(neg + log_r[:, None] + log_s[None, :])
            it += 1
            viol = _violation(plan, u, v)
            if keep_trace:
                trace.append(viol)

    return TransportPlan(
        values=plan,
        row_marginal=u,
        col_marginal=v,
        converged=viol < tol,
        violation=viol,
        iterations=it,
        violation_trace=trace,
    )


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def uniform_marginals(n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    return np.full(n, 1.0 / n), np.full(m, 1.0 / m)


def ot_loss(cost: Tensor, plan: TransportPlan) -> Tensor:
    """<plan, cost> with the plan held constant; gradients flow through cost only."""
    if tuple(plan.values.shape) != tuple(cost.shape):
        raise ShapeError(f"plan {plan.values.shape} does not match cost {cost.shape}")
    frozen = Tensor(plan.values.astype(cost.dtype))
    return T.tsum(T.mul(cost, frozen))


def ot_loss_batch(
    cost: Tensor,
    labels_independent_plans: list[TransportPlan],
) -> tuple[Tensor, np.ndarray]:
    """Mean per-sample transport loss over a (B, N, M) cost stack."""
    b = cost.shape[0]
    if len(labels_independent_plans) != b:
        raise ShapeError("need one plan per sample")
    stacked = np.stack([p.values for p in labels_independent_plans]).astype(cost.dtype)
    per_sample = T.tsum(T.mul(cost, Tensor(stacked)), axis=2)
    per_sample = T.tsum(per_sample, axis=1)
    return T.tmean(per_sample), per_sample.numpy()
