"""Minimal reverse-mode autodiff over numpy arrays.

Values are stored as float32 by default (float64 replicas are allowed for
gradient checking); reductions accumulate in float64 before casting back.
Operations record onto the active :class:`GradientTape` whenever an input
requires gradients; without an active tape everything is a plain value
computation.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

Array = np.ndarray

_FLOAT_DTYPES = (np.float32, np.float64)


def _coerce(data, dtype=None) -> Array:
    if dtype is None:
        if isinstance(data, (np.ndarray, np.generic)) and data.dtype in _FLOAT_DTYPES:
            dtype = data.dtype
        else:
            dtype = np.float32
    arr = np.asarray(data, dtype=dtype)
    return arr


class Tensor:
    """An immutable-by-convention array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data: Array = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routing goes through the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))


def _as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=dtype)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Create a leaf tensor (float32 storage unless told otherwise)."""
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_TAPE_STACK: list["GradientTape"] = []


class GradientTape:
    """Ordered record of executed operations; replayed in reverse by backward."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "GradientTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, node: _Node) -> None:
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> dict[Tensor, Array]:
        """Accumulate gradients of a scalar loss into every participating tensor.

        Returns a map from each requires_grad leaf seen on the tape to its
        gradient (zeros when the leaf does not influence the loss). Repeated
        use of a tensor sums contributions.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        for node in self._nodes:
            node.out.grad = None
            for t in node.inputs:
                t.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g_out = node.out.grad
            if g_out is None:
                continue
            for t, g in zip(node.inputs, node.vjp(g_out)):
                if g is None:
                    continue
                if t.grad is None:
                    t.grad = np.array(g, dtype=t.dtype, copy=True)
                else:
                    t.grad += g.astype(t.dtype, copy=False)
        grads: dict[Tensor, Array] = {}
        produced = {id(node.out) for node in self._nodes}
        for node in self._nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced and t not in grads:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    grads[t] = t.grad
        return grads


def active_tape() -> GradientTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> dict[Tensor, Array]:
    """Run backward on the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise ContractError("backward called with no active GradientTape")
    return tape.backward(loss)


def _emit(out_data: Array, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(_Node(out, tuple(inputs), vjp))
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_finite_inputs(*tensors: Tensor) -> None:
    # forward ops promise finite outputs for finite inputs; nothing enforced here
    return


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from e
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _emit(out, (a, b), vjp)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * np.asarray(c, dtype=x.dtype), (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _emit(out, (x,), lambda g: (g * (x.data > 0),))


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)
    return _emit(out, (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.shape == () or x.data.shape[axis] == 0:
        raise DomainError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _emit(out, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation, cast back to storage dtype)


def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, x.shape).astype(x.dtype),)

    return _emit(out, (x,), vjp)


def tmean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise DomainError("mean over an empty axis")
    out = np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def vjp(g):
        if axis is None:
            return ((np.broadcast_to(g, x.shape) / n).astype(x.dtype),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(ge, x.shape) / n).astype(x.dtype),)

    return _emit(out, (x,), vjp)


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False, eps: float = 1e-8) -> Tensor:
    sq = np.sum(np.square(x.data, dtype=np.float64), axis=axis, keepdims=True)
    norm_k = np.sqrt(sq).astype(x.dtype)
    out = norm_k if keepdims else np.squeeze(norm_k, axis=axis)

    def vjp(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        return (ge * x.data / np.maximum(norm_k, eps),)

    return _emit(out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-d tensor, got {x.shape}")
    b, c, h, w = x.shape
    out = np.mean(x.data, axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None], x.shape).astype(x.dtype) / (h * w),)

    return _emit(out, (x,), vjp)


# ---------------------------------------------------------------------------
# structural ops


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {x.shape} -> {shape}") from e
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    ax = tuple(axes) if axes is not None else tuple(reversed(range(x.data.ndim)))
    out = np.transpose(x.data, ax)
    inv = np.argsort(ax)
    return _emit(out, (x,), lambda g: (np.transpose(g, inv),))


def gather_rows(x: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a flat index list")
    if x.data.ndim < 1:
        raise ShapeError("gather_rows needs at least one axis")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DomainError(f"gather_rows index out of range for first axis {x.shape[0]}")
    out = x.data[idx]

    def vjp(g):
        z = np.zeros_like(x.data)
        np.add.at(z, idx, g)
        return (z,)

    return _emit(out, (x,), vjp)


def stop_gradient(x: Tensor) -> Tensor:
    """Return the same values with gradient flow severed."""
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# matmul / conv


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul needs 2-d (or batched 3-d) operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = _unbroadcast(np.matmul(g, bt), a.shape)
        gb = _unbroadcast(np.matmul(at, g), b.shape)
        return (ga, gb)

    return _emit(out, (a, b), vjp)


def _conv_spans(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution over NCHW input with an OIHW kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    bsz, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    oh, ow = _conv_spans(h, kh, stride, padding), _conv_spans(wdt, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d output would be empty")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data

    # im2col: (B, Cin*kh*kw, oh*ow)
    cols = np.empty((bsz, cin * kh * kw, oh * ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            cols[:, (i * kw + j) * cin : (i * kw + j + 1) * cin, :] = patch.reshape(bsz, cin, -1)
    w2d = np.ascontiguousarray(
        w.data.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout).T
    )
    out = np.matmul(w2d, cols).reshape(bsz, cout, oh, ow)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias must be ({cout},), got {b.shape}")
        out = out + b.data[None, :, None, None]

    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2d = g.reshape(bsz, cout, oh * ow)
        gw2d = np.einsum("bco,bko->ck", g2d, cols, dtype=np.float64).astype(w.dtype)
        gw = gw2d.T.reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
        gcols = np.matmul(w2d.T, g2d)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                block = gcols[:, (i * kw + j) * cin : (i * kw + j + 1) * cin, :].reshape(bsz, cin, oh, ow)
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += block
        gx = gxp[:, :, padding : padding + h, padding : padding + wdt] if padding else gxp
        if b is None:
            return (gx, gw)
        gb = np.sum(g, axis=(0, 2, 3), dtype=np.float64).astype(b.dtype)
        return (gx, gw, gb)

    return _emit(out, inputs, vjp)


# ---------------------------------------------------------------------------
# dispatch surface

_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "softmax": softmax,
    "log": log,
    "exp": exp,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "sum": tsum,
    "mean": tmean,
    "reshape": reshape,
    "transpose": transpose,
    "gather-rows": gather_rows,
    "l2-norm": l2_norm,
    "global-average-pool": global_avg_pool,
    "stop-gradient": stop_gradient,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch a forward operation by identifier."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise DomainError(f"unknown operation kind '{kind}'") from None
    return fn(*inputs, **attrs)


def op_kinds() -> tuple[str, ...]:
    return tuple(_OPS)
