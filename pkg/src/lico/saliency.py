"""Grad-CAM saliency over the toy encoder plus export and randomization helpers."""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import ImageEncoder
from .errors import DomainError, ShapeError
from .tensor import GradientTape, Tensor

SAL_MAGIC = b"LICOSAL1"

RANDOMIZE_MODES = ("cascading", "independent")


@dataclass
class SaliencyMap:
    values: np.ndarray  # (H, W) float32 in [0, 1]
    target_class: int


def bilinear_upsample(coarse: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize without corner alignment (half-pixel centers)."""
    h, w = coarse.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = coarse[np.ix_(y0, x0)] * (1 - wx) + coarse[np.ix_(y0, x1)] * wx
    bot = coarse[np.ix_(y1, x0)] * (1 - wx) + coarse[np.ix_(y1, x1)] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def grad_cam(model: ImageEncoder, image: np.ndarray, target_class: int) -> SaliencyMap:
    """Class-gradient-weighted feature-map sum, upsampled and min-max normalized."""
    cfg = model.config
    if not 0 <= target_class < cfg.num_classes:
        raise DomainError(f"class {target_class} out of range")
    h, w, c = cfg.input_size
    if image.shape != (h, w, c):
        raise ShapeError(f"expected {(h, w, c)} image, got {image.shape}")

    batch = Tensor(np.ascontiguousarray(image.transpose(2, 0, 1))[None, ...])
    with GradientTape() as tape:
        maps, _ = model.encode_batch(batch)
        logits = model.classify_batch(maps)
        onehot = np.zeros((1, cfg.num_classes), dtype=logits.dtype)
        onehot[0, target_class] = 1.0
        tape.backward(T.tsum(T.mul(logits, Tensor(onehot))))
    acts = maps.numpy()[0]  # (N, fh, fw)
    grads = maps.grad[0]
    weights = grads.mean(axis=(1, 2))  # spatial mean of the class-logit gradient
    coarse = np.maximum((weights[:, None, None] * acts).sum(axis=0), 0.0)
    fine = bilinear_upsample(coarse, h, w)
    top, lo = float(fine.max()), float(fine.min())
    if top <= 0.0 or top - lo <= 0.0:  # all-zero (or degenerate constant) map stays as-is
        return SaliencyMap(values=np.zeros((h, w), dtype=np.float32), target_class=target_class)
    return SaliencyMap(values=((fine - lo) / (top - lo)).astype(np.float32), target_class=target_class)


def randomize_layer(
    model: ImageEncoder, layer: str, mode: str, rng: np.random.Generator
) -> ImageEncoder:
    """Fresh model with the named layer (and, cascading, all layers above) reinitialized."""
    if mode not in RANDOMIZE_MODES:
        raise DomainError(f"mode must be one of {RANDOMIZE_MODES}, got '{mode}'")
    names = model.layer_names()  # bottom -> top
    if layer not in names:
        raise DomainError(f"unknown layer '{layer}'")
    perturbed = copy.deepcopy(model)
    if mode == "independent":
        targets = [layer]
    else:
        targets = names[names.index(layer):]  # the layer and everything above it
    for name in targets:
        perturbed.reinit_layer(name, rng)
    return perturbed


def write_pgm(path: str, saliency: SaliencyMap) -> None:
    """ASCII PGM (P2, maxval 255, row-major)."""
    vals = np.clip(np.rint(saliency.values * 255.0), 0, 255).astype(int)
    h, w = vals.shape
    lines = [f"P2", f"{w} {h}", "255"]
    lines += [" ".join(str(v) for v in row) for row in vals]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pgm(path: str) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        tokens = fh.read().split()
    if tokens[0] != "P2":
        raise DomainError(f"{path}: not an ASCII PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4 : 4 + w * h]], dtype=np.int64)
    if data.size != w * h:
        raise DomainError(f"{path}: truncated PGM payload")
    return data.reshape(h, w)


def write_raw(path: str, saliency: SaliencyMap) -> None:
    """Raw float32 map: 8-byte magic, u32 LE height, u32 LE width, payload."""
    h, w = saliency.values.shape
    with open(path, "wb") as fh:
        fh.write(SAL_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(saliency.values, dtype="<f4").tobytes())


def read_raw(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != SAL_MAGIC:
        raise DomainError(f"{path}: bad saliency magic")
    h, w = struct.unpack_from("<II", blob, 8)
    return np.frombuffer(blob, dtype="<f4", count=h * w, offset=16).reshape(h, w).copy()
