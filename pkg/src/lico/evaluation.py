"""Quantitative interpretation metrics.

Insertion reveals pixels of the original image into a blurred baseline in
descending saliency order and integrates the target-class probability;
deletion degrades the original toward the baseline the same way. Both use
whole pixels (all channels move together) and break saliency ties by
row-major index. The pointing game asks whether the saliency argmax lands
inside a ground-truth box; sanity checks correlate maps before and after
parameter randomization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import ImageEncoder
from .errors import DomainError, ShapeError
from .saliency import SaliencyMap, grad_cam, randomize_layer

DEFAULT_STEP_FRACTION = 0.036  # fraction of pixels moved per step


@dataclass
class CurveResult:
    fractions: np.ndarray  # ascending, starts 0 ends 1
    scores: np.ndarray  # target-class softmax probability per step
    auc: float


def gaussian_blur(image: np.ndarray, sigma: float | None = None) -> np.ndarray:
    """Separable Gaussian with kernel radius 2*sigma and reflect padding."""
    h, w = image.shape[:2]
    if sigma is None:
        sigma = w / 8.0
    radius = max(1, int(round(2.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()

    def convolve_axis(arr: np.ndarray, axis: int) -> np.ndarray:
        pad = [(0, 0)] * arr.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(arr, pad, mode="reflect")
        out = np.zeros_like(arr, dtype=np.float64)
        for k, kv in enumerate(kernel):
            sl = [slice(None)] * arr.ndim
            sl[axis] = slice(k, k + arr.shape[axis])
            out += kv * padded[tuple(sl)]
        return out

    blurred = convolve_axis(convolve_axis(image.astype(np.float64), 0), 1)
    return np.clip(blurred, 0.0, 1.0).astype(np.float32)


def _saliency_order(saliency: np.ndarray) -> np.ndarray:
    """Pixel indices by descending saliency; ties resolved by row-major index."""
    flat = saliency.ravel()
    return np.lexsort((np.arange(flat.size), -flat))


def _probability(model: ImageEncoder, image: np.ndarray, target: int) -> float:
    logits = model.logits_for_images(image[None, ...])[0].astype(np.float64)
    z = logits - logits.max()
    p = np.exp(z)
    return float(p[target] / p.sum())


def _trapezoid(fractions: np.ndarray, scores: np.ndarray) -> float:
    df = np.diff(fractions.astype(np.float64))
    mid = (scores[1:].astype(np.float64) + scores[:-1].astype(np.float64)) / 2.0
    return float((df * mid).sum())


def _pixel_curve(
    model: ImageEncoder,
    start: np.ndarray,
    finish: np.ndarray,
    order: np.ndarray,
    target: int,
    step_fraction: float,
) -> CurveResult:
    """Move pixels of ``start`` toward ``finish`` in ``order``; score each step."""
    h, w, _ = start.shape
    total = h * w
    chunk = int(np.ceil(step_fraction * total))
    current = start.copy()
    fractions = [0.0]
    scores = [_probability(model, current, target)]
    moved = 0
    flat_cur = current.reshape(total, -1)
    flat_fin = finish.reshape(total, -1)
    while moved < total:
        nxt = order[moved : moved + chunk]
        flat_cur[nxt] = flat_fin[nxt]
        moved += len(nxt)
        fractions.append(moved / total)
        scores.append(_probability(model, current, target))
    fr = np.array(fractions)
    sc = np.array(scores)
    return CurveResult(fractions=fr, scores=sc, auc=_trapezoid(fr, sc))


def insertion(
    model: ImageEncoder,
    image: np.ndarray,
    saliency: SaliencyMap,
    step_fraction: float = DEFAULT_STEP_FRACTION,
    baseline: np.ndarray | None = None,
) -> CurveResult:
    """Reveal original pixels into the blurred baseline, most salient first."""
    _check_eval_inputs(image, saliency, step_fraction)
    base = gaussian_blur(image) if baseline is None else baseline
    order = _saliency_order(saliency.values)
    return _pixel_curve(model, base, image, order, saliency.target_class, step_fraction)


def deletion(
    model: ImageEncoder,
    image: np.ndarray,
    saliency: SaliencyMap,
    step_fraction: float = DEFAULT_STEP_FRACTION,
    baseline: np.ndarray | None = None,
) -> CurveResult:
    """Replace the most salient original pixels with their blurred values."""
    _check_eval_inputs(image, saliency, step_fraction)
    base = gaussian_blur(image) if baseline is None else baseline
    order = _saliency_order(saliency.values)
    return _pixel_curve(model, image, base, order, saliency.target_class, step_fraction)


def _check_eval_inputs(image: np.ndarray, saliency: SaliencyMap, step_fraction: float) -> None:
    if image.shape[:2] != saliency.values.shape:
        raise ShapeError(
            f"saliency {saliency.values.shape} does not match image {image.shape[:2]}"
        )
    if not 0.0 < step_fraction <= 1.0:
        raise DomainError("step_fraction must be in (0, 1]")


def mean_curve(curves: list[CurveResult]) -> CurveResult:
    """Pointwise mean of per-image curves sharing one fraction grid."""
    if not curves:
        raise DomainError("mean_curve needs at least one curve")
    fr = curves[0].fractions
    for c in curves[1:]:
        if not np.array_equal(c.fractions, fr):
            raise ShapeError("curves use different fraction grids")
    scores = np.mean([c.scores for c in curves], axis=0)
    return CurveResult(fractions=fr, scores=scores, auc=_trapezoid(fr, scores))


# ---------------------------------------------------------------------------
# pointing game


def pointing_game(
    maps_and_boxes: list[tuple[SaliencyMap, list[tuple[int, int, int, int]]]],
) -> float:
    """Hits / (hits + misses): argmax pixel inside any (closed) box."""
    if not maps_and_boxes:
        raise DomainError("pointing game needs at least one map")
    hits = 0
    for sal, boxes in maps_and_boxes:
        if not boxes:
            raise DomainError("every map needs at least one box")
        y, x = np.unravel_index(int(np.argmax(sal.values)), sal.values.shape)
        if any(x0 <= x <= x1 and y0 <= y <= y1 for (x0, y0, x1, y1) in boxes):
            hits += 1
    return hits / len(maps_and_boxes)


# ---------------------------------------------------------------------------
# sanity checks


def _ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks with ties, deterministic."""
    flat = values.ravel()
    order = np.argsort(flat, kind="stable")
    ranks = np.empty(flat.size, dtype=np.float64)
    sorted_vals = flat[order]
    i = 0
    while i < flat.size:
        j = i
        while j + 1 < flat.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0
        i = j + 1
    return ranks


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation; identical rankings give exactly 1.0."""
    if a.size != b.size:
        raise ShapeError("correlating arrays of different sizes")
    ra, rb = _ranks(a), _ranks(b)
    if np.array_equal(ra, rb):
        return 1.0
    va = ra - ra.mean()
    vb = rb - rb.mean()
    denom = np.sqrt((va * va).sum() * (vb * vb).sum())
    if denom == 0.0:
        return 0.0  # a constant map carries no ranking information
    return float((va * vb).sum() / denom)


def sanity_curves(
    model: ImageEncoder,
    image: np.ndarray,
    target_class: int,
    mode: str,
    seed: int = 0,
) -> list[tuple[str, float]]:
    """Per-layer (top to bottom) rank correlation against the unperturbed map."""
    reference = grad_cam(model, image, target_class).values
    results = []
    layers_top_down = list(reversed(model.layer_names()))
    for i, layer in enumerate(layers_top_down):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A17, i]))
        perturbed = randomize_layer(model, layer, mode, rng)
        sal = grad_cam(perturbed, image, target_class).values
        results.append((layer, spearman(reference, sal)))
    return results
