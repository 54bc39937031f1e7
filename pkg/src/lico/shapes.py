"""Deterministic synthetic shapes dataset with ground-truth boxes and masks.

Classes are (shape kind x color group) combinations; classes sharing a kind
or a color group share semantic group ids, which gives the class-name
embedding table a manifold structure worth aligning to.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError

SHAPE_KINDS = ("square", "circle", "triangle")
COLOR_GROUPS = ("red", "blue")

# base RGB per color group; per-sample jitter stays inside the group
_BASE_COLORS = {"red": (0.85, 0.25, 0.15), "blue": (0.15, 0.35, 0.85)}


@dataclass(frozen=True)
class ShapesSpec:
    image_size: int = 16
    kinds: tuple[str, ...] = SHAPE_KINDS
    color_groups: tuple[str, ...] = COLOR_GROUPS
    train_per_class: int = 200
    eval_per_class: int = 50
    noise_std: float = 0.05
    shape_extent: int = 8  # nominal object diameter in pixels
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.kinds) * len(self.color_groups)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.shape_extent >= self.image_size:
            raise ConfigError(
                f"shape extent {self.shape_extent} does not fit in a "
                f"{self.image_size}x{self.image_size} image"
            )
        for k in self.kinds:
            if k not in SHAPE_KINDS:
                raise ConfigError(f"unknown shape kind '{k}'")
        for c in self.color_groups:
            if c not in COLOR_GROUPS:
                raise ConfigError(f"unknown color group '{c}'")


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int
    box: tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive
    mask: np.ndarray  # (H, W) bool, exact object footprint
    index: int  # global sample id, stable across splits


@dataclass
class ClassInfo:
    name: str
    kind: str
    color: str
    kind_group: int
    color_group: int


@dataclass
class ClassSemantics:
    classes: list[ClassInfo]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def group_count(self) -> int:
        kinds = {c.kind_group for c in self.classes}
        colors = {c.color_group for c in self.classes}
        return len(kinds) + len(colors)


@dataclass
class Dataset:
    spec: ShapesSpec
    train: list[Sample]
    eval: list[Sample] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes


def class_semantics(spec: ShapesSpec) -> ClassSemantics:
    """Per-class display names and semantic group ids (kind-major order)."""
    spec.validate()
    infos = []
    for ki, kind in enumerate(spec.kinds):
        for ci, color in enumerate(spec.color_groups):
            infos.append(
                ClassInfo(
                    name=f"{color} {kind}",
                    kind=kind,
                    color=color,
                    kind_group=ki,
                    color_group=len(spec.kinds) + ci,
                )
            )
    return ClassSemantics(infos)


def _shape_mask(kind: str, extent: int) -> np.ndarray:
    """Boolean footprint of a shape inside an extent x extent cell."""
    yy, xx = np.mgrid[0:extent, 0:extent]
    if kind == "square":
        return np.ones((extent, extent), dtype=bool)
    if kind == "circle":
        c = (extent - 1) / 2.0
        r = extent / 2.0 - 0.2
        return (yy - c) ** 2 + (xx - c) ** 2 <= r * r
    if kind == "triangle":
        # upright triangle: row y spans columns widening toward the base
        half = (extent - 1) / 2.0
        width = (yy + 0.5) * half / extent * 2.0
        return np.abs(xx - half) <= width
    raise DomainError(f"unknown shape kind '{kind}'")


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return (z ^ (z >> 31)) & 0xFFFFFFFFFFFFFFFF


def _render(spec: ShapesSpec, rng: np.random.Generator, label: int, info: ClassInfo, index: int) -> Sample:
    size = spec.image_size
    ext = spec.shape_extent
    footprint = _shape_mask(info.kind, ext)
    y0 = int(rng.integers(0, size - ext + 1))
    x0 = int(rng.integers(0, size - ext + 1))
    base = np.array(_BASE_COLORS[info.color], dtype=np.float32)
    jitter = rng.uniform(-0.08, 0.08, size=3).astype(np.float32)
    color = np.clip(base + jitter, 0.0, 1.0)

    image = np.clip(
        rng.normal(0.12, spec.noise_std, size=(size, size, 3)), 0.0, 1.0
    ).astype(np.float32)
    mask = np.zeros((size, size), dtype=bool)
    mask[y0 : y0 + ext, x0 : x0 + ext] = footprint
    image[mask] = color

    ys, xs = np.nonzero(mask)
    box = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
    return Sample(image=image, label=label, box=box, mask=mask, index=index)


def generate(spec: ShapesSpec) -> Dataset:
    """Generate the dataset; pure in (spec, seed)."""
    spec.validate()
    semantics = class_semantics(spec)
    per_class = spec.train_per_class + spec.eval_per_class
    train: list[Sample] = []
    eval_: list[Sample] = []
    for label, info in enumerate(semantics.classes):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, label]))
        samples = [
            _render(spec, rng, label, info, index=label * per_class + i)
            for i in range(per_class)
        ]
        # 80/20-style split keyed on a hash of the global sample index so the
        # assignment is stable under re-generation; counts stay exact per class
        keys = [_splitmix64((spec.seed << 32) ^ s.index) for s in samples]
        order = np.argsort(np.array(keys, dtype=np.uint64), kind="stable")
        for rank, pos in enumerate(order):
            (train if rank < spec.train_per_class else eval_).append(samples[pos])
    train.sort(key=lambda s: s.index)
    eval_.sort(key=lambda s: s.index)
    return Dataset(spec=spec, train=train, eval=eval_)


def write_box_list(samples: list[Sample], path: str) -> None:
    """Export ground-truth boxes: one line per box, `image_id class x0 y0 x1 y1`."""
    lines = [
        f"{s.index} {s.label} {s.box[0]} {s.box[1]} {s.box[2]} {s.box[3]}" for s in samples
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_box_list(path: str) -> dict[int, list[tuple[int, tuple[int, int, int, int]]]]:
    """Parse a box-list file into image_id -> [(class, box), ...]."""
    boxes: dict[int, list[tuple[int, tuple[int, int, int, int]]]] = {}
    with open(path, encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            parts = raw.split()
            if len(parts) != 6:
                raise DomainError(f"box list line {ln}: expected 6 fields, got {len(parts)}")
            img, cls, x0, y0, x1, y1 = (int(p) for p in parts)
            boxes.setdefault(img, []).append((cls, (x0, y0, x1, y1)))
    return boxes
