"""Tiny convolutional image encoder with a linear classification head.

The final conv output is the feature-map stack that saliency and the
alignment losses consume: N channels, each flattened to d' = h*w positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    input_size: tuple[int, int, int] = (16, 16, 3)  # H, W, C
    channels: tuple[int, ...] = (8, 16, 16)
    strides: tuple[int, ...] = (2, 2, 1)
    kernel: int = 3
    num_classes: int = 6

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    def spatial_shape(self) -> tuple[int, int]:
        h, w, _ = self.input_size
        pad = self.kernel // 2
        for s in self.strides:
            h = (h + 2 * pad - self.kernel) // s + 1
            w = (w + 2 * pad - self.kernel) // s + 1
        return h, w

    @property
    def feature_positions(self) -> int:
        h, w = self.spatial_shape()
        return h * w

    def validate(self) -> None:
        if len(self.channels) != len(self.strides):
            raise ConfigError("channels and strides must have equal length")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        h, w = self.spatial_shape()
        if h < 1 or w < 1:
            raise ConfigError("strided convs collapse the spatial extent below 1")


@dataclass
class FeatureMaps:
    values: Tensor  # (N, d')
    spatial_shape: tuple[int, int]


def _fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    # sqrt(6/fan_in) keeps activation variance alive through the ReLU stack;
    # with 1/sqrt(fan_in) the feature norms start tiny and the normalized
    # alignment costs then dominate every early gradient
    s = np.sqrt(6.0 / fan_in)
    return rng.uniform(-s, s, size=shape).astype(np.float32)


class ImageEncoder:
    """Conv stack f + linear classifier; parameters are requires_grad leaves."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init_all(np.random.default_rng(np.random.SeedSequence([seed, 0x1A6])))

    # --- parameter management -------------------------------------------------

    def layer_names(self) -> list[str]:
        """Randomizable layers ordered bottom (input) to top (output)."""
        convs = [f"conv{i + 1}" for i in range(len(self.config.channels))]
        return convs + ["classifier"]

    def _init_layer(self, name: str, rng: np.random.Generator) -> None:
        cfg = self.config
        k = cfg.kernel
        if name == "classifier":
            n = cfg.feature_channels
            self.params["classifier.weight"] = Tensor(
                _fan_in_uniform(rng, (n, cfg.num_classes), n), requires_grad=True
            )
            self.params["classifier.bias"] = Tensor(
                np.zeros(cfg.num_classes, dtype=np.float32), requires_grad=True
            )
            return
        idx = int(name.removeprefix("conv")) - 1
        cin = cfg.input_size[2] if idx == 0 else cfg.channels[idx - 1]
        cout = cfg.channels[idx]
        fan_in = cin * k * k
        self.params[f"{name}.weight"] = Tensor(
            _fan_in_uniform(rng, (cout, cin, k, k), fan_in), requires_grad=True
        )
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def _init_all(self, rng: np.random.Generator) -> None:
        for name in self.layer_names():
            self._init_layer(name, rng)

    def reinit_layer(self, name: str, rng: np.random.Generator) -> None:
        if name not in self.layer_names():
            raise DomainError(f"unknown layer '{name}'")
        self._init_layer(name, rng)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    # --- forward ---------------------------------------------------------------

    def encode_batch(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """(B, C, H, W) images -> (feature maps (B, N, h, w), flattened (B, N, d'))."""
        cfg = self.config
        h, w, c = cfg.input_size
        if images.data.ndim != 4 or images.shape[1:] != (c, h, w):
            raise ShapeError(f"expected (B, {c}, {h}, {w}) images, got {images.shape}")
        x = images
        pad = cfg.kernel // 2
        for i, stride in enumerate(cfg.strides):
            x = T.conv2d(
                x,
                self.params[f"conv{i + 1}.weight"],
                self.params[f"conv{i + 1}.bias"],
                stride=stride,
                padding=pad,
            )
            x = T.relu(x)
        fh, fw = cfg.spatial_shape()
        flat = T.reshape(x, (x.shape[0], cfg.feature_channels, fh * fw))
        return x, flat

    def encode(self, image: Tensor) -> FeatureMaps:
        """Single (H, W, C) image -> FeatureMaps (N, d')."""
        cfg = self.config
        if image.shape != cfg.input_size:
            raise ShapeError(f"expected {cfg.input_size} image, got {image.shape}")
        nchw = T.reshape(T.transpose(image, (2, 0, 1)), (1,) + (cfg.input_size[2],) + cfg.input_size[:2])
        _, flat = self.encode_batch(nchw)
        values = T.reshape(flat, (cfg.feature_channels, cfg.feature_positions))
        return FeatureMaps(values=values, spatial_shape=cfg.spatial_shape())

    def classify_batch(self, feature_maps: Tensor) -> Tensor:
        """(B, N, h, w) feature maps -> (B, num_classes) logits."""
        pooled = T.global_avg_pool(feature_maps)
        logits = T.matmul(pooled, self.params["classifier.weight"])
        return T.add(logits, self.params["classifier.bias"])

    def classify(self, features: FeatureMaps) -> Tensor:
        """FeatureMaps -> (num_classes,) logits."""
        n, dp = features.values.shape
        fh, fw = features.spatial_shape
        maps = T.reshape(features.values, (1, n, fh, fw))
        return T.reshape(self.classify_batch(maps), (self.config.num_classes,))

    def logits_for_images(self, images: np.ndarray) -> np.ndarray:
        """Convenience inference path: (B, H, W, 3) numpy in, logits numpy out."""
        batch = Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
        maps, _ = self.encode_batch(batch)
        return self.classify_batch(maps).numpy()


def batch_to_tensor(images: list[np.ndarray]) -> Tensor:
    """Stack (H, W, 3) images into a leaf (B, 3, H, W) tensor."""
    arr = np.stack(images).transpose(0, 3, 1, 2)
    return Tensor(np.ascontiguousarray(arr))


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log-softmax of the labelled logit, stabilised via log-sum-exp."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy expects a logit vector, got {logits.shape}")
    k = logits.shape[0]
    if not 0 <= label < k:
        raise DomainError(f"label {label} out of range for {k} classes")
    shift = float(logits.data.max())
    z = T.sub(logits, Tensor(np.full(k, shift, dtype=logits.dtype)))
    lse = T.log(T.tsum(T.exp(z)))
    onehot = np.zeros(k, dtype=logits.dtype)
    onehot[label] = 1.0
    picked = T.tsum(T.mul(z, Tensor(onehot)))
    return T.sub(lse, picked)


def cross_entropy_batch(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over a batch plus the per-sample values (for diagnostics)."""
    b, k = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise DomainError("label out of range")
    shift = logits.data.max(axis=1, keepdims=True)
    z = T.sub(logits, Tensor(shift.astype(logits.dtype)))
    lse = T.log(T.tsum(T.exp(z), axis=1))
    onehot = np.zeros((b, k), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1.0
    picked = T.tsum(T.mul(z, Tensor(onehot)), axis=1)
    per_sample = T.sub(lse, picked)
    return T.tmean(per_sample), per_sample.numpy()
