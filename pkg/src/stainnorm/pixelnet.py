"""A three-layer convolutional color-mapping network.

The default network maps every pixel independently through 1x1 convolutions
``3 -> 32 -> 32 -> 3`` (1283 parameters).  Ablation variants replace trailing
layers with 3x3 convolutions (reflection padded, so spatial size is kept).
Inputs and outputs live on the symmetric interval [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import serialization
from .image import SYMMETRIC, check_rgb, from_float, scale_values, to_float
from ._kernels import pointwise_mlp, pointwise_mlp_u8

CHECKPOINT_SCHEMA = 1
PRECISIONS = {32: np.float32, 64: np.float64}


class SpatialKernelError(ValueError):
    """Raised when a per-pixel operation is requested from a net with 3x3 layers."""

    def __init__(self, msg="net contains spatial kernels"):
        super().__init__(msg)


@dataclass(frozen=True)
class LayerSpec:
    in_channels: int
    out_channels: int
    kernel: int = 1

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def n_params(self) -> int:
        return self.in_channels * self.out_channels * self.kernel**2 + self.out_channels


@dataclass(frozen=True)
class PixelNetConfig:
    layers: tuple[LayerSpec, ...]
    hidden_width: int = 32

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("config needs at least one layer")
        if layers[0].in_channels != 3 or layers[-1].out_channels != 3:
            raise ValueError("first layer must take 3 channels and last layer must emit 3")
        for i, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.out_channels != b.in_channels:
                raise ValueError(f"layer {i} emits {a.out_channels} channels but layer {i + 1} takes {b.in_channels}")

    @classmethod
    def default(cls, hidden_width: int = 32) -> "PixelNetConfig":
        return cls.from_counts(3, 0, hidden_width)

    @classmethod
    def from_counts(cls, n_pointwise: int, n_spatial: int, hidden_width: int = 32) -> "PixelNetConfig":
        """Three-layer net with ``n_pointwise`` 1x1 layers followed by ``n_spatial`` 3x3 layers."""
        if n_pointwise + n_spatial != 3 or min(n_pointwise, n_spatial) < 0:
            raise ValueError("the family has exactly three layers")
        if hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")
        widths = [3, hidden_width, hidden_width, 3]
        kernels = [1] * n_pointwise + [3] * n_spatial
        layers = tuple(LayerSpec(widths[i], widths[i + 1], kernels[i]) for i in range(3))
        return cls(layers, hidden_width)

    @property
    def pointwise(self) -> bool:
        return all(layer.kernel == 1 for layer in self.layers)

    @property
    def n_spatial(self) -> int:
        return sum(layer.kernel == 3 for layer in self.layers)

    def to_dict(self) -> dict:
        return {
            "hidden_width": self.hidden_width,
            "layers": [{"in": l.in_channels, "out": l.out_channels, "k": l.kernel} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PixelNetConfig":
        layers = tuple(LayerSpec(int(l["in"]), int(l["out"]), int(l["k"])) for l in doc["layers"])
        return cls(layers, int(doc.get("hidden_width", 32)))


def ablation_variants(hidden_width: int = 32) -> list[PixelNetConfig]:
    """Configs for (1x1, 3x3) layer counts (3, 0), (2, 1), (1, 2) and (0, 3)."""
    if hidden_width < 1:
        raise ValueError("hidden_width must be >= 1")
    return [PixelNetConfig.from_counts(n, 3 - n, hidden_width) for n in (3, 2, 1, 0)]


def parse_variant(text: str, hidden_width: int = 32) -> PixelNetConfig:
    """Parse ``"1x1:2,3x3:1"`` into a config."""
    counts = {"1x1": 0, "3x3": 0}
    for part in text.split(","):
        key, _, value = part.strip().partition(":")
        if key not in counts or not value.isdigit():
            raise ValueError(f"bad variant spec {text!r}; expected e.g. '1x1:2,3x3:1'")
        counts[key] = int(value)
    return PixelNetConfig.from_counts(counts["1x1"], counts["3x3"], hidden_width)


@dataclass
class PixelNet:
    config: PixelNetConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.config.layers) or len(self.biases) != len(self.config.layers):
            raise ValueError("one weight and bias array per layer is required")
        weights, biases = [], []
        for spec, w, b in zip(self.config.layers, self.weights, self.biases):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            if w.shape != shape or b.shape != (spec.out_channels,):
                raise ValueError(f"expected weights {shape} and bias ({spec.out_channels},), got {w.shape} and {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")
            weights.append(w)
            biases.append(b)
        self.weights = weights
        self.biases = biases

    @property
    def pointwise(self) -> bool:
        return self.config.pointwise

    def parameters(self) -> np.ndarray:
        """Flat parameter vector, layer by layer, weights before biases."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_parameters(self, theta: np.ndarray) -> "PixelNet":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (param_count(self),):
            raise ValueError(f"expected {param_count(self)} parameters, got {theta.shape}")
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(theta[pos : pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(theta[pos : pos + b.size].copy())
            pos += b.size
        return PixelNet(self.config, weights, biases)

    def copy(self) -> "PixelNet":
        return self.with_parameters(self.parameters())

    def to_dict(self) -> dict:
        layers = []
        for spec, w, b in zip(self.config.layers, self.weights, self.biases):
            layers.append(
                {
                    "in": spec.in_channels,
                    "out": spec.out_channels,
                    "k": spec.kernel,
                    "weights": w.ravel().tolist(),
                    "bias": b.tolist(),
                }
            )
        return {"schema": CHECKPOINT_SCHEMA, "config": self.config.to_dict(), "layers": layers}

    @classmethod
    def from_dict(cls, doc: dict) -> "PixelNet":
        if doc.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {doc.get('schema')!r}")
        config = PixelNetConfig.from_dict(doc["config"])
        if len(doc["layers"]) != len(config.layers):
            raise ValueError("checkpoint layer count does not match its config")
        weights, biases = [], []
        for spec, layer in zip(config.layers, doc["layers"]):
            if (layer["in"], layer["out"], layer["k"]) != (spec.in_channels, spec.out_channels, spec.kernel):
                raise ValueError("checkpoint layer shape does not match its config")
            w = np.array([serialization.parse_real(v) for v in layer["weights"]])
            b = np.array([serialization.parse_real(v) for v in layer["bias"]])
            if w.size + b.size != spec.n_params:
                raise ValueError(f"checkpoint layer has {w.size + b.size} parameters, expected {spec.n_params}")
            weights.append(w.reshape(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel))
            biases.append(b)
        return cls(config, weights, biases)


def save_checkpoint(net: PixelNet, path: str | Path) -> None:
    serialization.write_json(net.to_dict(), path)


def load_checkpoint(path: str | Path) -> PixelNet:
    return PixelNet.from_dict(serialization.read_json(path))


def init(config: PixelNetConfig, seed: int | np.random.Generator = 0) -> PixelNet:
    """Fan-in scaled uniform weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for spec in config.layers:
        bound = np.sqrt(1.0 / (spec.in_channels * spec.kernel**2))
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        weights.append(rng.uniform(-bound, bound, size=shape))
        biases.append(np.zeros(spec.out_channels))
    return PixelNet(config, weights, biases)


def param_count(net: PixelNet | PixelNetConfig) -> int:
    config = net.config if isinstance(net, PixelNet) else net
    return sum(spec.n_params for spec in config.layers)


# --------------------------------------------------------------------------
# Layer arithmetic shared with training.  Arrays are (batch, H, W, C).


def reflect_pad(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="reflect")


def reflect_pad_adjoint(g: np.ndarray) -> np.ndarray:
    """Fold a gradient w.r.t. a reflection-padded array back onto the original."""
    h = g.shape[1] - 2
    w = g.shape[2] - 2
    rows = g[:, 1 : h + 1].copy()
    rows[:, 1] += g[:, 0]
    rows[:, h - 2] += g[:, h + 1]
    out = rows[:, :, 1 : w + 1].copy()
    out[:, :, 1] += rows[:, :, 0]
    out[:, :, w - 2] += rows[:, :, w + 1]
    return out


def conv_layer(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, h, wd, c = x.shape
    k = w.shape[2]
    if k == 1:
        y = x.reshape(-1, c) @ w[:, :, 0, 0].T
        y += b
        return y.reshape(n, h, wd, -1)
    if h < 2 or wd < 2:
        raise ValueError("3x3 layers need images of at least 2x2 pixels")
    xp = reflect_pad(x)
    y = np.empty((n * h * wd, w.shape[0]), dtype=x.dtype)
    y[:] = b
    for dy in range(3):
        for dx in range(3):
            y += xp[:, dy : dy + h, dx : dx + wd].reshape(-1, c) @ w[:, :, dy, dx].T
    return y.reshape(n, h, wd, -1)


def _cast(net: PixelNet, dtype):
    return [w.astype(dtype) for w in net.weights], [b.astype(dtype) for b in net.biases]


def _check_input(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) float image, got shape {image.shape}")
    return image


def _flat_layers(net: PixelNet, dtype):
    dims = np.array([net.config.layers[0].in_channels] + [s.out_channels for s in net.config.layers], dtype=np.int64)
    weights, biases = _cast(net, dtype)
    return dims, np.concatenate([wi.reshape(-1) for wi in weights]), np.concatenate(biases)


def forward(net: PixelNet, image: np.ndarray, precision: int = 32) -> np.ndarray:
    """Map a float image on [-1, 1] through the network.

    ReLU after every layer but the last, output clamped to [-1, 1].  Fully 1x1
    nets run through a compiled per-pixel kernel, so results are independent
    of pixel position and image size.
    """
    image = _check_input(image)
    dtype = PRECISIONS[precision]
    h, w, _ = image.shape
    if net.pointwise:
        x = np.ascontiguousarray(image.reshape(-1, 3), dtype=dtype)
        out = np.empty_like(x)
        pointwise_mlp(x, *_flat_layers(net, dtype), out)
        return out.reshape(h, w, 3)
    weights, biases = _cast(net, dtype)
    a = image.astype(dtype)[None]
    last = len(weights) - 1
    for i, (wi, bi) in enumerate(zip(weights, biases)):
        a = conv_layer(a, wi, bi)
        if i < last:
            np.maximum(a, 0, out=a)
    return np.clip(a[0], -1, 1)


def normalize_image(net: PixelNet, image: np.ndarray, precision: int = 32) -> np.ndarray:
    """8-bit RGB in, 8-bit RGB out, on the symmetric scale.

    Byte-identical to ``from_float(forward(net, to_float(image)))``.  Fully
    1x1 nets skip the intermediate float images and run in one compiled pass.
    """
    image = check_rgb(image)
    if not net.pointwise:
        return from_float(forward(net, to_float(image), precision))
    dtype = PRECISIONS[precision]
    levels = scale_values(np.arange(256), SYMMETRIC).astype(dtype)
    x = np.ascontiguousarray(image).reshape(-1, 3)
    out = np.empty_like(x)
    pointwise_mlp_u8(x, levels, *_flat_layers(net, dtype), out)
    return out.reshape(image.shape)


def forward_pixel(net: PixelNet, rgb, precision: int = 32) -> np.ndarray:
    """Forward a single symmetric-scaled RGB triple."""
    if not net.pointwise:
        raise SpatialKernelError()
    return forward(net, np.asarray(rgb, dtype=np.float64).reshape(1, 1, 3), precision).reshape(3)
