"""Model definitions: the CIFAR-scale CNN and small MLPs for oracle tests.

A model is a static ``ModelSpec`` (ordered layer descriptors plus input
shape); weights live separately in a flat ``ParamVector`` whose manifest is
derived from the spec. The autodiff engine interprets the spec.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import Manifest, ParamVector

__all__ = [
    "Conv",
    "MaxPool",
    "Dense",
    "Relu",
    "Flatten",
    "ModelSpec",
    "lenet_cifar",
    "mlp",
    "init_params",
]


@dataclass(frozen=True)
class Conv:
    """Valid (no padding) stride-1 convolution, square kernel."""

    out_channels: int
    kernel: int


@dataclass(frozen=True)
class MaxPool:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a
    window are dropped (floor division)."""

    size: int


@dataclass(frozen=True)
class Dense:
    out_features: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Conv | MaxPool | Dense | Relu | Flatten


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer stack with a fixed input shape.

    Construction checks that consecutive layer shapes compose and that the
    final layer emits ``num_classes`` logits.
    """

    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    num_classes: int
    manifest: Manifest = field(init=False, compare=False)

    def __post_init__(self):
        manifest, out_shape = _trace_shapes(self.layers, self.input_shape)
        if out_shape != (self.num_classes,):
            raise ConfigError(
                f"model emits shape {out_shape}, expected ({self.num_classes},) logits"
            )
        object.__setattr__(self, "manifest", manifest)

    @property
    def num_params(self) -> int:
        if not self.manifest:
            return 0
        name, shape, offset = self.manifest[-1]
        return offset + int(np.prod(shape))

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Activation shape after each layer (excluding the batch axis)."""
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shape = _apply_shape(layer, shape)
            shapes.append(shape)
        return shapes

    def to_dict(self) -> dict:
        """Serializable description (used in config snapshots and exports)."""
        descs = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                descs.append({"kind": "conv", "out_channels": layer.out_channels, "kernel": layer.kernel})
            elif isinstance(layer, MaxPool):
                descs.append({"kind": "maxpool", "size": layer.size})
            elif isinstance(layer, Dense):
                descs.append({"kind": "dense", "out_features": layer.out_features})
            elif isinstance(layer, Relu):
                descs.append({"kind": "relu"})
            else:
                descs.append({"kind": "flatten"})
        return {
            "layers": descs,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        layers: list[Layer] = []
        for desc in d["layers"]:
            kind = desc["kind"]
            if kind == "conv":
                layers.append(Conv(int(desc["out_channels"]), int(desc["kernel"])))
            elif kind == "maxpool":
                layers.append(MaxPool(int(desc["size"])))
            elif kind == "dense":
                layers.append(Dense(int(desc["out_features"])))
            elif kind == "relu":
                layers.append(Relu())
            elif kind == "flatten":
                layers.append(Flatten())
            else:
                raise ConfigError(f"unknown layer kind {kind!r}")
        return ModelSpec(tuple(layers), tuple(int(s) for s in d["input_shape"]), int(d["num_classes"]))


def _apply_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Conv):
        if len(shape) != 3:
            raise ConfigError(f"conv layer needs (C, H, W) input, got {shape}")
        c, h, w = shape
        k = layer.kernel
        if h < k or w < k:
            raise ConfigError(f"conv kernel {k} larger than input {h}x{w}")
        return (layer.out_channels, h - k + 1, w - k + 1)
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise ConfigError(f"maxpool layer needs (C, H, W) input, got {shape}")
        c, h, w = shape
        s = layer.size
        if h < s or w < s:
            raise ConfigError(f"pool window {s} larger than input {h}x{w}")
        return (c, h // s, w // s)
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ConfigError(f"dense layer needs flat input, got {shape}")
        return (layer.out_features,)
    if isinstance(layer, Relu):
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    raise ConfigError(f"unknown layer {layer!r}")


def _trace_shapes(layers: tuple[Layer, ...], input_shape: tuple[int, ...]):
    entries = []
    offset = 0
    shape = input_shape
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv):
            w_shape = (layer.out_channels, shape[0], layer.kernel, layer.kernel)
            entries.append((f"conv{i}.w", w_shape, offset))
            offset += int(np.prod(w_shape))
            entries.append((f"conv{i}.b", (layer.out_channels,), offset))
            offset += layer.out_channels
        elif isinstance(layer, Dense):
            w_shape = (layer.out_features, shape[0])
            entries.append((f"fc{i}.w", w_shape, offset))
            offset += int(np.prod(w_shape))
            entries.append((f"fc{i}.b", (layer.out_features,), offset))
            offset += layer.out_features
        shape = _apply_shape(layer, shape)
    return tuple(entries), shape


def lenet_cifar(num_classes: int, input_shape: tuple[int, int, int] = (3, 32, 32)) -> ModelSpec:
    """LeNet-style CNN for 32x32 inputs.

    Two 64-channel 5x5 convolutions (ReLU, then 2x2 max pooling after each),
    two fully connected layers of 384 and 192 units with ReLU, and a linear
    classifier.
    """
    if num_classes < 1:
        raise ConfigError("num_classes must be positive")
    layers = (
        Conv(64, 5),
        Relu(),
        MaxPool(2),
        Conv(64, 5),
        Relu(),
        MaxPool(2),
        Flatten(),
        Dense(384),
        Relu(),
        Dense(192),
        Relu(),
        Dense(num_classes),
    )
    return ModelSpec(layers, input_shape, num_classes)


def mlp(dims: list[int]) -> ModelSpec:
    """Dense + ReLU chain; the last layer is linear.

    ``dims`` lists the widths including input and output, so ``[4, 8, 3]``
    is one hidden layer of 8 units.
    """
    if len(dims) < 2:
        raise UsageError("mlp needs at least [input_dim, output_dim]")
    if any(d < 1 for d in dims):
        raise ConfigError(f"mlp widths must be positive, got {dims}")
    layers: list[Layer] = []
    for out in dims[1:-1]:
        layers.append(Dense(out))
        layers.append(Relu())
    layers.append(Dense(dims[-1]))
    return ModelSpec(tuple(layers), (dims[0],), dims[-1])


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """He-uniform fan-in initialization, zero biases, deterministic per seed.

    Weights are U(-limit, limit) with limit = sqrt(6 / fan_in), which has
    variance exactly 2 / fan_in.
    """
    rng = np.random.default_rng(seed)
    data = np.zeros(spec.num_params, dtype=np.float64)
    out = ParamVector(data, spec.manifest)
    for name, shape, offset in spec.manifest:
        if name.endswith(".b"):
            continue
        if len(shape) == 4:  # conv: (out, in, k, k)
            fan_in = shape[1] * shape[2] * shape[3]
        else:  # dense: (out, in)
            fan_in = shape[1]
        limit = np.sqrt(6.0 / fan_in)
        block = rng.uniform(-limit, limit, size=int(np.prod(shape)))
        data[offset : offset + block.size] = block
    return out
