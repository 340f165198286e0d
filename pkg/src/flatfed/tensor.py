"""Dense double-precision tensors and flat parameter vectors.

Everything in the simulator moves through two containers: ``Tensor`` for
activations / images and ``ParamVector`` for the flattened model weights.
All arithmetic is float64; the finite-difference oracles in the test suite
rely on that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError

__all__ = ["Tensor", "ParamVector", "Batch", "Manifest"]


class Tensor:
    """Row-major dense tensor of float64 values.

    Thin wrapper over a contiguous numpy array; shape entries must be >= 1.
    """

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise UsageError(f"tensor shape entries must be >= 1, got {arr.shape}")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


# A manifest is the layout contract between a model and every flat vector that
# parametrizes it: ordered (name, shape, offset) entries, offsets contiguous.
Manifest = tuple[tuple[str, tuple[int, ...], int], ...]


def _manifest_length(manifest: Manifest) -> int:
    total = 0
    for name, shape, offset in manifest:
        size = int(np.prod(shape))
        if offset != total:
            raise UsageError(f"manifest entry {name!r} at offset {offset}, expected {total}")
        total += size
    return total


@dataclass(frozen=True)
class ParamVector:
    """Flat view of all model weights plus the layer-shape manifest."""

    data: np.ndarray
    manifest: Manifest

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64).ravel()
        object.__setattr__(self, "data", arr)
        if arr.size != _manifest_length(self.manifest):
            raise ConfigError(
                f"parameter vector has {arr.size} entries, manifest describes "
                f"{_manifest_length(self.manifest)}"
            )

    @property
    def size(self) -> int:
        return int(self.data.size)

    def view(self, name: str) -> np.ndarray:
        """Shaped view (no copy) of one named block."""
        for entry_name, shape, offset in self.manifest:
            if entry_name == name:
                size = int(np.prod(shape))
                return self.data[offset : offset + size].reshape(shape)
        raise KeyError(name)

    def like(self, data: np.ndarray) -> "ParamVector":
        """New vector with this manifest around ``data`` (not copied)."""
        return ParamVector(data, self.manifest)

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.manifest)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.data), self.manifest)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def same_manifest(self, other: "ParamVector") -> bool:
        return self.manifest == other.manifest


@dataclass(frozen=True)
class Batch:
    """One minibatch: images ``x`` (B, ...) and labels ``y``.

    ``y`` is either an int array (B,) of class ids or a float array
    (B, num_classes) of soft label distributions (mixup output).
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.ascontiguousarray(self.x, dtype=np.float64))
        if np.issubdtype(np.asarray(self.y).dtype, np.integer):
            object.__setattr__(self, "y", np.ascontiguousarray(self.y, dtype=np.int64))
        else:
            object.__setattr__(self, "y", np.ascontiguousarray(self.y, dtype=np.float64))
        if len(self.x) == 0:
            raise UsageError("empty batch")
        if len(self.x) != len(self.y):
            raise UsageError(f"batch size mismatch: {len(self.x)} images, {len(self.y)} labels")

    @property
    def size(self) -> int:
        return int(len(self.x))

    @property
    def soft_labels(self) -> bool:
        return self.y.ndim == 2
