"""Dense NCHW tensors and the structural primitives every other module builds on."""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from ddpnet._tape import record
from ddpnet.errors import ShapeError

FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Shape(NamedTuple):
    """Extents of a 4-D activation, row-major with width fastest."""

    n: int
    c: int
    h: int
    w: int

    @classmethod
    def of(cls, value) -> "Shape":
        dims = tuple(int(v) for v in value)
        if len(dims) != 4:
            raise ShapeError(f"expected 4 extents (n, c, h, w), got {dims}")
        if any(v < 1 for v in dims):
            raise ShapeError(f"all extents must be positive, got {dims}")
        return cls(*dims)

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w

    def with_channels(self, c: int) -> "Shape":
        return self._replace(c=c)

    def __str__(self) -> str:
        return f"{self.n}x{self.c}x{self.h}x{self.w}"


class Tensor:
    """Immutable array value with optional gradient tracking.

    Activations are 4-D; parameters (biases, norm scales) and the scalar loss
    use the same type with lower rank. Storage is read-only after construction.
    """

    __slots__ = ("data", "requires_grad", "name", "_node")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = np.float32
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in FLOAT_TYPES:
            arr = arr.astype(np.float32)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @classmethod
    def wrap(cls, arr: np.ndarray, requires_grad: bool = False, name: str | None = None) -> "Tensor":
        """Take ownership of ``arr`` without copying."""
        t = cls.__new__(cls)
        # np.ascontiguousarray would promote a 0-d scalar to shape (1,)
        arr = np.require(arr, requirements="C")
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = name
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def shape4(self) -> Shape:
        return Shape.of(self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor.wrap(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor.wrap(np.zeros(tuple(shape), dtype=dtype))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor.wrap(np.zeros_like(t.data))


def randn(shape, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    return Tensor.wrap(rng.standard_normal(tuple(shape)).astype(dtype))


def _require_4d(t: Tensor, what: str) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{what}: expected a 4-D tensor, got shape {t.shape}")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack along channels; part i fills the range right after parts 0..i-1."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels: empty list")
    for p in parts:
        _require_4d(p, "concat_channels")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {p.shape} does not match batch/spatial extents {(n, h, w)}")
    if len(parts) == 1:
        return parts[0]
    out = Tensor.wrap(np.concatenate([p.data for p in parts], axis=1))
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return [g[:, bounds[i]: bounds[i + 1]] for i in range(len(parts))]

    return record("concat", parts, out, backward)


def split_channels(t: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    _require_4d(t, "split_channels")
    sizes = [int(s) for s in sizes]
    if any(s <= 0 for s in sizes) or sum(sizes) != t.shape[1]:
        raise ShapeError(f"split_channels: sizes {sizes} do not partition {t.shape[1]} channels")
    bounds = np.cumsum([0] + sizes)
    outs = []
    for i in range(len(sizes)):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        piece = Tensor.wrap(t.data[:, lo:hi])

        def backward(g, lo=lo, hi=hi):
            full = np.zeros(t.shape, dtype=g.dtype)
            full[:, lo:hi] = g
            return [full]

        outs.append(record("split", [t], piece, backward))
    return outs


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor.wrap(a.data + b.data)
    return record("add", [a, b], out, lambda g: [g, g])


def negate(a: Tensor) -> Tensor:
    out = Tensor.wrap(-a.data)
    return record("negate", [a], out, lambda g: [-g])
