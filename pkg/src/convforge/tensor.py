"""Dense row-major float tensors, the global precision switch, and the portable RNG.

Tensors wrap a C-contiguous numpy buffer. All operations allocate fresh
outputs (no views, no aliasing) and reject shape mismatches instead of
broadcasting; the only broadcast-like operation is multiplication by a
scalar. Callers must treat tensors as immutable; the optimizer is the one
sanctioned in-place writer.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ArgumentError, ShapeError

_DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
_default_dtype = _DTYPES["f32"]


def default_dtype() -> np.dtype:
    """Dtype used for tensors constructed without an explicit dtype."""
    return _default_dtype


def set_default_dtype(name: str) -> None:
    global _default_dtype
    if name not in _DTYPES:
        raise ArgumentError(f"unknown precision {name!r}; expected 'f32' or 'f64'")
    _default_dtype = _DTYPES[name]


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default precision ("f32" training, "f64" gradient checks)."""
    global _default_dtype
    previous = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = previous


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    for d in shape:
        if d < 1:
            raise ShapeError(f"dimensions must be >= 1, got shape {shape}")
    return shape


class Tensor:
    """N-dimensional float array, row-major, C-contiguous, no views."""

    __slots__ = ("array",)

    def __init__(self, array: np.ndarray):
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(_default_dtype)
        self.array = np.ascontiguousarray(array)

    # -- structure ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def strides(self) -> tuple[int, ...]:
        """Row-major element strides (not byte strides)."""
        item = self.array.itemsize
        return tuple(s // item for s in self.array.strides)

    @property
    def data(self) -> np.ndarray:
        """Flat read view of the underlying buffer, row-major order."""
        return self.array.reshape(-1)

    @property
    def dtype(self) -> np.dtype:
        return self.array.dtype

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def ndim(self) -> int:
        return self.array.ndim

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.array.astype(dtype))

    def copy(self) -> "Tensor":
        return Tensor(self.array.copy())

    def item(self) -> float:
        return float(self.array.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")

    def tolist(self):
        return self.array.tolist()

    def __getitem__(self, idx):
        value = self.array[idx]
        if np.isscalar(value) or value.ndim == 0:
            return float(value)
        return Tensor(value.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.array.dtype.name})"

    # -- arithmetic sugar (delegates to the module functions) ---------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


# -- constructors ------------------------------------------------------------


def zeros(shape: Sequence[int], dtype=None) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=dtype or _default_dtype))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros(t.shape, dtype=t.dtype))


def full(shape: Sequence[int], value: float, dtype=None) -> Tensor:
    if not math.isfinite(value):
        raise ArgumentError(f"fill value must be finite, got {value}")
    return Tensor(np.full(_check_shape(shape), value, dtype=dtype or _default_dtype))


def from_data(shape: Sequence[int], values: Sequence[float], dtype=None) -> Tensor:
    shape = _check_shape(shape)
    flat = np.asarray(values, dtype=dtype or _default_dtype).reshape(-1)
    expected = int(np.prod(shape)) if shape else 1
    if flat.size != expected:
        raise ShapeError(f"got {flat.size} values for shape {shape} (expected {expected})")
    if not np.all(np.isfinite(flat)):
        raise ArgumentError("from_data values must all be finite")
    return Tensor(flat.reshape(shape).copy())


def from_numpy(array: np.ndarray, dtype=None) -> Tensor:
    """Wrap an array, copying into the requested (or current default) dtype."""
    return Tensor(np.asarray(array, dtype=dtype or _default_dtype).copy())


# -- elementwise and linear algebra ------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor(a.array + b.array)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor(a.array - b.array)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return Tensor(a.array * b.array)


def scale(a: Tensor, s: float) -> Tensor:
    return Tensor(a.array * a.dtype.type(s))


def map_unary(a: Tensor, fn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Apply a vectorized elementwise function to a fresh copy of the buffer."""
    out = np.asarray(fn(a.array.copy()), dtype=a.dtype)
    if out.shape != a.shape:
        raise ShapeError(f"map_unary function changed shape {a.shape} -> {out.shape}")
    return Tensor(out)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return Tensor(a.array @ b.array)


# -- portable RNG -------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64(words: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer (Steele, Lea & Flood 2014); uint64 wrap-around intended.
    with np.errstate(over="ignore"):
        z = words.astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based SplitMix64 stream.

    Output word i is ``mix64(seed + (i + 1) * GAMMA)`` where GAMMA is the
    64-bit golden ratio. The same seed yields the same sequence on every
    platform; ``child`` derives statistically independent streams by folding
    integer tags through the same finalizer, so per-epoch and per-batch
    streams never depend on how much of the parent stream was consumed.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def child(self, *tags: int) -> "Rng":
        s = np.uint64(self.seed)
        for tag in tags:
            t = np.uint64((int(tag) + 1) & _MASK64)
            with np.errstate(over="ignore"):
                s = _mix64(np.asarray([s ^ (t * np.uint64(_GAMMA))]))[0]
        return Rng(int(s))

    def _words(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self.seed) + idx * np.uint64(_GAMMA))

    def next_u64(self) -> int:
        return int(self._words(1)[0])

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi). Modulo bias is ~(hi-lo)/2^64, negligible here."""
        if hi <= lo:
            raise ArgumentError(f"randint needs lo < hi, got [{lo}, {hi})")
        return lo + self.next_u64() % (hi - lo)

    def uniform_array(self, n: int) -> np.ndarray:
        """n doubles in [0, 1), 53-bit resolution."""
        return (self._words(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normal_array(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller on consecutive uniform pairs."""
        pairs = (n + 1) // 2
        u = self.uniform_array(2 * pairs)
        u1, u2 = u[:pairs], u[pairs:]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = (2.0 * np.pi) * u2
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) by sorting one random key per index."""
        return np.argsort(self._words(n), kind="stable")

    def shuffle(self, items: list) -> list:
        return [items[i] for i in self.permutation(len(items))]


def rng_uniform(rng: Rng, shape: Sequence[int], lo: float, hi: float, dtype=None) -> Tensor:
    if not (lo < hi):
        raise ArgumentError(f"uniform range must satisfy lo < hi, got [{lo}, {hi})")
    shape = _check_shape(shape)
    dtype = dtype or _default_dtype
    n = int(np.prod(shape)) if shape else 1
    out = (lo + rng.uniform_array(n) * (hi - lo)).astype(dtype)
    # Rounding in the target dtype may bump a value onto hi; the contract is [lo, hi).
    top = np.nextafter(np.asarray(hi, dtype=dtype), np.asarray(lo, dtype=dtype))
    return Tensor(np.minimum(out, top).reshape(shape))


def rng_normal(rng: Rng, shape: Sequence[int], mean: float, std: float, dtype=None) -> Tensor:
    if std < 0:
        raise ArgumentError(f"normal std must be >= 0, got {std}")
    shape = _check_shape(shape)
    dtype = dtype or _default_dtype
    n = int(np.prod(shape)) if shape else 1
    out = (mean + std * rng.normal_array(n)).astype(dtype)
    return Tensor(out.reshape(shape))
