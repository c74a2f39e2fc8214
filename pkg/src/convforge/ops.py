"""Differentiable layer primitives with explicit forward and backward passes.

Every forward returns ``(output, cache)``; the matching backward consumes the
cache exactly once and returns reverse-mode gradients of the forward contract.
Convolution runs as im2col + GEMM; the naive nested-loop reference it is
tested against lives with the tests, not here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, GeometryError, ShapeError, StateError
from .tensor import Rng, Tensor

EPS_LOG = 1e-12  # added inside log so confident wrong predictions stay finite


# -- parameter bundles --------------------------------------------------------


@dataclass
class ConvParams:
    """Convolution weights: kernel [F, C_in, kh, kw], bias [F], stride, symmetric zero padding."""

    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be [F, C, kh, kw], got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.kernel.shape[0]},)")
        if self.stride < 1:
            raise ArgumentError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ArgumentError(f"padding must be >= 0, got {self.padding}")


@dataclass(frozen=True)
class PoolSpec:
    window: tuple[int, int] = (2, 2)
    stride: int = 2

    def __post_init__(self):
        ph, pw = self.window
        if ph < 1 or pw < 1 or self.stride < 1:
            raise ArgumentError(f"pool window/stride must be >= 1, got {self.window}/{self.stride}")


def _out_extent(size: int, k: int, stride: int, padding: int, what: str) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise GeometryError(
            f"{what}: input {size} with window {k}, stride {stride}, padding {padding} "
            "does not divide into a whole number of output positions"
        )
    out = span // stride + 1
    if out < 1:
        raise GeometryError(f"{what}: output size {out} is not positive")
    return out


# -- caches -------------------------------------------------------------------


@dataclass
class _Cache:
    consumed: bool = field(default=False, init=False)

    def _consume(self):
        if self.consumed:
            raise StateError(f"{type(self).__name__} already consumed by a backward pass")
        self.consumed = True


@dataclass
class ConvCache(_Cache):
    cols: np.ndarray          # im2col matrix [C*kh*kw, H'*W'*N]
    x_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    params: ConvParams


@dataclass
class PoolCache(_Cache):
    argmax_flat: np.ndarray   # flat index into the input, per output element
    x_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    dtype: np.dtype


@dataclass
class ReluCache(_Cache):
    positive: np.ndarray      # bool mask, True where x > 0


@dataclass
class DenseCache(_Cache):
    x: np.ndarray
    weight: np.ndarray


@dataclass
class DropoutCache(_Cache):
    mask: np.ndarray | None   # None when the layer was a passthrough


# -- im2col geometry ----------------------------------------------------------

_GATHER_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _im2col_indices(shape, kh, kw, stride, padding):
    """Channel/row/col gather indices mapping a padded image onto its im2col matrix."""
    key = (shape, kh, kw, stride, padding)
    hit = _GATHER_CACHE.get(key)
    if hit is not None:
        return hit
    _, c, h, w = shape
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    i0 = np.tile(np.repeat(np.arange(kh), kw), c)
    i1 = stride * np.repeat(np.arange(out_h), out_w)
    j0 = np.tile(np.arange(kw), kh * c)
    j1 = stride * np.tile(np.arange(out_w), out_h)
    rows = i0.reshape(-1, 1) + i1.reshape(1, -1)
    cols = j0.reshape(-1, 1) + j1.reshape(1, -1)
    chans = np.repeat(np.arange(c), kh * kw).reshape(-1, 1)
    if len(_GATHER_CACHE) > 256:
        _GATHER_CACHE.clear()
    _GATHER_CACHE[key] = (chans, rows, cols)
    return chans, rows, cols


def _im2col(x: np.ndarray, kh, kw, stride, padding) -> np.ndarray:
    chans, rows, cols = _im2col_indices(x.shape, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    gathered = x[:, chans, rows, cols]                    # [N, C*kh*kw, L]
    return gathered.transpose(1, 2, 0).reshape(gathered.shape[1], -1)


def _col2im(dcols: np.ndarray, x_shape, kh, kw, stride, padding) -> np.ndarray:
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    chans, rows, cols = _im2col_indices(x_shape, kh, kw, stride, padding)
    # Flat index of each im2col cell inside one padded image plane set.
    plane = (chans * hp + rows) * wp + cols               # [C*kh*kw, L]
    l = plane.shape[1]
    per_image = c * hp * wp
    offsets = np.arange(n, dtype=np.int64) * per_image
    # dcols is [C*kh*kw, L*N] laid out L-major then N (matches _im2col).
    vals = dcols.reshape(-1, l, n)
    idx = plane[:, :, None] + offsets[None, None, :]
    flat = np.bincount(idx.reshape(-1), weights=vals.reshape(-1), minlength=n * per_image)
    out = flat.reshape(n, c, hp, wp)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


# -- convolution ---------------------------------------------------------------


def conv2d_forward(x: Tensor, p: ConvParams) -> tuple[Tensor, ConvCache]:
    if x.ndim != 4:
        raise ShapeError(f"conv input must be [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    f, c_in, kh, kw = p.kernel.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels but kernel expects {c_in}")
    out_h = _out_extent(h, kh, p.stride, p.padding, "conv2d height")
    out_w = _out_extent(w, kw, p.stride, p.padding, "conv2d width")

    cols = _im2col(x.array, kh, kw, p.stride, p.padding)
    w_mat = p.kernel.array.reshape(f, -1)
    out = w_mat @ cols + p.bias.array[:, None]            # [F, L*N]
    out = out.reshape(f, out_h, out_w, n).transpose(3, 0, 1, 2)
    cache = ConvCache(cols=cols, x_shape=x.shape, out_shape=(n, f, out_h, out_w), params=p)
    return Tensor(np.ascontiguousarray(out)), cache


def conv2d_backward(cache: ConvCache, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    if not isinstance(cache, ConvCache):
        raise StateError("conv2d_backward needs the ConvCache from conv2d_forward")
    if grad_out.shape != cache.out_shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {cache.out_shape}")
    cache._consume()
    p = cache.params
    f, _, kh, kw = p.kernel.shape
    g = grad_out.array
    dtype = g.dtype

    grad_bias = g.sum(axis=(0, 2, 3))
    g_flat = g.transpose(1, 2, 3, 0).reshape(f, -1)       # [F, L*N], same layout as forward
    grad_kernel = (g_flat @ cache.cols.T).reshape(p.kernel.shape)
    dcols = p.kernel.array.reshape(f, -1).T @ g_flat
    grad_x = _col2im(dcols, cache.x_shape, kh, kw, p.stride, p.padding).astype(dtype, copy=False)
    return Tensor(grad_x), Tensor(grad_kernel), Tensor(grad_bias)


# -- max pooling ----------------------------------------------------------------


def maxpool2d_forward(x: Tensor, spec: PoolSpec) -> tuple[Tensor, PoolCache]:
    if x.ndim != 4:
        raise ShapeError(f"pool input must be [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    ph, pw = spec.window
    out_h = _out_extent(h, ph, spec.stride, 0, "maxpool height")
    out_w = _out_extent(w, pw, spec.stride, 0, "maxpool width")

    a = x.array
    sn, sc, sh, sw = a.strides
    windows = np.lib.stride_tricks.as_strided(
        a,
        shape=(n, c, out_h, out_w, ph, pw),
        strides=(sn, sc, sh * spec.stride, sw * spec.stride, sh, sw),
        writeable=False,
    ).reshape(n, c, out_h, out_w, ph * pw)
    # np.argmax takes the first maximizer, which inside a window is exactly
    # row-major scan order -- the documented tie rule.
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    wi = arg // pw
    wj = arg % pw
    base_i = np.arange(out_h).reshape(1, 1, out_h, 1) * spec.stride
    base_j = np.arange(out_w).reshape(1, 1, 1, out_w) * spec.stride
    rows = base_i + wi
    cols = base_j + wj
    nn = np.arange(n).reshape(n, 1, 1, 1)
    cc = np.arange(c).reshape(1, c, 1, 1)
    flat = ((nn * c + cc) * h + rows) * w + cols
    cache = PoolCache(argmax_flat=flat.astype(np.int64), x_shape=x.shape,
                      out_shape=(n, c, out_h, out_w), dtype=a.dtype)
    return Tensor(np.ascontiguousarray(out)), cache


def maxpool2d_backward(cache: PoolCache, grad_out: Tensor) -> Tensor:
    if not isinstance(cache, PoolCache):
        raise StateError("maxpool2d_backward needs the PoolCache from maxpool2d_forward")
    if grad_out.shape != cache.out_shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {cache.out_shape}")
    cache._consume()
    size = int(np.prod(cache.x_shape))
    flat = np.bincount(cache.argmax_flat.reshape(-1),
                       weights=grad_out.array.reshape(-1).astype(np.float64),
                       minlength=size)
    return Tensor(flat.reshape(cache.x_shape).astype(cache.dtype, copy=False))


# -- relu -----------------------------------------------------------------------


def relu_forward(x: Tensor) -> tuple[Tensor, ReluCache]:
    positive = x.array > 0
    return Tensor(np.where(positive, x.array, 0)), ReluCache(positive=positive)


def relu_backward(cache: ReluCache, grad_out: Tensor) -> Tensor:
    if not isinstance(cache, ReluCache):
        raise StateError("relu_backward needs the ReluCache from relu_forward")
    if grad_out.shape != cache.positive.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward input {cache.positive.shape}")
    cache._consume()
    return Tensor(np.where(cache.positive, grad_out.array, 0))


# -- dense ----------------------------------------------------------------------


def dense_forward(x: Tensor, weight: Tensor, bias: Tensor) -> tuple[Tensor, DenseCache]:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"dense needs rank-2 input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[1]} != weight rows {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.array @ weight.array + bias.array
    return Tensor(out), DenseCache(x=x.array, weight=weight.array)


def dense_backward(cache: DenseCache, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    if not isinstance(cache, DenseCache):
        raise StateError("dense_backward needs the DenseCache from dense_forward")
    expected = (cache.x.shape[0], cache.weight.shape[1])
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    cache._consume()
    g = grad_out.array
    return (
        Tensor(g @ cache.weight.T),
        Tensor(cache.x.T @ g),
        Tensor(g.sum(axis=0)),
    )


# -- softmax / cross-entropy ------------------------------------------------------


def softmax(z: Tensor) -> Tensor:
    if z.ndim != 2 or z.shape[1] < 2:
        raise ShapeError(f"softmax needs [N, c] logits with c >= 2, got {z.shape}")
    a = z.array
    if not np.all(np.isfinite(a)):
        raise ArgumentError("softmax logits must be finite")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return Tensor(e / e.sum(axis=1, keepdims=True))


def _check_onehot(y: Tensor) -> None:
    a = y.array
    if y.ndim != 2:
        raise ShapeError(f"labels must be [N, c] one-hot rows, got {y.shape}")
    ones = a == 1
    if not (np.all((a == 0) | ones) and np.all(ones.sum(axis=1) == 1)):
        raise ArgumentError("label rows must be exact one-hot vectors")


def cross_entropy_loss(p: Tensor, y_onehot: Tensor) -> float:
    """Mean over the batch of -sum_i y_i * log(p_i + EPS_LOG)."""
    _check_onehot(y_onehot)
    if p.shape != y_onehot.shape:
        raise ShapeError(f"probabilities {p.shape} vs labels {y_onehot.shape}")
    per_sample = -(y_onehot.array * np.log(p.array + EPS_LOG)).sum(axis=1)
    return float(per_sample.mean())


def softmax_xent_backward(z: Tensor, y_onehot: Tensor) -> Tensor:
    """Gradient of mean cross-entropy composed with softmax: (softmax(z) - y) / N."""
    _check_onehot(y_onehot)
    if z.shape != y_onehot.shape:
        raise ShapeError(f"logits {z.shape} vs labels {y_onehot.shape}")
    p = softmax(z)
    return Tensor((p.array - y_onehot.array) / z.shape[0])


# -- dropout ----------------------------------------------------------------------


def dropout_forward(x: Tensor, rate: float, rng: Rng | None, training: bool) -> tuple[Tensor, DropoutCache]:
    """Inverted dropout: survivors scaled by 1/(1-rate) so eval needs no rescaling."""
    if not (0.0 <= rate < 1.0):
        raise ArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return Tensor(x.array.copy()), DropoutCache(mask=None)
    if rng is None:
        raise ArgumentError("dropout in training mode needs an rng")
    keep = rng.uniform_array(x.size).reshape(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return Tensor(x.array * mask), DropoutCache(mask=mask)


def dropout_backward(cache: DropoutCache, grad_out: Tensor) -> Tensor:
    if not isinstance(cache, DropoutCache):
        raise StateError("dropout_backward needs the DropoutCache from dropout_forward")
    cache._consume()
    if cache.mask is None:
        return Tensor(grad_out.array.copy())
    if grad_out.shape != cache.mask.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != mask shape {cache.mask.shape}")
    return Tensor(grad_out.array * cache.mask)
