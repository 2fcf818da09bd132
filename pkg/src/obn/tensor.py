"""Dense tensor helpers and the convolution-as-matmul kernels.

Tensors are plain row-major ``numpy.ndarray`` objects of dtype float32
(training) or float64 (gradient checks and oracles).
"""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError

Tensor = np.ndarray
DTYPES = (np.float32, np.float64)


def as_tensor(x, dtype=np.float32):
    """Copy ``x`` into a contiguous array of a supported dtype, validating extents."""
    dtype = np.dtype(dtype)
    if dtype.type not in DTYPES:
        raise TypeError(f"unsupported dtype {dtype}")
    out = np.ascontiguousarray(x, dtype=dtype)
    if out.ndim == 0 or min(out.shape) < 1:
        raise DimensionError(f"all extents must be >= 1, got shape {out.shape}")
    return out


def matmul(a, b, ordered=False):
    """Matrix product ``a @ b``.

    The default path calls BLAS, which is deterministic for a fixed thread
    count but may fuse multiply-adds. With ``ordered=True`` every output cell
    is accumulated strictly left to right over the inner index, without fused
    operations, so the result equals a naive triple loop bit for bit.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if not ordered:
        return a @ b
    out = a[:, :1] * b[:1, :]
    for p in range(1, a.shape[1]):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


@dataclass(frozen=True)
class ConvGeometry:
    """Shape bookkeeping shared by im2col and its adjoint."""

    channels: int
    height: int
    width: int
    k: int
    stride: int = 1
    pad: int = 0
    batch: int = 0  # 0 means a single un-batched image

    def __post_init__(self):
        if self.k < 1 or self.stride < 1 or self.pad < 0:
            raise ConfigError(f"bad kernel geometry k={self.k} stride={self.stride} pad={self.pad}")
        for extent in (self.height, self.width):
            span = extent + 2 * self.pad - self.k
            if span < 0 or span % self.stride:
                raise ConfigError(
                    f"output extent ({extent}+2*{self.pad}-{self.k})/{self.stride}+1 is not integral"
                )

    @property
    def out_h(self):
        return (self.height + 2 * self.pad - self.k) // self.stride + 1

    @property
    def out_w(self):
        return (self.width + 2 * self.pad - self.k) // self.stride + 1

    @property
    def cols_shape(self):
        n = max(self.batch, 1)
        return (self.k * self.k * self.channels, n * self.out_h * self.out_w)

    @property
    def input_shape(self):
        base = (self.channels, self.height, self.width)
        return (self.batch,) + base if self.batch else base

    @classmethod
    def of(cls, x, k, stride=1, pad=0):
        if x.ndim == 3:
            return cls(*x.shape, k=k, stride=stride, pad=pad)
        if x.ndim == 4:
            n, c, h, w = x.shape
            return cls(c, h, w, k=k, stride=stride, pad=pad, batch=n)
        raise DimensionError(f"im2col expects S x H x W or N x S x H x W, got {x.shape}")


def im2col(x, k, stride=1, pad=0):
    """Unfold receptive fields into columns.

    For an ``S x H x W`` input the result is ``(k*k*S) x (H'*W')``. Row
    ``c*k*k + i*k + j`` holds channel ``c`` at window offset ``(i, j)``;
    column ``y*W' + x`` is output position ``(y, x)``. A batched
    ``N x S x H x W`` input gives ``(k*k*S) x (N*H'*W')`` with the batch
    index outermost in the columns.
    """
    geom = ConvGeometry.of(x, k, stride, pad)
    xb = x if x.ndim == 4 else x[None]
    if k == 1 and pad == 0:
        sub = xb[:, :, ::stride, ::stride]
        return np.ascontiguousarray(sub.transpose(1, 0, 2, 3)).reshape(geom.cols_shape)
    if pad:
        xb = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xb, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: N, S, H', W', k, k  ->  S, k, k, N, H', W'
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3))
    return cols.reshape(geom.cols_shape)


def col2im(cols, geom):
    """Adjoint of :func:`im2col`: scatter columns back, summing overlaps."""
    if cols.shape != geom.cols_shape:
        raise DimensionError(f"columns {cols.shape} do not match geometry {geom.cols_shape}")
    n = max(geom.batch, 1)
    k, s, p = geom.k, geom.stride, geom.pad
    oh, ow = geom.out_h, geom.out_w
    c6 = cols.reshape(geom.channels, k, k, n, oh, ow)
    if k == 1 and p == 0:
        out = np.zeros((n, geom.channels, geom.height, geom.width), dtype=cols.dtype)
        out[:, :, ::s, ::s] = c6[:, 0, 0].transpose(1, 0, 2, 3)
    else:
        hp, wp = geom.height + 2 * p, geom.width + 2 * p
        padded = np.zeros((n, geom.channels, hp, wp), dtype=cols.dtype)
        for i in range(k):
            for j in range(k):
                padded[:, :, i : i + s * oh : s, j : j + s * ow : s] += c6[:, i, j].transpose(1, 0, 2, 3)
        out = padded[:, :, p : p + geom.height, p : p + geom.width]
    out = np.ascontiguousarray(out)
    return out if geom.batch else out[0]
