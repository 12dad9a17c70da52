"""Forward kernels on dense NCHW arrays.

Tensors are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)``.
Every kernel returns a fresh array of the input dtype; inputs are never
modified.

Convolutions accumulate in float64 and round once to the output dtype.
Products of two float32 values are exact in float64, so two convolutions
that differ only by channels holding exact zeros round to the same float32
result. The pruning equivalence check depends on this.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Upper bound on im2col elements materialized at once (float64).
_COLS_LIMIT = 1 << 23


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (1, 1)
    in_channels: int | None = None
    out_channels: int | None = None

    def __post_init__(self):
        if min(self.kernel) < 1:
            raise ValueError(f"kernel must be >= 1, got {self.kernel}")
        if min(self.stride) < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if min(self.padding) < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        span_h, span_w = h + 2 * ph - kh, w + 2 * pw - kw
        if span_h < 0 or span_w < 0 or span_h % sh or span_w % sw:
            raise ShapeError(
                f"input {h}x{w} does not tile exactly with kernel {self.kernel}, "
                f"stride {self.stride}, padding {self.padding}"
            )
        return span_h // sh + 1, span_w // sw + 1


def check4d(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-D (n, c, h, w) array, got shape {x.shape}")
    return x


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def im2col(x: np.ndarray, kernel, stride, padding, rows: slice | None = None) -> np.ndarray:
    """Unfold ``x`` into a float64 matrix of shape ``(n*oh*ow, c*kh*kw)``.

    Column order is (c, kh, kw) row-major, matching ``w.reshape(oc, -1)``.
    ``rows`` restricts the unfolding to a band of output rows.
    """
    (kh, kw), (sh, sw), (ph, pw) = _pair(kernel), _pair(stride), _pair(padding)
    xp = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    if rows is not None:
        win = win[:, :, rows]
    n, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def conv2d(x, w, b=None, spec: ConvSpec | None = None, *, stride=1, padding=0,
           layer: str = "conv2d") -> np.ndarray:
    """Cross-correlation with zero padding.

    ``w`` has shape ``(oc, ic, kh, kw)``; ``b`` has length ``oc`` or is None.
    Stride and padding come from ``spec`` when given.
    """
    x = check4d(x, layer)
    w = np.asarray(w)
    if w.ndim != 4:
        raise ShapeError(f"{layer}: weight must be 4-D (oc, ic, kh, kw), got {w.shape}")
    oc, ic, kh, kw = w.shape
    if spec is None:
        spec = ConvSpec(kernel=(kh, kw), stride=_pair(stride), padding=_pair(padding))
    elif spec.kernel != (kh, kw):
        raise ShapeError(f"{layer}: spec kernel {spec.kernel} != weight kernel {(kh, kw)}")
    if x.shape[1] != ic:
        raise ShapeError(
            f"{layer}: input has {x.shape[1]} channels but weight {w.shape} expects {ic} "
            f"(input shape {x.shape})"
        )
    if b is not None and np.shape(b) != (oc,):
        raise ShapeError(f"{layer}: bias shape {np.shape(b)} does not match {oc} filters")
    n = x.shape[0]
    oh, ow = spec.output_hw(x.shape[2], x.shape[3])

    wmat = w.reshape(oc, -1).astype(np.float64).T
    out = np.empty((n, oh, ow, oc), dtype=np.float64)
    band = max(1, _COLS_LIMIT // max(1, n * ow * ic * kh * kw))
    for r0 in range(0, oh, band):
        r1 = min(oh, r0 + band)
        cols = im2col(x, (kh, kw), spec.stride, spec.padding, rows=slice(r0, r1))
        out[:, r0:r1] = (cols @ wmat).reshape(n, r1 - r0, ow, oc)
    if b is not None:
        out += np.asarray(b, dtype=np.float64)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)).astype(x.dtype, copy=False)


def conv_transpose2d(x, w, b=None, *, layer: str = "upconv") -> np.ndarray:
    """Stride-2 transposed convolution with a 2x2 kernel of shape ``(ic, oc, 2, 2)``.

    Each input pixel scatters into a disjoint 2x2 output block, so output
    dimensions are exactly doubled.
    """
    x = check4d(x, layer)
    w = np.asarray(w)
    if w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ShapeError(f"{layer}: weight must be (ic, oc, 2, 2), got {w.shape}")
    ic, oc = w.shape[:2]
    if x.shape[1] != ic:
        raise ShapeError(f"{layer}: input has {x.shape[1]} channels, weight {w.shape} expects {ic}")
    if b is not None and np.shape(b) != (oc,):
        raise ShapeError(f"{layer}: bias shape {np.shape(b)} does not match {oc} filters")
    n, _, h, wd = x.shape
    xm = x.transpose(0, 2, 3, 1).reshape(-1, ic).astype(np.float64)
    y = (xm @ w.reshape(ic, oc * 4).astype(np.float64)).reshape(n, h, wd, oc, 2, 2)
    if b is not None:
        y += np.asarray(b, dtype=np.float64)[:, None, None]
    y = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, oc, 2 * h, 2 * wd)
    return np.ascontiguousarray(y).astype(x.dtype, copy=False)


def batchnorm_infer(x, gamma, beta, mean, var, eps: float = 1e-5, *, layer: str = "bn") -> np.ndarray:
    x = check4d(x, layer)
    c = x.shape[1]
    for pname, p in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if np.shape(p) != (c,):
            raise ShapeError(f"{layer}: {pname} has shape {np.shape(p)}, input has {c} channels")
    if np.any(np.asarray(var) < 0):
        raise ValueError(f"{layer}: negative running variance")

    def col(p):
        return np.asarray(p, dtype=np.float64)[None, :, None, None]

    y = col(gamma) * (x - col(mean)) / np.sqrt(col(var) + eps) + col(beta)
    return y.astype(x.dtype, copy=False)


def relu(x) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def maxpool2d(x, window: int = 2, stride: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pooling.

    Returns the pooled values and, for each of them, the flat index
    ``row * w + col`` of the maximum inside its ``(h, w)`` input plane.
    Ties resolve to the first element in raster order of the window.
    """
    x = check4d(x, "maxpool")
    if window != 2 or stride != 2:
        raise NotImplementedError("only 2x2/stride-2 pooling is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool: spatial dims must be even, got {h}x{w}")
    oh, ow = h // 2, w // 2
    blocks = x.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    arg = blocks.argmax(axis=-1)
    vals = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(oh)[:, None] + arg // 2
    cols = 2 * np.arange(ow)[None, :] + arg % 2
    return np.ascontiguousarray(vals), (rows * w + cols).astype(np.int64)


def concat_channels(a, b) -> np.ndarray:
    a, b = check4d(a, "concat"), check4d(b, "concat")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def softmax_channels(x) -> np.ndarray:
    x = check4d(x, "softmax")
    z = x.astype(np.float64) - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype, copy=False)
