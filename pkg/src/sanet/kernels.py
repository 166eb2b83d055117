"""Numerical kernels: convolution, pooling, batch norm, activations, resize.

Each fast kernel has a ``*_reference`` twin written as plain loops with
float64 accumulation. The references are the oracles for the test suite and
the ``selftest`` command; they are slow on purpose and should not be touched
for speed.
"""

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from .tensor import ShapeError, check_tensor4

Pair = Tuple[int, int]


def _pair(v) -> Pair:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


# --------------------------------------------------------------------------
# threading

_single_thread_limit = None


def set_single_thread(enabled: bool):
    """Pin BLAS to one thread (bit-reproducible runs) or release the pin.

    Returns the previous setting so callers can restore it.
    """
    global _single_thread_limit
    prev = _single_thread_limit is not None
    if enabled and _single_thread_limit is None:
        _single_thread_limit = threadpool_limits(limits=1)
    elif not enabled and _single_thread_limit is not None:
        _single_thread_limit.restore_original_limits()
        _single_thread_limit = None
    return prev


@contextmanager
def single_thread():
    with threadpool_limits(limits=1):
        yield


# --------------------------------------------------------------------------
# parameter records


@dataclass(frozen=True)
class ConvParams:
    weight: np.ndarray  # out_c x in_c x kh x kw
    bias: Optional[np.ndarray] = None
    stride: Pair = (1, 1)
    padding: Pair = (0, 0)
    dilation: Pair = (1, 1)

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 4 or min(w.shape) < 1:
            raise ShapeError(f"conv weight must be out_c x in_c x kh x kw, got {w.shape}")
        for attr in ("stride", "padding", "dilation"):
            object.__setattr__(self, attr, _pair(getattr(self, attr)))
        if min(self.stride) < 1 or min(self.dilation) < 1 or min(self.padding) < 0:
            raise ValueError(f"bad conv geometry stride={self.stride} padding={self.padding} dilation={self.dilation}")
        if self.bias is not None and np.shape(self.bias) != (w.shape[0],):
            raise ShapeError(f"conv bias must have length {w.shape[0]}, got {np.shape(self.bias)}")

    @property
    def out_c(self):
        return self.weight.shape[0]

    @property
    def in_c(self):
        return self.weight.shape[1]

    @property
    def kernel(self):
        return self.weight.shape[2], self.weight.shape[3]

    def out_hw(self, h, w):
        kh, kw = self.kernel
        return (conv_out_size(h, kh, self.stride[0], self.padding[0], self.dilation[0]),
                conv_out_size(w, kw, self.stride[1], self.padding[1], self.dilation[1]))


@dataclass(frozen=True)
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = np.shape(self.gamma)
        if len(c) != 1 or any(np.shape(v) != c for v in (self.beta, self.mean, self.var)):
            raise ShapeError("batch-norm vectors must share one length")
        if (np.asarray(self.var) < 0).any():
            raise ValueError("running variance must be non-negative")

    @property
    def channels(self):
        return len(self.gamma)

    def scale_shift(self):
        """Per-channel (scale, shift) with bn(x) == scale * x + shift, in float64."""
        scale = np.asarray(self.gamma, np.float64) / np.sqrt(np.asarray(self.var, np.float64) + self.eps)
        shift = np.asarray(self.beta, np.float64) - np.asarray(self.mean, np.float64) * scale
        return scale, shift


def conv_out_size(n, k, s=1, p=0, d=1):
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


# --------------------------------------------------------------------------
# convolution


def _check_conv(x, p):
    x = check_tensor4(x)
    if x.shape[1] != p.in_c:
        raise ShapeError(f"conv expects {p.in_c} input channels, got {x.shape[1]} (input shape {x.shape})")
    oh, ow = p.out_hw(x.shape[2], x.shape[3])
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv on {x.shape[2]}x{x.shape[3]} with kernel {p.kernel}, stride {p.stride}, "
                         f"padding {p.padding}, dilation {p.dilation} yields empty output")
    return x, oh, ow


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _tap_slices(ky, kx, oh, ow, p):
    y0 = ky * p.dilation[0]
    x0 = kx * p.dilation[1]
    return (slice(y0, y0 + p.stride[0] * (oh - 1) + 1, p.stride[0]),
            slice(x0, x0 + p.stride[1] * (ow - 1) + 1, p.stride[1]))


class _Workspace(threading.local):
    """Grow-only scratch buffers, one set per thread.

    Reusing the patch and padding buffers avoids re-faulting fresh pages for
    every convolution, which is most of the latency jitter on large inputs.
    """

    def __init__(self):
        self.buffers = {}

    def get(self, key, shape, dtype):
        size = int(np.prod(shape))
        buf = self.buffers.get((key, np.dtype(dtype)))
        if buf is None or buf.size < size:
            buf = np.empty(size, dtype)
            self.buffers[(key, np.dtype(dtype))] = buf
        return buf[:size].reshape(shape)


_workspace = _Workspace()


def _padded(x_i, ph, pw):
    """Zero-padded copy of one C x H x W image in the workspace."""
    c, h, w = x_i.shape
    buf = _workspace.get("pad", (c, h + 2 * ph, w + 2 * pw), x_i.dtype)
    buf[:, ph:ph + h, pw:pw + w] = x_i
    if ph:
        buf[:, :ph] = 0
        buf[:, ph + h:] = 0
    if pw:
        buf[:, :, :pw] = 0
        buf[:, :, pw + w:] = 0
    return buf


def conv2d(x, p: ConvParams):
    """Cross-correlation with zero padding, via patch gathering + one GEMM."""
    x, oh, ow = _check_conv(x, p)
    n, c, h, w = x.shape
    kh, kw = p.kernel
    wmat = p.weight.reshape(p.out_c, -1).astype(x.dtype, copy=False)
    out = np.empty((n, p.out_c, oh * ow), dtype=x.dtype)
    pointwise = kh == kw == 1 and p.stride == (1, 1) and p.padding == (0, 0)
    for i in range(n):
        if pointwise:
            patches = x[i].reshape(c, h * w)
        else:
            xp = _padded(x[i], *p.padding)
            cols = _workspace.get("cols", (c, kh, kw, oh, ow), x.dtype)
            for ky in range(kh):
                for kx in range(kw):
                    sy, sx = _tap_slices(ky, kx, oh, ow, p)
                    cols[:, ky, kx] = xp[:, sy, sx]
            patches = cols.reshape(c * kh * kw, oh * ow)
        np.matmul(wmat, patches, out=out[i])
    if p.bias is not None:
        out += p.bias.astype(x.dtype, copy=False)[:, None]
    return out.reshape(n, p.out_c, oh, ow)


def conv2d_reference(x, p: ConvParams):
    """Direct summation, one output element at a time, accumulated in float64."""
    x, oh, ow = _check_conv(x, p)
    n, c, h, w = x.shape
    kh, kw = p.kernel
    wt = np.asarray(p.weight, np.float64)
    xd = np.asarray(x, np.float64)
    out = np.zeros((n, p.out_c, oh, ow), np.float64)
    for b in range(n):
        for o in range(p.out_c):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if p.bias is None else float(p.bias[o])
                    for ci in range(c):
                        for ky in range(kh):
                            yy = i * p.stride[0] - p.padding[0] + ky * p.dilation[0]
                            if yy < 0 or yy >= h:
                                continue
                            for kx in range(kw):
                                xx = j * p.stride[1] - p.padding[1] + kx * p.dilation[1]
                                if 0 <= xx < w:
                                    acc += wt[o, ci, ky, kx] * xd[b, ci, yy, xx]
                    out[b, o, i, j] = acc
    return out.astype(x.dtype)


def conv2d_input_grad(grad_out, p: ConvParams, in_hw):
    """Gradient of ``sum(grad_out * conv2d(x, p))`` with respect to ``x``.

    This is the transposed correlation: every output gradient is scattered
    back through the same taps that produced it.
    """
    grad_out = check_tensor4(grad_out, "grad_out")
    h, w = in_hw
    oh, ow = p.out_hw(h, w)
    n = grad_out.shape[0]
    if grad_out.shape[1:] != (p.out_c, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match conv output (n, {p.out_c}, {oh}, {ow})")
    kh, kw = p.kernel
    ph, pw = p.padding
    dtype = grad_out.dtype
    g = grad_out.reshape(n, p.out_c, oh * ow)
    dxp = np.zeros((n, p.in_c, h + 2 * ph, w + 2 * pw), dtype)
    wt = p.weight.astype(dtype, copy=False)
    for ky in range(kh):
        for kx in range(kw):
            sy, sx = _tap_slices(ky, kx, oh, ow, p)
            tap = np.matmul(wt[:, :, ky, kx].T, g).reshape(n, p.in_c, oh, ow)
            dxp[:, :, sy, sx] += tap
    return dxp[:, :, ph:ph + h, pw:pw + w]


def conv2d_weight_grad(x, grad_out, p: ConvParams):
    """Gradients of ``sum(grad_out * conv2d(x, p))`` w.r.t. weight and bias."""
    x, oh, ow = _check_conv(x, p)
    n = x.shape[0]
    kh, kw = p.kernel
    dtype = grad_out.dtype
    xp = _pad(x.astype(dtype, copy=False), *p.padding)
    g = grad_out.reshape(n, p.out_c, oh * ow)
    gw = np.zeros(p.weight.shape, dtype)
    for ky in range(kh):
        for kx in range(kw):
            sy, sx = _tap_slices(ky, kx, oh, ow, p)
            patch = xp[:, :, sy, sx].reshape(n, p.in_c, oh * ow)
            gw[:, :, ky, kx] = np.einsum("nop,nip->oi", g, patch)
    return gw, g.sum(axis=(0, 2))


# --------------------------------------------------------------------------
# pooling


def _pool_geometry(x, kernel, stride, padding):
    kernel, stride, padding = _pair(kernel), _pair(stride), _pair(padding)
    if min(kernel) < 1 or min(stride) < 1 or min(padding) < 0:
        raise ValueError(f"bad pooling geometry kernel={kernel} stride={stride} padding={padding}")
    oh = conv_out_size(x.shape[2], kernel[0], stride[0], padding[0])
    ow = conv_out_size(x.shape[3], kernel[1], stride[1], padding[1])
    if oh < 1 or ow < 1:
        raise ShapeError(f"pooling {x.shape} with kernel {kernel} stride {stride} padding {padding} yields empty output")
    return kernel, stride, padding, oh, ow


def avg_pool2d(x, kernel, stride=None, padding=0, count_includes_pad=False):
    x = check_tensor4(x)
    stride = kernel if stride is None else stride
    (kh, kw), (sh, sw), (ph, pw), oh, ow = _pool_geometry(x, kernel, stride, padding)
    xp = _pad(x, ph, pw)
    acc = np.zeros(x.shape[:2] + (oh, ow), np.float64)
    for ky in range(kh):
        for kx in range(kw):
            acc += xp[:, :, ky:ky + sh * (oh - 1) + 1:sh, kx:kx + sw * (ow - 1) + 1:sw]
    if count_includes_pad:
        acc /= kh * kw
    else:
        # in-bounds element count factorises per axis
        def counts(n, k, s, p, o):
            start = np.arange(o) * s - p
            return np.minimum(start + k, n) - np.maximum(start, 0)
        acc /= np.outer(counts(x.shape[2], kh, sh, ph, oh), counts(x.shape[3], kw, sw, pw, ow))
    return acc.astype(x.dtype)


def avg_pool2d_reference(x, kernel, stride=None, padding=0, count_includes_pad=False):
    x = check_tensor4(x)
    stride = kernel if stride is None else stride
    (kh, kw), (sh, sw), (ph, pw), oh, ow = _pool_geometry(x, kernel, stride, padding)
    n, c, h, w = x.shape
    out = np.zeros((n, c, oh, ow), np.float64)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    total, count = 0.0, 0
                    for ky in range(kh):
                        for kx in range(kw):
                            yy, xx = i * sh - ph + ky, j * sw - pw + kx
                            if 0 <= yy < h and 0 <= xx < w:
                                total += float(x[b, ch, yy, xx])
                                count += 1
                    out[b, ch, i, j] = total / (kh * kw if count_includes_pad else count)
    return out.astype(x.dtype)


def adaptive_bins(n, out):
    """Bin edges [floor(i*n/out), ceil((i+1)*n/out)) for i in range(out)."""
    starts = [(i * n) // out for i in range(out)]
    ends = [-((-(i + 1) * n) // out) for i in range(out)]
    return starts, ends


def _check_adaptive(x, out_hw):
    x = check_tensor4(x)
    oh, ow = _pair(out_hw)
    h, w = x.shape[2:]
    if not (1 <= oh <= h and 1 <= ow <= w):
        raise ShapeError(f"adaptive pooling target {(oh, ow)} must lie within 1..{(h, w)}")
    return x, oh, ow


def adaptive_avg_pool2d(x, out_hw):
    x, oh, ow = _check_adaptive(x, out_hw)
    n, c, h, w = x.shape
    integral = np.zeros((n, c, h + 1, w + 1), np.float64)
    integral[:, :, 1:, 1:] = x.astype(np.float64).cumsum(axis=2).cumsum(axis=3)
    ys, ye = map(np.asarray, adaptive_bins(h, oh))
    xs, xe = map(np.asarray, adaptive_bins(w, ow))
    sums = (integral[:, :, ye[:, None], xe[None, :]] - integral[:, :, ys[:, None], xe[None, :]]
            - integral[:, :, ye[:, None], xs[None, :]] + integral[:, :, ys[:, None], xs[None, :]])
    area = np.outer(ye - ys, xe - xs)
    return (sums / area).astype(x.dtype)


def adaptive_avg_pool2d_reference(x, out_hw):
    x, oh, ow = _check_adaptive(x, out_hw)
    n, c, h, w = x.shape
    ys, ye = adaptive_bins(h, oh)
    xs, xe = adaptive_bins(w, ow)
    out = np.zeros((n, c, oh, ow), np.float64)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    vals = [float(x[b, ch, yy, xx]) for yy in range(ys[i], ye[i]) for xx in range(xs[j], xe[j])]
                    out[b, ch, i, j] = sum(vals) / len(vals)
    return out.astype(x.dtype)


# --------------------------------------------------------------------------
# normalisation and activations


def batch_norm_infer(x, bn: BnParams):
    x = check_tensor4(x)
    if x.shape[1] != bn.channels:
        raise ShapeError(f"batch norm has {bn.channels} channels, input has {x.shape[1]}")
    scale, shift = bn.scale_shift()
    out = x * scale.astype(x.dtype)[:, None, None]
    out += shift.astype(x.dtype)[:, None, None]
    return out


def batch_norm_reference(x, bn: BnParams):
    x = check_tensor4(x)
    xd = x.astype(np.float64)
    g, b, m, v = (np.asarray(a, np.float64)[:, None, None] for a in (bn.gamma, bn.beta, bn.mean, bn.var))
    return (g * (xd - m) / np.sqrt(v + bn.eps) + b).astype(x.dtype)


def fold_bn_into_conv(p: ConvParams, bn: BnParams) -> ConvParams:
    if bn.channels != p.out_c:
        raise ShapeError(f"batch norm has {bn.channels} channels, conv produces {p.out_c}")
    scale, shift = bn.scale_shift()
    dtype = p.weight.dtype
    weight = (p.weight.astype(np.float64) * scale[:, None, None, None]).astype(dtype)
    bias = np.zeros(p.out_c) if p.bias is None else np.asarray(p.bias, np.float64)
    bias = (bias * scale + shift).astype(dtype)
    return ConvParams(weight, bias, p.stride, p.padding, p.dilation)


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(kind, x):
    x = check_tensor4(x)
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# resize


def _resize_axis(n_in, n_out):
    """Source indices and weights for half-pixel bilinear sampling on one axis."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def interp_matrix(n_in, n_out, dtype=np.float64):
    """(n_in, n_out) matrix M with ``v @ M`` the resampled vector ``v``."""
    lo, hi, t = _resize_axis(n_in, n_out)
    m = np.zeros((n_in, n_out), np.float64)
    cols = np.arange(n_out)
    np.add.at(m, (lo, cols), 1 - t)
    np.add.at(m, (hi, cols), t)
    return m.astype(dtype)


def bilinear_resize(x, out_hw):
    """Bilinear resize with half-pixel centres (``align_corners=False``).

    Separable: one small GEMM per axis against an interpolation matrix with
    at most two nonzeros per column.
    """
    x = check_tensor4(x)
    oh, ow = _pair(out_hw)
    if oh < 1 or ow < 1:
        raise ShapeError(f"resize target must be positive, got {(oh, ow)}")
    n, c, h, w = x.shape
    if (oh, ow) == (h, w):
        return x.copy()
    if oh != h:
        x = np.matmul(interp_matrix(h, oh, x.dtype).T, x)
    if ow != w:
        x = np.matmul(x.reshape(-1, w), interp_matrix(w, ow, x.dtype)).reshape(n, c, oh, ow)
    return x


def bilinear_resize_reference(x, out_hw):
    x = check_tensor4(x)
    oh, ow = _pair(out_hw)
    n, c, h, w = x.shape
    if (oh, ow) == (h, w):
        return x.copy()
    out = np.zeros((n, c, oh, ow), np.float64)
    for i in range(oh):
        sy = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        ty = sy - y0
        for j in range(ow):
            sx = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            tx = sx - x0
            out[:, :, i, j] = ((1 - ty) * (1 - tx) * x[:, :, y0, x0] + (1 - ty) * tx * x[:, :, y0, x1]
                               + ty * (1 - tx) * x[:, :, y1, x0] + ty * tx * x[:, :, y1, x1])
    return out.astype(x.dtype)
