"""Simple Attention Decoder.

Two asymmetric convolutions over ``dp1 + dp2`` produce horizontal and
vertical sigmoid maps ``A1`` and ``A2``; their sum ``A`` (so ``0 < A < 2``)
gates the fusion ``x * (1 + A) + y * (2 - A)``, and a 1x1 convolution maps the
fused tensor to the output.

``sad_backward`` differentiates that graph by hand. It exists to be checked
against finite differences, not to train anything.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels as K
from .tensor import ShapeError, check_tensor4


@dataclass(frozen=True)
class SadWeights:
    w_1x3: K.ConvParams
    w_3x1: K.ConvParams
    w_out: K.ConvParams

    def __post_init__(self):
        if self.w_1x3.kernel != (1, 3) or self.w_1x3.padding != (0, 1):
            raise ShapeError("w_1x3 must be a 1x3 kernel padded (0, 1)")
        if self.w_3x1.kernel != (3, 1) or self.w_3x1.padding != (1, 0):
            raise ShapeError("w_3x1 must be a 3x1 kernel padded (1, 0)")
        if self.w_out.kernel != (1, 1):
            raise ShapeError("w_out must be a 1x1 kernel")
        c = self.w_1x3.in_c
        if not (self.w_1x3.out_c == self.w_3x1.in_c == self.w_3x1.out_c == self.w_out.in_c == c):
            raise ShapeError("attention convs and the output conv must share one channel count")

    @classmethod
    def random(cls, channels, out_c=None, rng=None, scale=0.3, dtype=np.float64):
        rng = np.random.default_rng(rng)
        out_c = channels if out_c is None else out_c

        def conv(shape, pad):
            return K.ConvParams(rng.normal(0, scale, shape).astype(dtype),
                                rng.normal(0, scale, shape[0]).astype(dtype), padding=pad)

        return cls(conv((channels, channels, 1, 3), (0, 1)),
                   conv((channels, channels, 3, 1), (1, 0)),
                   conv((out_c, channels, 1, 1), (0, 0)))

    def params(self):
        """Weights as a flat name -> array mapping (shared with the gradients)."""
        return {"w_1x3.w": self.w_1x3.weight, "w_1x3.b": self.w_1x3.bias,
                "w_3x1.w": self.w_3x1.weight, "w_3x1.b": self.w_3x1.bias,
                "w_out.w": self.w_out.weight, "w_out.b": self.w_out.bias}

    @classmethod
    def from_params(cls, p):
        return cls(K.ConvParams(p["w_1x3.w"], p["w_1x3.b"], padding=(0, 1)),
                   K.ConvParams(p["w_3x1.w"], p["w_3x1.b"], padding=(1, 0)),
                   K.ConvParams(p["w_out.w"], p["w_out.b"]))


class Attention(NamedTuple):
    src: np.ndarray  # attention input (dp1 + dp2 in SAD)
    a1: np.ndarray
    a2: np.ndarray

    @property
    def a(self):
        return self.a1 + self.a2


def dual_attention(src, w_1x3, w_3x1):
    """Horizontal (1x3) and vertical (3x1) sigmoid attention maps over ``src``."""
    return Attention(src, K.sigmoid(K.conv2d(src, w_1x3)), K.sigmoid(K.conv2d(src, w_3x1)))


def gated_fusion(x, y, a):
    # x * (1 + A) + y * (1 + (1 - A))
    return x * (1 + a) + y * (2 - a)


class SadCache(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    att: Attention
    fused: np.ndarray


def sad_forward(x, dp1, dp2, y_up, w: SadWeights):
    shapes = {name: check_tensor4(t, name).shape for name, t in
              (("x", x), ("dp1", dp1), ("dp2", dp2), ("y_up", y_up))}
    if len(set(shapes.values())) != 1:
        raise ShapeError(f"SAD inputs must share dims, got {shapes}")
    if x.shape[1] != w.w_1x3.in_c:
        raise ShapeError(f"SAD weights expect {w.w_1x3.in_c} channels, inputs have {x.shape[1]}")
    att = dual_attention(dp1 + dp2, w.w_1x3, w.w_3x1)
    fused = gated_fusion(x, y_up, att.a)
    return K.conv2d(fused, w.w_out), SadCache(x, y_up, att, fused)


class SadGrads(NamedTuple):
    x: np.ndarray
    dp1: np.ndarray
    dp2: np.ndarray
    y_up: np.ndarray
    weights: dict  # keyed like SadWeights.params()


def sad_backward(cache: SadCache, grad_out, w: SadWeights):
    """Exact gradients of ``sum(grad_out * sad_forward(...)[0])``, in float64."""
    grad_out = check_tensor4(grad_out, "grad_out")
    n, _, h, wd = cache.x.shape
    if grad_out.shape != (n, w.w_out.out_c, h, wd):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match SAD output {(n, w.w_out.out_c, h, wd)}")
    f64 = lambda t: np.asarray(t, np.float64)
    g = f64(grad_out)
    x, y, fused = f64(cache.x), f64(cache.y), f64(cache.fused)
    src, a1, a2 = f64(cache.att.src), f64(cache.att.a1), f64(cache.att.a2)
    a = a1 + a2

    gw_out, gb_out = K.conv2d_weight_grad(fused, g, w.w_out)
    g_fused = K.conv2d_input_grad(g, w.w_out, (h, wd))
    gx = g_fused * (1 + a)
    gy = g_fused * (2 - a)
    g_a = g_fused * (x - y)
    gz1 = g_a * a1 * (1 - a1)
    gz2 = g_a * a2 * (1 - a2)
    gw13, gb13 = K.conv2d_weight_grad(src, gz1, w.w_1x3)
    gw31, gb31 = K.conv2d_weight_grad(src, gz2, w.w_3x1)
    g_src = K.conv2d_input_grad(gz1, w.w_1x3, (h, wd)) + K.conv2d_input_grad(gz2, w.w_3x1, (h, wd))
    grads = {"w_1x3.w": gw13, "w_1x3.b": gb13, "w_3x1.w": gw31, "w_3x1.b": gb31,
             "w_out.w": gw_out, "w_out.b": gb_out}
    return SadGrads(gx, g_src, g_src.copy(), gy, grads)
