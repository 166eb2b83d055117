"""Composite blocks: conv units, residual blocks, the dilated path and heads.

Blocks are frozen dataclasses built through a :class:`Binder`, which either
pulls named tensors out of a weight store (validating names and shapes) or,
with no store, just records the schema. The same builder functions therefore
define the architecture, the weight layout and the parameter accounting.

Every block offers ``forward``, ``out_hw`` (shape propagation) and
``transpose``. The latter back-projects a non-negative map through the
block's wiring with every weight replaced by 1 and every non-linearity by
the identity; its support is the exact receptive field of the block.
"""

from contextlib import contextmanager
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np

from . import kernels as K
from .tensor import ShapeError, check_tensor4


class WeightError(ValueError):
    pass


class MissingTensorError(WeightError):
    pass


class TensorShapeError(WeightError):
    pass


def _padding_for(kernel, dilation):
    return tuple(d * (k - 1) // 2 for k, d in zip(kernel, dilation))


class Binder:
    """Hands out named weight tensors, recording the schema as it goes."""

    def __init__(self, store=None, fold_bn=False, bn_eps=1e-5, dtype=np.float32):
        self.store = store
        self.dtype = np.dtype(dtype)
        self.fold_bn = fold_bn
        self.bn_eps = bn_eps
        self.shapes = {}

    def tensor(self, name, shape):
        shape = tuple(int(s) for s in shape)
        if name in self.shapes:
            raise WeightError(f"tensor {name!r} requested twice")
        self.shapes[name] = shape
        if self.store is None:
            arr = np.zeros(shape, self.dtype)
        else:
            if name not in self.store:
                raise MissingTensorError(f"weight store is missing tensor {name!r}")
            arr = np.array(self.store[name], dtype=self.dtype)
            if arr.shape != shape:
                raise TensorShapeError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
        arr.flags.writeable = False
        return arr

    def conv(self, name, in_c, out_c, kernel=3, stride=1, dilation=1, padding=None, bn=True, act="relu"):
        kernel, stride, dilation = K._pair(kernel), K._pair(stride), K._pair(dilation)
        padding = _padding_for(kernel, dilation) if padding is None else K._pair(padding)
        weight = self.tensor(f"{name}.w", (out_c, in_c) + kernel)
        # convs followed by BN carry no bias of their own
        bias = None if bn else self.tensor(f"{name}.b", (out_c,))
        params = K.ConvParams(weight, bias, stride, padding, dilation)
        bnp = None
        if bn:
            bnp = K.BnParams(*(self.tensor(f"{name}.bn.{k}", (out_c,)) for k in ("gamma", "beta", "mean", "var")),
                             eps=self.bn_eps)
            if self.fold_bn:
                params, bnp = K.fold_bn_into_conv(params, bnp), None
        return ConvUnit(name, params, bnp, act)


_bn_observer = None


@contextmanager
def observe_bn(fn):
    """Route every BN application through ``fn(unit, conv_out) -> BnParams``."""
    global _bn_observer
    prev, _bn_observer = _bn_observer, fn
    try:
        yield
    finally:
        _bn_observer = prev


@dataclass(frozen=True)
class ConvUnit:
    name: str
    conv: K.ConvParams
    bn: Optional[K.BnParams] = None
    act: Optional[str] = "relu"

    def forward(self, x):
        y = K.conv2d(x, self.conv)
        if self.bn is not None:
            bn = self.bn if _bn_observer is None else _bn_observer(self, y)
            scale, shift = bn.scale_shift()
            y *= scale.astype(y.dtype)[:, None, None]
            y += shift.astype(y.dtype)[:, None, None]
        if self.act == "relu":
            np.maximum(y, 0, out=y)
        elif self.act == "sigmoid":
            y = K.sigmoid(y)
        return y

    __call__ = forward

    def out_hw(self, hw):
        return self.conv.out_hw(*hw)

    def chain(self):
        return [(self.conv.kernel, self.conv.stride, self.conv.dilation)]

    def transpose(self, g, in_hw):
        # with all-ones weights every input channel receives the same map, so
        # the back-projection is carried as a single channel
        g = g.sum(axis=1, keepdims=True)
        ones = K.ConvParams(np.ones((1, 1) + self.conv.kernel, g.dtype), None,
                            self.conv.stride, self.conv.padding, self.conv.dilation)
        return _normalise(K.conv2d_input_grad(g, ones, in_hw))


def _normalise(g):
    # only the support matters; binarising keeps values from decaying into
    # denormals (slow) or underflowing to zero (wrong) over deep stacks
    return (g > 0).astype(g.dtype)


@dataclass(frozen=True)
class Sequential:
    units: Tuple

    def forward(self, x):
        for u in self.units:
            x = u.forward(x)
        return x

    __call__ = forward

    def out_hw(self, hw):
        for u in self.units:
            hw = u.out_hw(hw)
        return hw

    def chain(self):
        return [link for u in self.units for link in u.chain()]

    def transpose(self, g, in_hw):
        dims = [in_hw]
        for u in self.units[:-1]:
            dims.append(u.out_hw(dims[-1]))
        for u, hw in zip(reversed(self.units), reversed(dims)):
            g = u.transpose(g, hw)
        return g

    def __len__(self):
        return len(self.units)


class BlockSpec(NamedTuple):
    in_c: int
    out_c: int
    stride: int = 1
    dilation: int = 1
    kind: str = "basic"


def _residual_join(out, shortcut):
    if out.shape != shortcut.shape:
        raise ShapeError(f"residual join shape mismatch {out.shape} vs {shortcut.shape}")
    out += shortcut
    np.maximum(out, 0, out=out)
    return out


@dataclass(frozen=True)
class BasicBlock:
    spec: BlockSpec
    conv1: ConvUnit
    conv2: ConvUnit
    proj: Optional[ConvUnit] = None

    def forward(self, x):
        out = self.conv2(self.conv1(x))
        return _residual_join(out, x if self.proj is None else self.proj(x))

    __call__ = forward

    def out_hw(self, hw):
        return self.conv2.out_hw(self.conv1.out_hw(hw))

    def chain(self):
        return self.conv1.chain() + self.conv2.chain()

    def transpose(self, g, in_hw):
        mid = self.conv1.out_hw(in_hw)
        main = self.conv1.transpose(self.conv2.transpose(g, mid), in_hw)
        short = g if self.proj is None else self.proj.transpose(g, in_hw)
        return _normalise(main + short)


def basic_block(b: Binder, name, spec: BlockSpec):
    if spec.stride not in (1, 2):
        raise ValueError(f"{name}: stride must be 1 or 2, got {spec.stride}")
    d = spec.dilation
    conv1 = b.conv(f"{name}.conv1", spec.in_c, spec.out_c, 3, spec.stride, d)
    conv2 = b.conv(f"{name}.conv2", spec.out_c, spec.out_c, 3, 1, d, act=None)
    proj = None
    if spec.stride != 1 or spec.in_c != spec.out_c:
        proj = b.conv(f"{name}.proj", spec.in_c, spec.out_c, 1, spec.stride, act=None)
    return BasicBlock(spec, conv1, conv2, proj)


@dataclass(frozen=True)
class Bottleneck:
    spec: BlockSpec
    reduce: ConvUnit
    conv: ConvUnit
    expand: ConvUnit
    proj: ConvUnit

    def forward(self, x):
        out = self.expand(self.conv(self.reduce(x)))
        return _residual_join(out, self.proj(x))

    __call__ = forward

    def out_hw(self, hw):
        return self.expand.out_hw(self.conv.out_hw(self.reduce.out_hw(hw)))

    def chain(self):
        return self.reduce.chain() + self.conv.chain() + self.expand.chain()

    def transpose(self, g, in_hw):
        mid = self.reduce.out_hw(in_hw)
        inner = self.conv.out_hw(mid)
        main = self.reduce.transpose(self.conv.transpose(self.expand.transpose(g, inner), mid), in_hw)
        return _normalise(main + self.proj.transpose(g, in_hw))


def bottleneck(b: Binder, name, spec: BlockSpec, width=None):
    """1x1 reduce -> 3x3 (stride) -> 1x1 expand, with a projection shortcut."""
    width = spec.in_c if width is None else width
    return Bottleneck(
        spec,
        b.conv(f"{name}.reduce", spec.in_c, width, 1),
        b.conv(f"{name}.conv", width, width, 3, spec.stride, spec.dilation),
        b.conv(f"{name}.expand", width, spec.out_c, 1, act=None),
        b.conv(f"{name}.proj", spec.in_c, spec.out_c, 1, spec.stride, act=None),
    )


def layer(b: Binder, name, in_c, out_c, repeats, stride):
    blocks = [basic_block(b, f"{name}.block0", BlockSpec(in_c, out_c, stride))]
    blocks += [basic_block(b, f"{name}.block{i}", BlockSpec(out_c, out_c)) for i in range(1, repeats)]
    return Sequential(tuple(blocks))


def stem(b: Binder, name="stem", in_c=3, out_c=32):
    return Sequential((b.conv(f"{name}.conv1", in_c, out_c, 3, 2),
                       b.conv(f"{name}.conv2", out_c, out_c, 3, 2)))


def stem_forward(img, stem_seq):
    img = check_tensor4(img, "img")
    if img.shape[1] != 3:
        raise ShapeError(f"stem expects 3 input channels, got {img.shape[1]}")
    return stem_seq(img)


class DpTaps(NamedTuple):
    dp1: np.ndarray
    dp2: np.ndarray
    x: np.ndarray


@dataclass(frozen=True)
class DilatedPath:
    dp1: BasicBlock
    dp2: BasicBlock
    out: ConvUnit

    @property
    def channels(self):
        return self.dp1.spec.in_c

    def forward(self, l3_out):
        l3_out = check_tensor4(l3_out, "l3_out")
        if l3_out.shape[1] != self.channels:
            raise ShapeError(f"dilated path expects {self.channels} channels, got {l3_out.shape[1]}")
        t1 = self.dp1(l3_out)
        t2 = self.dp2(t1)
        return DpTaps(t1, t2, self.out(t2))

    __call__ = forward

    def out_hw(self, hw):
        return hw

    def chain(self, tap="x"):
        links = self.dp1.chain()
        if tap in ("x", "dp2"):
            links += self.dp2.chain()
        if tap == "x":
            links += self.out.chain()
        return links

    def transpose(self, g, in_hw, tap="x"):
        if tap == "x":
            g = self.out.transpose(g, in_hw)
        if tap in ("x", "dp2"):
            g = self.dp2.transpose(g, in_hw)
        return self.dp1.transpose(g, in_hw)


def dilated_path(b: Binder, name="dp", channels=128, dilations=(2, 4)):
    d1, d2 = dilations
    return DilatedPath(basic_block(b, f"{name}.dp1", BlockSpec(channels, channels, 1, d1, "dp_stage")),
                       basic_block(b, f"{name}.dp2", BlockSpec(channels, channels, 1, d2, "dp_stage")),
                       b.conv(f"{name}.out", channels, channels, 3))


@dataclass(frozen=True)
class Head:
    conv: ConvUnit
    cls: ConvUnit

    def forward(self, x, target_hw):
        return K.bilinear_resize(self.cls(self.conv(x)), target_hw)

    __call__ = forward


def head(b: Binder, name, in_c, mid_c, num_out):
    return Head(b.conv(f"{name}.conv", in_c, mid_c, 3),
                b.conv(f"{name}.cls", mid_c, num_out, 1, bn=False, act=None))
