"""SANet-S / SANet-M assembly, inference, and structural reports.

Data flow for one image::

    stem -> L1 -> L2 -> L3 --------------------------> dilated path -> (dp1, dp2, x)
                        '-> L4 -> L5 -> L6 -> APPPM -> resize to L3 dims -> y
    SAD(x, dp1, dp2, y) -> segmentation head -> resize to input dims

Training mode additionally evaluates the auxiliary head on the L4 output and
the boundary head on the dilated-path output.
"""

import dataclasses
import math
import types
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from . import blocks as B
from . import kernels as K
from .context import ApppmConfig, apppm, ppm
from .sad import SadWeights, sad_forward
from .tensor import ShapeError, check_tensor4, softmax_channels

STAGES = ("stem", "l1", "l2", "l3", "l4", "l5", "l6")
STAGE_STRIDES = {"stem": 4, "l1": 1, "l2": 2, "l3": 1, "l4": 2, "l5": 2, "l6": 2}
REPEATS = {
    "s": {"stem": 1, "l1": 2, "l2": 2, "l3": 2, "l4": 2, "l5": 2, "l6": 1},
    "m": {"stem": 1, "l1": 3, "l2": 3, "l3": 3, "l4": 9, "l5": 3, "l6": 1},
}
CHANNELS = {"stem": 32, "l1": 32, "l2": 64, "l3": 128, "l4": 128, "l5": 256, "l6": 512}
MIN_SIDE = 64


class ImageTooSmallError(ShapeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "s"
    num_classes: int = 19
    channels: Dict[str, int] = field(default_factory=lambda: dict(CHANNELS))
    dp_dilations: Tuple[int, int] = (2, 4)
    apppm: ApppmConfig = ApppmConfig()
    context: str = "apppm"  # "ppm" swaps in the plain pyramid pooling baseline
    decoder_c: int = 128
    head_c: int = 128
    boundary_head_c: int = 64
    bottleneck_width: int = 256
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "variant", self.variant.lower())
        if self.variant not in REPEATS:
            raise ValueError(f"unknown variant {self.variant!r}; expected 's' or 'm'")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.context not in ("apppm", "ppm"):
            raise ValueError(f"unknown context module {self.context!r}")
        d1, d2 = self.dp_dilations
        if not 1 <= d1 < d2:
            raise ValueError("the second dilated-path stage needs the larger dilation")
        if self.channels["l3"] != self.decoder_c or self.apppm.out_c != self.decoder_c:
            raise ValueError("L3, the dilated path, APPPM output and SAD must share the decoder width")
        if self.apppm.in_c != self.channels["l6"]:
            raise ValueError("APPPM input width must match L6")

    @property
    def repeats(self):
        return REPEATS[self.variant]


def _assemble(cfg: ModelConfig, binder: B.Binder):
    ch, rep = cfg.channels, cfg.repeats
    parts = {"stem": B.stem(binder, "stem", 3, ch["stem"])}
    prev = ch["stem"]
    for name in ("l1", "l2", "l3", "l4", "l5"):
        parts[name] = B.layer(binder, name, prev, ch[name], rep[name], STAGE_STRIDES[name])
        prev = ch[name]
    parts["l6"] = B.Sequential((B.bottleneck(binder, "l6.block0", B.BlockSpec(prev, ch["l6"], 2, 1, "bottleneck"),
                                             cfg.bottleneck_width),))
    parts["dp"] = B.dilated_path(binder, "dp", ch["l3"], cfg.dp_dilations)
    if cfg.context == "apppm":
        parts["context"] = apppm(binder, "apppm", cfg.apppm)
    else:
        parts["context"] = ppm(binder, "ppm", ch["l6"], cfg.apppm.branch_c, cfg.apppm.out_c)
    c = cfg.decoder_c
    parts["sad"] = SadWeights(binder.conv("sad.att_h", c, c, (1, 3), bn=False, act=None).conv,
                              binder.conv("sad.att_v", c, c, (3, 1), bn=False, act=None).conv,
                              binder.conv("sad.out", c, c, 1, bn=False, act=None).conv)
    parts["head"] = B.head(binder, "head", c, cfg.head_c, cfg.num_classes)
    parts["aux_head"] = B.head(binder, "aux_head", ch["l4"], cfg.head_c, cfg.num_classes)
    parts["boundary_head"] = B.head(binder, "boundary_head", ch["l3"], cfg.boundary_head_c, 1)
    return parts


def param_shapes(cfg: ModelConfig):
    """Ordered mapping of every tensor name the config needs to its shape."""
    binder = B.Binder(None, bn_eps=cfg.bn_eps)
    _assemble(cfg, binder)
    return binder.shapes


class Outputs(NamedTuple):
    out: np.ndarray
    aux: np.ndarray
    boundary: np.ndarray


@dataclass(frozen=True)
class SANet:
    cfg: ModelConfig
    parts: Dict[str, object]
    shapes: Dict[str, Tuple[int, ...]]
    folded: bool = False
    dtype: np.dtype = np.dtype(np.float32)

    def __getattr__(self, name):
        parts = self.__dict__.get("parts", {})
        if name in parts:
            return parts[name]
        raise AttributeError(name)

    def run(self, img, training=False):
        """Every intermediate of one pass, keyed by stage name."""
        img = check_tensor4(img, "img")
        if img.shape[1] != 3:
            raise ShapeError(f"expected an RGB image (3 channels), got {img.shape[1]}")
        h, w = img.shape[2:]
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ImageTooSmallError(f"image {h}x{w} is too small; both sides must be >= {MIN_SIDE}")
        x = img.astype(self.dtype, copy=False)
        st = {}
        st["stem"] = x = B.stem_forward(x, self.stem)
        for name in ("l1", "l2", "l3"):
            st[name] = x = self.parts[name](x)
        taps = self.dp(st["l3"])
        st["dp1"], st["dp2"], st["dp"] = taps
        for name in ("l4", "l5", "l6"):
            st[name] = x = self.parts[name](x)
        st["context"] = self.context(x)
        st["y_up"] = K.bilinear_resize(st["context"], st["l3"].shape[2:])
        st["sad"], _ = sad_forward(taps.x, taps.dp1, taps.dp2, st["y_up"], self.sad)
        st["logits"] = self.head(st["sad"], (h, w))
        if training:
            st["aux"] = self.aux_head(st["l4"], (h, w))
            st["boundary"] = self.boundary_head(taps.x, (h, w))
        return st

    def forward(self, img, training=False):
        st = self.run(img, training)
        if training:
            return Outputs(st["logits"], st["aux"], st["boundary"])
        return st["logits"]

    __call__ = forward

    @property
    def num_params(self):
        return sum(int(np.prod(s)) for s in self.shapes.values())


def build(cfg: ModelConfig, weights, fold_bn=False, dtype=np.float32) -> SANet:
    """Bind ``weights`` to the architecture; raises WeightError naming any bad tensor.

    ``dtype=np.float64`` gives a verification twin of the float32 engine.
    """
    binder = B.Binder(weights, fold_bn=fold_bn, bn_eps=cfg.bn_eps, dtype=dtype)
    parts = _assemble(cfg, binder)
    return SANet(cfg, types.MappingProxyType(parts), dict(binder.shapes), fold_bn, np.dtype(dtype))


def calibrate_bn(cfg: ModelConfig, weights, img):
    """Copy of ``weights`` with BN running statistics measured on ``img``.

    Layers are calibrated in execution order, so each one sees inputs already
    normalised by the calibrated layers before it; this gives random weights
    the activation scales of a trained network. Units whose output holds a
    single sample per channel (the global pooling branch) keep their stats.
    """
    model = build(cfg, weights)
    stats = {}

    def observe(unit, y):
        if y.shape[0] * y.shape[2] * y.shape[3] < 2:
            return unit.bn
        yd = y.astype(np.float64)
        mean, var = yd.mean(axis=(0, 2, 3)), yd.var(axis=(0, 2, 3))
        stats[unit.name] = mean, var
        return dataclasses.replace(unit.bn, mean=mean, var=var)

    with B.observe_bn(observe):
        model.run(img, training=True)
    out = dict(weights)
    for name, (mean, var) in stats.items():
        out[f"{name}.bn.mean"] = mean.astype(np.float32)
        out[f"{name}.bn.var"] = var.astype(np.float32)
    return out


def forward(model: SANet, img, training=False):
    return model.forward(img, training)


def multi_scale_infer(model: SANet, img, scales=(0.5, 0.75, 1.0, 1.25)):
    """Average of softmax maps over rescaled copies of ``img``, at input size."""
    scales = list(scales)
    if not scales or any(s <= 0 for s in scales):
        raise ValueError(f"scales must be a non-empty list of positive numbers, got {scales}")
    img = check_tensor4(img, "img")
    h, w = img.shape[2:]
    total = None
    for s in scales:
        size = (max(1, math.floor(h * s + 0.5)), max(1, math.floor(w * s + 0.5)))
        probs = softmax_channels(model.forward(K.bilinear_resize(img, size)))
        probs = K.bilinear_resize(probs, (h, w))
        total = probs.astype(np.float64) if total is None else total + probs
    return (total / len(scales)).astype(np.float32)


# --------------------------------------------------------------------------
# structural reports


def receptive_field(chain):
    """Receptive field (rf_h, rf_w) of a chain of (kernel, stride, dilation) links."""
    if not chain:
        raise ValueError("receptive_field needs a non-empty chain")
    rf = [1, 1]
    jump = [1, 1]
    for k, s, d in chain:
        k, s, d = K._pair(k), K._pair(s), K._pair(d)
        for a in range(2):
            rf[a] += (k[a] - 1) * d[a] * jump[a]
            jump[a] *= s[a]
    return tuple(rf)


PREFIXES = ("l3", "dp2", "l6")


def _prefix_modules(model: SANet, prefix):
    """(module, transpose kwargs) pairs from the image up to ``prefix``."""
    if prefix not in PREFIXES:
        raise ValueError(f"prefix must be one of {PREFIXES}, got {prefix!r}")
    mods = [(model.parts[n], {}) for n in ("stem", "l1", "l2", "l3")]
    if prefix == "dp2":
        mods.append((model.dp, {"tap": "dp2"}))
    elif prefix == "l6":
        mods += [(model.parts[n], {}) for n in ("l4", "l5", "l6")]
    return mods


def prefix_chain(model: SANet, prefix):
    return [link for m, kw in _prefix_modules(model, prefix) for link in m.chain(**kw)]


class Box(NamedTuple):
    top: int
    left: int
    bottom: int  # inclusive
    right: int  # inclusive

    @property
    def height(self):
        return self.bottom - self.top + 1

    @property
    def width(self):
        return self.right - self.left + 1

    def contains(self, other):
        return (self.top <= other.top and self.left <= other.left
                and self.bottom >= other.bottom and self.right >= other.right)


def _support_box(g):
    rows = np.flatnonzero(g.any(axis=1))
    cols = np.flatnonzero(g.any(axis=0))
    if rows.size == 0:
        raise ValueError("impulse vanished; support is empty")
    return Box(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def _back_project(mods, in_hw, out_c, unit=None):
    dims = [in_hw]
    for m, kw in mods[:-1]:
        dims.append(m.out_hw(dims[-1]))
    oh, ow = mods[-1][0].out_hw(dims[-1])
    uy, ux = (oh // 2, ow // 2) if unit is None else unit
    g = np.zeros((1, out_c, oh, ow), np.float64)
    g[0, :, uy, ux] = 1.0
    for (m, kw), hw in zip(reversed(mods), reversed(dims)):
        g = m.transpose(g, hw, **kw)
    return g[0].sum(axis=0) > 0


def impulse_support(model: SANet, prefix, input_hw=(512, 512), unit=None):
    """Input-space box that can influence one output unit of a network prefix.

    A unit impulse at output position ``unit`` (default: the centre) is
    carried back through the prefix with every weight set to 1 and every
    ReLU treated as the identity. Such a network is linear with non-negative
    coefficients, so no cancellation can occur and the nonzero support is
    exactly the unit's receptive field, clipped to the image.
    """
    mods = _prefix_modules(model, prefix)
    out_c = {"l3": model.cfg.channels["l3"], "dp2": model.cfg.channels["l3"], "l6": model.cfg.channels["l6"]}[prefix]
    return _support_box(_back_project(mods, tuple(input_hw), out_c, unit))


def chain_network(chain):
    """Single-channel all-ones conv stack realising ``chain`` with centred padding."""
    units = []
    for i, (k, s, d) in enumerate(chain):
        k, s, d = K._pair(k), K._pair(s), K._pair(d)
        if k[0] % 2 == 0 or k[1] % 2 == 0:
            raise ValueError("chain_network needs odd kernels for centred padding")
        pad = B._padding_for(k, d)
        units.append(B.ConvUnit(f"c{i}", K.ConvParams(np.ones((1, 1) + k, np.float64), None, s, pad, d), None, None))
    return B.Sequential(tuple(units))


def chain_impulse_support(chain, input_hw, unit=None):
    net = chain_network(chain)
    return _support_box(_back_project([(net, {})], tuple(input_hw), 1, unit))


class StageRecord(NamedTuple):
    name: str
    dims: Tuple[int, int, int, int]
    params: int
    receptive_field: Optional[Tuple[int, int]]  # None: image-wide (global pooling upstream)


@dataclass(frozen=True)
class LayerReport:
    variant: str
    input_hw: Tuple[int, int]
    records: List[StageRecord]
    total_params: int
    inference_params: int

    def record(self, name):
        return next(r for r in self.records if r.name == name)

    def format(self):
        lines = [f"SANet-{self.variant.upper()}  input {self.input_hw[0]}x{self.input_hw[1]}",
                 f"{'stage':<14}{'output (n,c,h,w)':<26}{'params':>12}  {'reduction':<11}receptive field"]
        h, w = self.input_hw
        for r in self.records:
            rf = "global" if r.receptive_field is None else "%dx%d" % r.receptive_field
            red = f"{h / r.dims[2]:g}x{w / r.dims[3]:g}"
            lines.append(f"{r.name:<14}{str(r.dims):<26}{r.params:>12,}  {red:<11}{rf}")
        lines.append(f"{'total':<40}{self.total_params:>12,}")
        lines.append(f"{'inference':<40}{self.inference_params:>12,}  (without auxiliary/boundary heads)")
        return "\n".join(lines)


def _count(shapes, *prefixes):
    return sum(int(np.prod(s)) for k, s in shapes.items() if k.split(".", 1)[0] in prefixes)


def describe(model: SANet, input_hw=(1024, 2048)) -> LayerReport:
    cfg = model.cfg
    ch = cfg.channels
    hw = tuple(input_hw)
    dims = {}
    for name in ("stem", "l1", "l2", "l3"):
        hw = model.parts[name].out_hw(hw)
        dims[name] = hw
    l3_hw = hw
    for name in ("l4", "l5", "l6"):
        hw = model.parts[name].out_hw(hw)
        dims[name] = hw
    records = []
    chain = []
    for name in ("stem", "l1", "l2", "l3"):
        chain += model.parts[name].chain()
        records.append(StageRecord(name, (1, ch[name]) + dims[name], _count(model.shapes, name),
                                   receptive_field(chain)))
    l3_chain = list(chain)
    dp_params = {t: sum(int(np.prod(s)) for k, s in model.shapes.items() if k.startswith(f"dp.{t}."))
                 for t in ("dp1", "dp2", "out")}
    for tap, label, key in (("dp1", "dp1", "dp1"), ("dp2", "dp2", "dp2"), ("x", "dp", "out")):
        records.append(StageRecord(label, (1, ch["l3"]) + l3_hw, dp_params[key],
                                   receptive_field(l3_chain + model.dp.chain(tap))))
    for name in ("l4", "l5", "l6"):
        chain += model.parts[name].chain()
        records.append(StageRecord(name, (1, ch[name]) + dims[name], _count(model.shapes, name),
                                   receptive_field(chain)))
    ctx = "apppm" if cfg.context == "apppm" else "ppm"
    records.append(StageRecord(ctx, (1, cfg.apppm.out_c) + dims["l6"], _count(model.shapes, ctx), None))
    records.append(StageRecord("sad", (1, cfg.decoder_c) + l3_hw, _count(model.shapes, "sad"), None))
    records.append(StageRecord("head", (1, cfg.num_classes) + tuple(input_hw), _count(model.shapes, "head"), None))
    records.append(StageRecord("aux_head", (1, cfg.num_classes) + tuple(input_hw),
                               _count(model.shapes, "aux_head"), None))
    records.append(StageRecord("boundary_head", (1, 1) + tuple(input_hw), _count(model.shapes, "boundary_head"),
                               receptive_field(l3_chain + model.dp.chain("x") + model.boundary_head.conv.chain()
                                               + model.boundary_head.cls.chain())))
    total = model.num_params
    inference = total - _count(model.shapes, "aux_head", "boundary_head")
    return LayerReport(cfg.variant, tuple(input_hw), records, total, inference)
