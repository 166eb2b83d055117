"""Context aggregation at 1/64 resolution: APPPM and the classic PPM baseline.

APPPM pools the deepest feature map onto grids whose height and width shrink
at different rates, runs a convolution on each pooled map, upsamples and
concatenates the branches, and fuses the result with a 1x1 projection of the
input under the same dual-head (1x3 / 3x1) sigmoid attention used by SAD.
"""

import math
from dataclasses import dataclass
from typing import Tuple

from . import kernels as K
from .blocks import Binder, ConvUnit
from .sad import dual_attention, gated_fusion
from .tensor import ShapeError, check_tensor4, concat_channels


@dataclass(frozen=True)
class ApppmConfig:
    in_c: int = 512
    branch_c: int = 128
    out_c: int = 128
    # per-axis divisors of the input grid; the global (1, 1) branch is implicit
    pool_divisors: Tuple[Tuple[int, int], ...] = ((2, 1), (4, 2))

    def __post_init__(self):
        if len(self.pool_divisors) < 2:
            raise ValueError("APPPM needs at least two non-global pooling grids")
        for dh, dw in self.pool_divisors:
            if dh < 1 or dw < 1:
                raise ValueError(f"pool divisors must be >= 1, got {(dh, dw)}")
            if dh == dw:
                raise ValueError(f"pool divisors {(dh, dw)} are symmetric; APPPM grids reduce each axis differently")

    def grids(self, hw):
        h, w = hw
        return [(1, 1)] + [(math.ceil(h / dh), math.ceil(w / dw)) for dh, dw in self.pool_divisors]


def _check_input(y, in_c, grids):
    y = check_tensor4(y, "y64")
    if y.shape[1] != in_c:
        raise ShapeError(f"context module expects {in_c} channels, got {y.shape[1]}")
    h, w = y.shape[2:]
    for gh, gw in grids:
        if gh > h or gw > w:
            raise ShapeError(f"input {h}x{w} is smaller than pooling grid {gh}x{gw}")
    return y


@dataclass(frozen=True)
class Apppm:
    cfg: ApppmConfig
    global_branch: ConvUnit
    branches: Tuple[ConvUnit, ...]
    residual: ConvUnit
    fuse: ConvUnit
    att_h: ConvUnit
    att_v: ConvUnit
    out: ConvUnit

    def branch_outputs(self, y64):
        hw = y64.shape[2:]
        grids = self.cfg.grids(hw)
        units = (self.global_branch,) + self.branches
        return [K.bilinear_resize(u(K.adaptive_avg_pool2d(y64, g)), hw) for u, g in zip(units, grids)]

    def forward(self, y64):
        y64 = _check_input(y64, self.cfg.in_c, self.cfg.grids(y64.shape[2:]))
        feats = self.fuse(concat_channels(self.branch_outputs(y64)))
        res = self.residual(y64)
        att = dual_attention(feats, self.att_h.conv, self.att_v.conv)
        return self.out(gated_fusion(feats, res, att.a))

    __call__ = forward

    def out_hw(self, hw):
        return hw


def apppm(b: Binder, name="apppm", cfg: ApppmConfig = ApppmConfig()):
    c = cfg.branch_c
    return Apppm(
        cfg,
        b.conv(f"{name}.global", cfg.in_c, c, 1),
        tuple(b.conv(f"{name}.branch{i}", cfg.in_c, c, 3) for i in range(1, len(cfg.pool_divisors) + 1)),
        b.conv(f"{name}.residual", cfg.in_c, c, 1, act=None),
        b.conv(f"{name}.fuse", c * (len(cfg.pool_divisors) + 1), c, 3),
        b.conv(f"{name}.att_h", c, c, (1, 3), bn=False, act=None),
        b.conv(f"{name}.att_v", c, c, (3, 1), bn=False, act=None),
        b.conv(f"{name}.out", c, cfg.out_c, 1, bn=False, act=None),
    )


def apppm_forward(y64, module: Apppm):
    return module(y64)


@dataclass(frozen=True)
class Ppm:
    in_c: int
    grids: Tuple[int, ...]
    branches: Tuple[ConvUnit, ...]
    fuse: ConvUnit

    def forward(self, y64):
        y64 = _check_input(y64, self.in_c, [(g, g) for g in self.grids])
        hw = y64.shape[2:]
        parts = [y64] + [K.bilinear_resize(u(K.adaptive_avg_pool2d(y64, (g, g))), hw)
                         for u, g in zip(self.branches, self.grids)]
        return self.fuse(concat_channels(parts))

    __call__ = forward

    def out_hw(self, hw):
        return hw


def ppm(b: Binder, name="ppm", in_c=512, branch_c=128, out_c=128, grids=(1, 2, 3, 6)):
    branches = tuple(b.conv(f"{name}.branch{i}", in_c, branch_c, 1) for i in range(len(grids)))
    return Ppm(in_c, tuple(grids), branches, b.conv(f"{name}.fuse", in_c + branch_c * len(grids), out_c, 3))


def ppm_forward(y64, module: Ppm):
    return module(y64)
