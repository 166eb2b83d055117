import numpy as np
import pytest

from sanet import kernels as K
from sanet.blocks import Binder
from sanet.context import ApppmConfig, apppm, ppm
from sanet.sad import dual_attention
from sanet.tensor import ShapeError

from test_blocks import random_store

SMALL = ApppmConfig(in_c=6, branch_c=4, out_c=5)


def bound(builder, seed=0):
    schema = Binder()
    builder(schema)
    store = random_store(schema.shapes, seed)
    return builder(Binder(store)), store


def unit(store, name, x, pad=(1, 1), bn=True, relu=True):
    p = K.ConvParams(store[f"{name}.w"], store.get(f"{name}.b"), padding=pad)
    y = K.conv2d_reference(x, p)
    if bn:
        y = K.batch_norm_reference(y, K.BnParams(*(store[f"{name}.bn.{k}"] for k in ("gamma", "beta", "mean", "var"))))
    return np.maximum(y, 0) if relu else y


def sigmoid(z):
    return 1 / (1 + np.exp(-z.astype(np.float64)))


def test_grids_follow_divisors():
    assert ApppmConfig().grids((16, 32)) == [(1, 1), (8, 32), (4, 16)]
    assert ApppmConfig().grids((12, 23)) == [(1, 1), (6, 23), (3, 12)]


def test_config_rejects_symmetric_or_too_few_grids():
    with pytest.raises(ValueError):
        ApppmConfig(pool_divisors=((2, 2), (4, 2)))
    with pytest.raises(ValueError):
        ApppmConfig(pool_divisors=((2, 1),))


def test_apppm_output_dims_full_size(rng):
    mod, _ = bound(lambda b: apppm(b))
    out = mod(rng.standard_normal((1, 512, 16, 32)).astype(np.float32))
    assert out.shape == (1, 128, 16, 32)


def test_apppm_matches_composition(rng):
    mod, st = bound(lambda b: apppm(b, "ap", SMALL))
    y = rng.standard_normal((1, 6, 7, 9)).astype(np.float32)
    hw = (7, 9)
    branches = [K.bilinear_resize_reference(unit(st, "ap.global", K.adaptive_avg_pool2d_reference(y, (1, 1)), (0, 0)), hw)]
    for i, g in enumerate([(4, 9), (2, 5)], 1):
        branches.append(K.bilinear_resize_reference(unit(st, f"ap.branch{i}", K.adaptive_avg_pool2d_reference(y, g)), hw))
    f = unit(st, "ap.fuse", np.concatenate(branches, axis=1))
    r = unit(st, "ap.residual", y, (0, 0), relu=False)
    a = (sigmoid(unit(st, "ap.att_h", f, (0, 1), bn=False, relu=False))
         + sigmoid(unit(st, "ap.att_v", f, (1, 0), bn=False, relu=False)))
    fused = f * (1 + a) + r * (2 - a)
    expect = unit(st, "ap.out", fused.astype(np.float32), (0, 0), bn=False, relu=False)
    got = mod(y)
    assert got.shape == (1, 5, 7, 9)
    assert np.abs(got - expect).max() <= 1e-5 * np.abs(expect).max()


def test_apppm_attention_bounds(rng):
    mod, _ = bound(lambda b: apppm(b, "ap", SMALL))
    for seed in range(10):
        y = np.random.default_rng(seed).standard_normal((1, 6, 8, 8)).astype(np.float32) * 3
        f = mod.fuse(np.concatenate(mod.branch_outputs(y), axis=1))
        a = dual_attention(f, mod.att_h.conv, mod.att_v.conv).a
        assert (a > 0).all() and (a < 2).all()


def test_apppm_zero_attention_reduces_to_2f_plus_r(rng):
    schema = Binder()
    apppm(schema, "ap", SMALL)
    store = random_store(schema.shapes)
    for k in ("ap.att_h.w", "ap.att_h.b", "ap.att_v.w", "ap.att_v.b"):
        store[k] = np.zeros_like(store[k])
    mod = apppm(Binder(store), "ap", SMALL)
    y = rng.standard_normal((1, 6, 8, 8)).astype(np.float32)
    f = mod.fuse(np.concatenate(mod.branch_outputs(y), axis=1))
    r = mod.residual(y)
    np.testing.assert_array_equal(mod(y), mod.out(2 * f + r))


def test_apppm_constant_input_pools_to_constant():
    mod, _ = bound(lambda b: apppm(b, "ap", SMALL))
    y = np.full((1, 6, 8, 12), 0.7, np.float32)
    for g in SMALL.grids((8, 12)):
        np.testing.assert_allclose(K.adaptive_avg_pool2d(y, g), 0.7, rtol=1e-6)
    # the global branch stays spatially constant after its conv and resize;
    # the 3x3 branches pick up zero-padding effects at the border
    g = mod.branch_outputs(y)[0]
    assert np.ptp(g, axis=(2, 3)).max() == 0


def test_apppm_rejects_small_or_wrong_input():
    mod, _ = bound(lambda b: apppm(b, "ap", ApppmConfig(in_c=6, branch_c=4, out_c=5, pool_divisors=((1, 2), (3, 1)))))
    with pytest.raises(ShapeError):
        mod(np.zeros((1, 5, 8, 8), np.float32))


def test_apppm_param_count_golden():
    schema = Binder()
    apppm(schema)
    assert sum(int(np.prod(s)) for s in schema.shapes.values()) == 1_870_720


def test_ppm_matches_composition(rng):
    mod, st = bound(lambda b: ppm(b, "pp", 6, 4, 5, (1, 2, 3)))
    y = rng.standard_normal((1, 6, 6, 7)).astype(np.float32)
    parts = [y] + [K.bilinear_resize_reference(unit(st, f"pp.branch{i}", K.adaptive_avg_pool2d_reference(y, (g, g)), (0, 0)),
                                               (6, 7)) for i, g in enumerate((1, 2, 3))]
    expect = unit(st, "pp.fuse", np.concatenate(parts, axis=1))
    got = mod(y)
    assert got.shape == (1, 5, 6, 7)
    assert np.abs(got - expect).max() <= 1e-5 * np.abs(expect).max()


def test_ppm_global_branch_is_broadcast_mean(rng):
    mod, st = bound(lambda b: ppm(b, "pp", 6, 4, 5))
    y = rng.standard_normal((1, 6, 12, 12)).astype(np.float32)
    g = K.bilinear_resize(mod.branches[0](K.adaptive_avg_pool2d(y, (1, 1))), (12, 12))
    mean = y.astype(np.float64).mean(axis=(2, 3), keepdims=True).astype(np.float32)
    expect = unit(st, "pp.branch0", mean, (0, 0))
    np.testing.assert_allclose(g, np.broadcast_to(expect, g.shape), rtol=1e-5, atol=1e-6)
    with pytest.raises(ShapeError):
        mod(np.zeros((1, 6, 5, 5), np.float32))
