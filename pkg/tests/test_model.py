import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sanet import kernels as K
from sanet import ModelConfig, build, describe, impulse_support, init_weights, multi_scale_infer, receptive_field
from sanet.blocks import MissingTensorError, TensorShapeError
from sanet.model import (ImageTooSmallError, Outputs, calibrate_bn, chain_impulse_support, chain_network,
                         param_shapes, prefix_chain)
from sanet.tensor import argmax_channels
from sanet.weights import count_params


def image(hw, seed=0):
    return np.random.default_rng(seed).standard_normal((1, 3) + tuple(hw)).astype(np.float32)


def stride1_block_params(c):
    # two 3x3 c->c convs without bias, each followed by BN (4 vectors of c)
    return 2 * (9 * c * c + 4 * c)


# building

def test_build_rejects_missing_and_misshapen(cfg_s, weights_s):
    store = dict(weights_s)
    del store["l4.block1.conv2.w"]
    with pytest.raises(MissingTensorError, match="l4.block1.conv2.w"):
        build(cfg_s, store)
    store = dict(weights_s)
    store["sad.out.b"] = np.zeros(3, np.float32)
    with pytest.raises(TensorShapeError, match=r"sad\.out\.b.*\(3,\).*\(128,\)"):
        build(cfg_s, store)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig("x")
    with pytest.raises(ValueError):
        ModelConfig("s", dp_dilations=(4, 2))
    assert ModelConfig("M").variant == "m"
    assert ModelConfig("s").repeats["l4"] == 2 and ModelConfig("m").repeats["l4"] == 9


# parameter accounting

def test_param_totals(cfg_s, cfg_m, weights_s, model_s, model_m):
    assert model_s.num_params == count_params(weights_s) == 7_442_119
    assert 6_500_000 <= model_s.num_params <= 10_500_000
    assert model_m.num_params == 11_084_231


def test_m_minus_s_equals_extra_blocks(model_s, model_m):
    extra = {"l1": (1, 32), "l2": (1, 64), "l3": (1, 128), "l4": (7, 128), "l5": (1, 256)}
    expect = sum(n * stride1_block_params(c) for n, c in extra.values())
    assert expect == 3_642_112
    assert model_m.num_params - model_s.num_params == expect


def test_describe_sums_and_repeats(model_s, model_m):
    for model, l4_blocks in ((model_s, 2), (model_m, 9)):
        rep = describe(model)
        assert sum(r.params for r in rep.records) == rep.total_params == model.num_params
        blocks = {k.split(".")[1] for k in model.shapes if k.startswith("l4.")}
        assert len(blocks) == l4_blocks
        assert f"SANet-{model.cfg.variant.upper()}" in rep.format()


def test_describe_ladder_matches_table(model_s):
    rep = describe(model_s, (1024, 2048))
    ladder = [(r.dims[1], 1024 // r.dims[2], 2048 // r.dims[3]) for r in
              (rep.record(n) for n in ("stem", "l1", "l2", "l3", "l4", "l5", "l6", "apppm"))]
    assert ladder == [(32, 4, 4), (32, 4, 4), (64, 8, 8), (128, 8, 8), (128, 16, 16), (256, 32, 32),
                      (512, 64, 64), (128, 64, 64)]


def test_inference_params_exclude_training_heads(model_s):
    rep = describe(model_s)
    assert rep.total_params - rep.inference_params == rep.record("aux_head").params + rep.record("boundary_head").params


# forward

def test_odd_size_forward(model_s):
    st_ = model_s.run(image((720, 960)))
    dims = {k: st_[k].shape[2:] for k in ("stem", "l2", "l4", "l5", "l6", "context", "y_up", "sad")}
    assert dims == {"stem": (180, 240), "l2": (90, 120), "l4": (45, 60), "l5": (23, 30), "l6": (12, 15),
                    "context": (12, 15), "y_up": (90, 120), "sad": (90, 120)}
    assert st_["logits"].shape == (1, 19, 720, 960)
    assert np.isfinite(st_["logits"]).all()


def test_training_mode_heads(model_s):
    out = model_s.forward(image((128, 192)), training=True)
    assert isinstance(out, Outputs)
    assert out.out.shape == out.aux.shape == (1, 19, 128, 192)
    assert out.boundary.shape == (1, 1, 128, 192)
    assert "aux" not in model_s.run(image((128, 192)))


def test_forward_deterministic_and_pure(cfg_s, weights_s, model_s):
    before = {k: v.copy() for k, v in weights_s.items()}
    img = image((128, 128), 3)
    img0 = img.copy()
    a = model_s.forward(img)
    b = model_s.forward(img)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(img, img0)
    for k, v in before.items():
        np.testing.assert_array_equal(weights_s[k], v)


def test_image_too_small(model_s):
    with pytest.raises(ImageTooSmallError):
        model_s.forward(image((63, 128)))


def test_ppm_variant_runs():
    cfg = ModelConfig("s", context="ppm")
    model = build(cfg, init_weights(cfg, 0))
    assert model.forward(image((384, 384))).shape == (1, 19, 384, 384)
    assert "ppm.fuse.w" in param_shapes(cfg) and "apppm.fuse.w" not in param_shapes(cfg)


def test_float64_twin_fold_equivalence(cfg_s, weights_s):
    img = image((128, 128), 4)
    w = calibrate_bn(cfg_s, weights_s, img)
    a = build(cfg_s, w, dtype=np.float64).forward(img)
    b = build(cfg_s, w, fold_bn=True, dtype=np.float64).forward(img)
    assert np.abs(a - b).max() <= 1e-9 * max(1.0, np.abs(a).max())


def test_calibrate_bn_normalises_first_layer(cfg_s, weights_s):
    img = image((128, 128), 5)
    w = calibrate_bn(cfg_s, weights_s, img)
    model = build(cfg_s, w)
    y = model.stem.units[0].conv
    z = K.batch_norm_infer(K.conv2d(img, y), model.stem.units[0].bn).astype(np.float64)
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(z.var(axis=(0, 2, 3)), 1, atol=1e-3)
    # the global-pooling branch has one sample per channel and keeps its stats
    np.testing.assert_array_equal(w["apppm.global.bn.var"], weights_s["apppm.global.bn.var"])


# multi-scale

def test_multi_scale_single_scale_matches_plain(model_s):
    img = image((128, 160), 6)
    probs = multi_scale_infer(model_s, img, [1.0])
    np.testing.assert_array_equal(argmax_channels(probs), argmax_channels(model_s.forward(img)))
    np.testing.assert_array_equal(multi_scale_infer(model_s, img, [1.0, 1.0]), probs)


def test_multi_scale_four_scale_recipe_runs(model_s):
    img = image((128, 256), 7)
    probs = multi_scale_infer(model_s, img, (0.5, 0.75, 1, 1.25))
    assert probs.shape == (1, 19, 128, 256)
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-5)
    with pytest.raises(ValueError):
        multi_scale_infer(model_s, img, [])


# receptive field

def test_receptive_field_examples():
    assert receptive_field([(3, 1, 1)]) == (3, 3)
    assert receptive_field([(3, 1, 1)] * 2) == (5, 5)
    assert receptive_field([(3, 1, 2)]) == (5, 5)
    assert receptive_field([((1, 3), 1, 1), ((3, 1), 1, 1)]) == (3, 3)
    assert receptive_field([((1, 3), 1, 1)]) == (1, 3)
    with pytest.raises(ValueError):
        receptive_field([])


def test_impulse_support_small_chains():
    assert chain_impulse_support([(1, 1, 1)], (9, 9)).height == 1
    box = chain_impulse_support([(3, 1, 1)], (9, 9))
    assert (box.height, box.width) == (3, 3)
    box = chain_impulse_support([(3, 1, 1)] * 2, (15, 15))
    assert (box.height, box.width) == (5, 5)
    box = chain_impulse_support([(3, 1, 2)], (15, 15))
    assert (box.height, box.width) == (5, 5)


links = st.tuples(st.sampled_from([1, 3, 5, (1, 3), (3, 1)]), st.sampled_from([1, 2]), st.sampled_from([1, 2, 4]))


@settings(max_examples=100, deadline=None)
@given(st.lists(links, min_size=1, max_size=6))
def test_receptive_field_equals_impulse_support(chain):
    rf = receptive_field(chain)
    jump = math.prod(s for _, s, _ in chain)
    size = 2 * max(rf) + 4 * jump + 8
    box = chain_impulse_support(chain, (size, size))
    assert (box.height, box.width) == rf


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([1, 3, 5]), st.just(1), st.sampled_from([1, 2, 3])), min_size=1, max_size=6))
def test_forward_impulse_support_for_stride_one_chains(chain):
    # stride-1 all-ones chains are symmetric, so pushing an impulse forward
    # spreads over exactly the receptive field
    rf = receptive_field(chain)
    n = rf[0] + 10
    x = np.zeros((1, 1, n, n))
    x[0, 0, n // 2, n // 2] = 1
    out = chain_network(chain)(x)[0, 0] > 0
    rows = np.flatnonzero(out.any(axis=1))
    assert rows[-1] - rows[0] + 1 == rf[0]


def test_model_prefix_rf_matches_impulse(model_s):
    for prefix, expect in (("l3", 159), ("dp2", 351), ("l6", 559)):
        assert receptive_field(prefix_chain(model_s, prefix)) == (expect, expect)
        box = impulse_support(model_s, prefix, (1024, 1024))
        assert (box.height, box.width) == (expect, expect)


def test_model_support_nesting(model_s):
    boxes = [impulse_support(model_s, p, (512, 512)) for p in ("l3", "dp2", "l6")]
    assert boxes[1].contains(boxes[0]) and boxes[2].contains(boxes[1])
    assert boxes[0].height < boxes[1].height < boxes[2].height
