"""Randomised oracle suites: every fast kernel against its naive reference.

Each suite reports the worst error over its cases. Relative error is
normwise, ``max|fast - ref| / max(max|ref|, 1e-12)``, so isolated near-zero
outputs do not blow it up.
"""

import time
from typing import Callable, List, NamedTuple

import numpy as np

from . import kernels as K
from .losses import finite_diff_check
from .sad import SadWeights, sad_backward, sad_forward


class SuiteResult(NamedTuple):
    name: str
    cases: int
    worst: float
    tol: float
    seconds: float
    metric: str = "rel"

    @property
    def passed(self):
        return bool(self.worst <= self.tol)

    def format(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<14} cases={self.cases:<4} worst_{self.metric}={self.worst:.3e} "
                f"tol={self.tol:.0e} ({self.seconds:.2f}s)")


def rel_err(a, ref):
    a, ref = np.asarray(a, np.float64), np.asarray(ref, np.float64)
    if a.shape != ref.shape:
        return np.inf
    return float(np.abs(a - ref).max() / max(np.abs(ref).max(), 1e-12))


def _run(name, cases, tol, case_fn: Callable, rng, metric="rel"):
    t0 = time.perf_counter()
    worst = max(case_fn(rng) for _ in range(cases))
    return SuiteResult(name, cases, worst, tol, time.perf_counter() - t0, metric)


def _rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


def conv_case(rng):
    kh, kw = [(1, 3), (3, 1), (3, 3), (1, 1)][rng.integers(4)]
    s, d = int(rng.choice([1, 2])), int(rng.choice([1, 2, 4]))
    c, o = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    x = _rand(rng, 1, c, rng.integers(8, 16), rng.integers(8, 16))
    pad = (int(rng.integers(0, d * (kh // 2) + 2)), int(rng.integers(0, d * (kw // 2) + 2)))
    bias = _rand(rng, o) if rng.random() < 0.5 else None
    p = K.ConvParams(_rand(rng, o, c, kh, kw), bias, (s, s), pad, (d, d))
    return rel_err(K.conv2d(x, p), K.conv2d_reference(x, p))


def pool_case(rng):
    kh, kw = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    sh, sw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    ph, pw = int(rng.integers(0, kh // 2 + 1)), int(rng.integers(0, kw // 2 + 1))
    x = _rand(rng, 1, 2, rng.integers(kh + 1, 14), rng.integers(kw + 1, 14))
    inc = bool(rng.random() < 0.5)
    args = ((kh, kw), (sh, sw), (ph, pw), inc)
    return rel_err(K.avg_pool2d(x, *args), K.avg_pool2d_reference(x, *args))


def adaptive_case(rng):
    h, w = int(rng.integers(1, 20)), int(rng.integers(1, 20))
    x = _rand(rng, 1, 3, h, w)
    out = (int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1)))
    return rel_err(K.adaptive_avg_pool2d(x, out), K.adaptive_avg_pool2d_reference(x, out))


def _rand_bn(rng, c):
    return K.BnParams(_rand(rng, c), _rand(rng, c), _rand(rng, c),
                      rng.uniform(0.1, 3.0, c).astype(np.float32), eps=1e-5)


def bn_case(rng):
    c = int(rng.integers(1, 8))
    x = _rand(rng, 1, c, rng.integers(1, 10), rng.integers(1, 10))
    bn = _rand_bn(rng, c)
    return rel_err(K.batch_norm_infer(x, bn), K.batch_norm_reference(x, bn))


def resize_case(rng):
    x = _rand(rng, 1, 2, rng.integers(1, 12), rng.integers(1, 12))
    out = (int(rng.integers(1, 25)), int(rng.integers(1, 25)))
    return rel_err(K.bilinear_resize(x, out), K.bilinear_resize_reference(x, out))


def fold_case(rng):
    """Max abs difference between conv+BN and the folded conv."""
    c, o = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    x = _rand(rng, 1, c, 12, 12)
    p = K.ConvParams(_rand(rng, o, c, 3, 3) * np.float32(0.3), None, padding=(1, 1))
    bn = _rand_bn(rng, o)
    ref = K.batch_norm_infer(K.conv2d(x, p), bn)
    return float(np.abs(K.conv2d(x, K.fold_bn_into_conv(p, bn)) - ref).max())


def sad_gradcheck(seed, shape=(1, 4, 6, 6), eps=1e-3, n_coords=64):
    """Finite-difference check of every SAD gradient for one seed.

    The scalar objective is ``sum(out * r)`` for a fixed random ``r``; a plain
    sum would leave the 1x1 output conv's gradient nearly degenerate.
    """
    rng = np.random.default_rng(seed)
    n, c, h, w = shape
    w0 = SadWeights.random(c, rng=rng)
    inputs = {k: rng.standard_normal(shape) for k in ("x", "dp1", "dp2", "y_up")}
    r = rng.standard_normal(shape)
    names = list(w0.params())

    def f(params):
        out, _ = sad_forward(params["x"], params["dp1"], params["dp2"], params["y_up"],
                             SadWeights.from_params({k: params[k] for k in names}))
        return float((out * r).sum())

    out, cache = sad_forward(inputs["x"], inputs["dp1"], inputs["dp2"], inputs["y_up"], w0)
    g = sad_backward(cache, r, w0)
    analytic = dict(g.weights, x=g.x, dp1=g.dp1, dp2=g.dp2, y_up=g.y_up)
    params = dict(inputs, **w0.params())
    return finite_diff_check(f, params, analytic, eps=eps, n_coords=n_coords, rng=seed)


def kernel_suites(cases=100, seed=0) -> List[SuiteResult]:
    rng = np.random.default_rng(seed)
    with K.single_thread():
        return [
            _run("conv2d", cases, 1e-5, conv_case, rng),
            _run("avg_pool2d", cases, 1e-6, pool_case, rng),
            _run("adaptive_pool", cases, 1e-6, adaptive_case, rng),
            _run("batch_norm", cases, 1e-6, bn_case, rng),
            _run("bilinear", cases, 1e-6, resize_case, rng),
            _run("bn_fold", cases, 1e-4, fold_case, rng, metric="abs"),
        ]


def gradcheck_suite(seeds=20, tol=1e-3) -> SuiteResult:
    t0 = time.perf_counter()
    worst = max(sad_gradcheck(s).worst_rel for s in range(seeds))
    return SuiteResult("sad_gradcheck", seeds, worst, tol, time.perf_counter() - t0)
