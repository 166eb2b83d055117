"""BN folding: accuracy in float32 and float64, and interleaved latency.

    python3 demos/bn_folding.py
"""

import numpy as np

from sanet import ModelConfig, build, init_weights
from sanet.bench import bench_many, synthetic_input
from sanet.model import calibrate_bn


def main():
    cfg = ModelConfig("s")
    img = synthetic_input((256, 512), seed=0)
    weights = calibrate_bn(cfg, init_weights(cfg, 0), img)
    for dtype in (np.float32, np.float64):
        a = build(cfg, weights, dtype=dtype).forward(img)
        b = build(cfg, weights, fold_bn=True, dtype=dtype).forward(img)
        print(f"{np.dtype(dtype).name:8} max|logit| {np.abs(a).max():7.3f}  max|folded - plain| {np.abs(a - b).max():.3e}")

    reports, _ = bench_many([build(cfg, weights), build(cfg, weights, fold_bn=True)], (256, 512), iters=20)
    for r in reports:
        print(f"fold_bn={'on ' if r.fold_bn else 'off'}  mean {r.mean_ms:7.1f} ms  cov {r.cov:.3f}")


if __name__ == "__main__":
    main()
