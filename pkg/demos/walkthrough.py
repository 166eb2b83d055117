"""End-to-end tour: random weights, one forward pass, the stage table and a colour map.

    python3 demos/walkthrough.py [out_dir]
"""

import sys
import time
from pathlib import Path

import numpy as np

from sanet import ModelConfig, build, describe, init_weights, multi_scale_infer, read_stf, write_stf
from sanet import imageio as io
from sanet.model import calibrate_bn
from sanet.tensor import argmax_channels


def synthetic_scene(h, w):
    # sky over a road with a box in the middle; enough structure to see the map react
    img = np.zeros((1, 3, h, w), np.float32)
    img[0, :, : h // 2] = np.array([0.5, 0.7, 0.9], np.float32)[:, None, None]
    img[0, :, h // 2:] = 0.35
    img[0, 0, h // 3: 2 * h // 3, w // 3: 2 * w // 3] = 0.9
    return img + np.random.default_rng(0).normal(0, 0.03, img.shape).astype(np.float32)


def main(out_dir="demo_out"):
    out = Path(out_dir)
    out.mkdir(exist_ok=True)
    cfg = ModelConfig("s")
    img = io.preprocess(synthetic_scene(256, 512))

    # random weights with BN statistics fitted to this image, saved and reloaded
    weights = calibrate_bn(cfg, init_weights(cfg, seed=0), img)
    write_stf(weights, out / "sanet_s.stf")
    model = build(cfg, read_stf(out / "sanet_s.stf"), fold_bn=True)
    print(describe(model, img.shape[2:]).format())

    t0 = time.perf_counter()
    probs = multi_scale_infer(model, img, (0.5, 0.75, 1.0, 1.25))
    print(f"\nfour-scale inference on 256x512: {time.perf_counter() - t0:.2f} s")
    labels = argmax_channels(probs)
    counts = np.bincount(labels.ravel(), minlength=cfg.num_classes)
    print("pixels per class (untrained weights):", dict((i, int(c)) for i, c in enumerate(counts) if c))
    io.write_image(io.colorize(labels, io.default_palette(cfg.num_classes)), out / "labels.ppm")
    print(f"wrote {out / 'labels.ppm'}")


if __name__ == "__main__":
    main(*sys.argv[1:])
