"""Latency benchmark: batch 1, synthetic input, inference heads only.

Warmup iterations run first and never enter the statistics. ``bench_many``
interleaves several models iteration by iteration, so slow drift in machine
speed (frequency scaling, noisy neighbours) hits every model equally; use it
when comparing configurations rather than measuring one.
"""

import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np
import threadpoolctl

from .kernels import set_single_thread


@dataclass
class BenchReport:
    input_hw: tuple
    warmup_iters: int
    timed_iters: int
    latencies_ms: List[float] = field(repr=False)
    thread_mode: str = "single"
    fold_bn: bool = False
    variant: str = "S"

    @property
    def mean_ms(self):
        return float(np.mean(self.latencies_ms))

    @property
    def median_ms(self):
        return float(np.median(self.latencies_ms))

    @property
    def min_ms(self):
        return float(np.min(self.latencies_ms))

    @property
    def fps(self):
        return 1000.0 / self.mean_ms

    @property
    def cov(self):
        return float(np.std(self.latencies_ms) / np.mean(self.latencies_ms))

    def summary(self):
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        d.update(mean_ms=self.mean_ms, median_ms=self.median_ms, min_ms=self.min_ms, fps=self.fps, cov=self.cov)
        return d

    def format(self):
        h, w = self.input_hw
        lines = [
            f"variant         {self.variant}",
            f"input           1x3x{h}x{w}",
            f"threads         {self.thread_mode}",
            f"fold_bn         {'on' if self.fold_bn else 'off'}",
            f"warmup_iters    {self.warmup_iters}",
            f"timed_iters     {self.timed_iters}",
            f"mean_ms         {self.mean_ms:.3f}",
            f"median_ms       {self.median_ms:.3f}",
            f"min_ms          {self.min_ms:.3f}",
            f"fps             {self.fps:.4f}",
            f"cov             {self.cov:.4f}",
        ]
        return "\n".join(lines)

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump({"environment": environment(), "report": self.summary()}, fh, indent=2, sort_keys=True)


def environment():
    blas = [{k: info.get(k) for k in ("internal_api", "version", "num_threads")}
            for info in threadpoolctl.threadpool_info()]
    return {"python": platform.python_version(), "numpy": np.__version__, "machine": platform.machine(),
            "processor": platform.processor(), "cpu_count": os.cpu_count(), "blas": blas}


def format_environment():
    env = environment()
    blas = ", ".join(f"{b['internal_api']} {b['version']}" for b in env["blas"]) or "unknown"
    return (f"# python {env['python']}  numpy {env['numpy']}  {env['machine']}  "
            f"cpus {env['cpu_count']}  blas {blas}")


def synthetic_input(hw, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((1, 3) + tuple(hw)).astype(np.float32)


def bench_many(models, hw, iters=30, warmup=3, threads="single", seed=0):
    """Time several models on one input, interleaving their iterations.

    Returns ``(reports, outputs)``, one of each per model, in input order.
    """
    if iters < 1 or warmup < 0:
        raise ValueError(f"need iters >= 1 and warmup >= 0, got {iters}, {warmup}")
    if threads not in ("single", "auto"):
        raise ValueError(f"threads must be 'single' or 'auto', got {threads!r}")
    img = synthetic_input(hw, seed)
    prev = set_single_thread(threads == "single")
    try:
        outputs = [None] * len(models)
        for _ in range(warmup):
            for i, m in enumerate(models):
                outputs[i] = m.forward(img)
        times = [[] for _ in models]
        for _ in range(iters):
            for i, m in enumerate(models):
                t0 = time.perf_counter()
                outputs[i] = m.forward(img)
                times[i].append((time.perf_counter() - t0) * 1e3)
    finally:
        set_single_thread(prev)
    reports = [BenchReport(tuple(hw), warmup, iters, t, threads, m.folded, m.cfg.variant)
               for m, t in zip(models, times)]
    return reports, outputs


def bench(model, hw, iters=30, warmup=3, threads="single", seed=0):
    reports, outputs = bench_many([model], hw, iters, warmup, threads, seed)
    return reports[0], outputs[0]
