"""Pooling micro-benchmarks with operation-count and memory estimates.

The all-pairs affinity op is a naive non-local reference: it materialises an
(HW)x(HW) attention matrix, the cost strip pooling is meant to avoid.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from statistics import median

import numpy as np

from . import pooling as P
from . import tensor as T
from .blocks import StripPoolingModule
from .tensor import ConfigError

WARMUP = 3
MIN_REPS = 10


@dataclass
class BenchRecord:
    op: str
    shape: tuple[int, int, int, int]
    reps: int
    median_s: float
    flops: int
    # scalars held by the op's intermediate pooled/affinity tensors
    memory_entries: int


def _strip_h_cost(n, c, h, w):
    return n * c * h * w + n * c * h, n * c * h


def _strip_v_cost(n, c, h, w):
    return n * c * h * w + n * c * w, n * c * w


def _avg_cost(n, c, h, w):
    return n * c * h * w + n * c * (h // 2) * (w // 2), n * c * (h // 2) * (w // 2)


def _adaptive_cost(n, c, h, w):
    bh, bw = min(6, h), min(6, w)
    cells = sum((b - a) for a, b in P.bin_bounds(h, bh)) * sum((b - a) for a, b in P.bin_bounds(w, bw))
    return n * c * (cells + bh * bw), n * c * bh * bw


def _global_cost(n, c, h, w):
    return n * c * h * w + n * c, n * c


def _spm_cost(n, c, h, w):
    pools = _strip_h_cost(n, c, h, w)[0] + _strip_v_cost(n, c, h, w)[0]
    conv1d = 2 * n * c * c * 3 * (h + w)
    fuse = 2 * n * c * c * h * w
    # broadcast add, batchnorm, sigmoid and gating: a handful of ops per element
    pointwise = 6 * n * c * h * w
    return pools + conv1d + fuse + pointwise, n * c * (h + w)


def _affinity_cost(n, c, h, w):
    hw = h * w
    return 4 * n * c * hw * hw + 3 * n * hw * hw, n * hw * hw


def _affinity(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    f = x.reshape(n, c, h * w)
    a = np.matmul(f.transpose(0, 2, 1), f) / np.sqrt(c)
    a = np.exp(a - a.max(axis=2, keepdims=True))
    a /= a.sum(axis=2, keepdims=True)
    return np.matmul(f, a.transpose(0, 2, 1)).reshape(n, c, h, w)


def _spm_runner(shape):
    spm = StripPoolingModule(shape[1])
    spm.materialize(0)

    def run(x):
        with T.no_grad():
            return spm(T.const(x), False).value
    return run


def _pool_runner(fn):
    def make(shape):
        def run(x):
            with T.no_grad():
                return fn(T.const(x)).value
        return run
    return make


OPS = {
    "strip_pool_h": (_pool_runner(P.strip_pool_h), _strip_h_cost),
    "strip_pool_v": (_pool_runner(P.strip_pool_v), _strip_v_cost),
    "avg_pool2d": (_pool_runner(lambda x: P.avg_pool2d(x, P.PoolWindow(2, 2))), _avg_cost),
    "adaptive_avg_pool2d": (_pool_runner(lambda x: P.adaptive_avg_pool2d(
        x, P.BinGrid(min(6, x.shape[2]), min(6, x.shape[3])))), _adaptive_cost),
    "global_avg_pool": (_pool_runner(P.global_avg_pool), _global_cost),
    "spm_forward": (_spm_runner, _spm_cost),
    "affinity": (lambda shape: _affinity, _affinity_cost),
}


def estimate(op: str, shape) -> tuple[int, int]:
    """(flop estimate, intermediate memory entries) without running anything."""
    if op not in OPS:
        raise ConfigError(f"unknown bench op {op!r}; choose from {', '.join(OPS)}")
    return OPS[op][1](*shape)


def bench(op: str, shape, reps: int = MIN_REPS, seed: int = 0) -> BenchRecord:
    if op not in OPS:
        raise ConfigError(f"unknown bench op {op!r}; choose from {', '.join(OPS)}")
    if reps < MIN_REPS:
        raise ConfigError(f"bench needs reps >= {MIN_REPS}, got {reps}")
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or min(shape) < 1:
        raise ConfigError(f"bench shape must be 4 positive ints N,C,H,W, got {shape}")
    if op == "avg_pool2d" and (shape[2] % 2 or shape[3] % 2):
        raise ConfigError(f"avg_pool2d bench uses a 2x2 window; extents {shape[2:]} must be even")
    make, cost = OPS[op]
    run = make(shape)
    x = np.random.default_rng(seed).standard_normal(shape).astype(T.DTYPE)
    for _ in range(WARMUP):
        run(x)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        run(x)
        times.append(time.perf_counter() - t0)
    flops, mem = cost(*shape)
    return BenchRecord(op, shape, reps, median(times), flops, mem)


def fit_exponent(records: list[BenchRecord]) -> float:
    """Slope of log(median time) against log(H*W)."""
    hw = np.log([r.shape[2] * r.shape[3] for r in records])
    t = np.log([r.median_s for r in records])
    return float(np.polyfit(hw, t, 1)[0])


def to_csv(records: list[BenchRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["op", "shape", "reps", "median_s", "flops", "memory_entries"])
    for r in records:
        writer.writerow([r.op, "x".join(map(str, r.shape)), r.reps, f"{r.median_s:.6e}", r.flops, r.memory_entries])
    return buf.getvalue()
