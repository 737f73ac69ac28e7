"""Average, strip, adaptive and global pooling over [N,C,H,W] nodes."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from math import ceil, floor

import numpy as np

from .tensor import ConfigError, Node, _make


@dataclass(frozen=True)
class PoolWindow:
    h: int
    w: int


@dataclass(frozen=True)
class BinGrid:
    bins_h: int
    bins_w: int


def _check_rank4(x: Node, op: str):
    if x.value.ndim != 4:
        raise ConfigError(f"{op}: expected [N,C,H,W] input, got {x.shape}")


def bin_bounds(size: int, bins: int) -> list[tuple[int, int]]:
    """Row (or column) ranges [floor(a*S/B), ceil((a+1)*S/B)) of each adaptive bin."""
    return [(floor(a * size / bins), ceil((a + 1) * size / bins)) for a in range(bins)]


@functools.lru_cache(maxsize=256)
def _bin_matrix(size: int, bins: int, dtype) -> np.ndarray:
    m = np.zeros((bins, size), dtype=np.float64)
    for a, (lo, hi) in enumerate(bin_bounds(size, bins)):
        m[a, lo:hi] = 1.0 / (hi - lo)
    m = m.astype(dtype)
    m.flags.writeable = False
    return m


def _separable(x: Node, ph: np.ndarray, pw: np.ndarray) -> Node:
    out = np.matmul(np.matmul(ph, x.value), pw.T)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(ph.T, g), pw),))


def avg_pool2d(x: Node, window: PoolWindow) -> Node:
    """Mean over disjoint h x w windows; extents must divide evenly."""
    _check_rank4(x, "avg_pool2d")
    n, c, h, w = x.shape
    if h % window.h or w % window.w:
        raise ConfigError(
            f"avg_pool2d: window {window.h}x{window.w} does not divide {h}x{w}; use adaptive_avg_pool2d"
        )
    ho, wo = h // window.h, w // window.w
    out = x.value.reshape(n, c, ho, window.h, wo, window.w).mean(axis=(3, 5))
    area = window.h * window.w

    def rule(g):
        up = np.repeat(np.repeat(g, window.h, axis=2), window.w, axis=3)
        return (up / g.dtype.type(area),)

    return _make(out, (x,), rule)


def _last_axis_mean(a: np.ndarray) -> np.ndarray:
    # one reduction kernel for both strip directions keeps them transpose-exact
    a = np.ascontiguousarray(a)
    return a.sum(axis=-1, keepdims=True) / a.dtype.type(a.shape[-1])


def strip_pool_h(x: Node) -> Node:
    """Row means: [N,C,H,W] -> [N,C,H,1]."""
    _check_rank4(x, "strip_pool_h")
    w = x.shape[3]
    shape = x.shape
    return _make(_last_axis_mean(x.value), (x,),
                 lambda g: (np.broadcast_to(g / g.dtype.type(w), shape),))


def strip_pool_v(x: Node) -> Node:
    """Column means: [N,C,H,W] -> [N,C,1,W]."""
    _check_rank4(x, "strip_pool_v")
    h = x.shape[2]
    shape = x.shape
    out = _last_axis_mean(x.value.swapaxes(2, 3)).swapaxes(2, 3)
    return _make(np.ascontiguousarray(out), (x,),
                 lambda g: (np.broadcast_to(g / g.dtype.type(h), shape),))


def adaptive_avg_pool2d(x: Node, grid: BinGrid) -> Node:
    """Overlapping floor/ceil bins; reduces to avg_pool2d when extents divide."""
    _check_rank4(x, "adaptive_avg_pool2d")
    _, _, h, w = x.shape
    if grid.bins_h > h or grid.bins_w > w or grid.bins_h < 1 or grid.bins_w < 1:
        raise ConfigError(f"adaptive_avg_pool2d: grid {grid.bins_h}x{grid.bins_w} invalid for input {x.shape}")
    dt = x.value.dtype.str
    return _separable(x, _bin_matrix(h, grid.bins_h, dt), _bin_matrix(w, grid.bins_w, dt))


def global_avg_pool(x: Node) -> Node:
    _check_rank4(x, "global_avg_pool")
    return adaptive_avg_pool2d(x, BinGrid(1, 1))
