"""Central finite-difference checks for every differentiable op and module.

Each check draws random float64 inputs, reduces the op output to a scalar
with a fixed random weighting (so linear ops get non-uniform upstream grads)
and compares analytic grads with central differences at sampled coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import blocks
from . import pooling as P
from . import tensor as T

STEP = 1e-3
REL_TOL = 1e-3
MIN_GRAD = 1e-4
# a check with more kink-skipped coordinates than this fraction fails outright
MAX_SKIP_FRACTION = 0.25


@dataclass
class CheckResult:
    op: str
    trials: int
    max_rel_err: float
    checked: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        total = self.checked + self.skipped
        return (self.max_rel_err < REL_TOL and self.checked > 0
                and self.skipped <= MAX_SKIP_FRACTION * total)


def _leaf(rng, shape, low=-1.0, high=1.0, away_from_zero=0.0):
    v = rng.uniform(low, high, size=shape)
    if away_from_zero:
        v = np.where(np.abs(v) < away_from_zero, np.sign(v + 1e-12) * away_from_zero + v, v)
    return T.Node(v.astype(np.float64), requires_grad=True)


def _module_case(module, shape, train=False, spread=1.0):
    # Composite modules run with batchnorm in eval mode (an affine map with
    # randomised running stats). In train mode a post-relu channel can have a
    # variance near eps, where 1/sqrt(var + eps) bends on a scale far below the
    # 1e-3 step; the train-mode normaliser has its own check above.
    def build(rng):
        module.materialize(int(rng.integers(1 << 30)))
        for p in module.parameters():
            p.value = p.value.astype(np.float64) + 0.1 * rng.standard_normal(p.shape)
        for _, st in module.named_stats():
            st.mean = rng.uniform(-0.5, 0.5, st.mean.shape)
            st.var = rng.uniform(0.5, 1.5, st.var.shape)
        x = _leaf(rng, shape, -spread, spread)
        return [x] + module.parameters(), lambda: module(x, train)
    return build


def _case(make_inputs, fn):
    def build(rng):
        inputs = make_inputs(rng)
        return inputs, lambda: fn(*inputs)
    return build


def _bn_case(train):
    def build(rng):
        x = _leaf(rng, (3, 2, 3, 3))
        g = _leaf(rng, (2,), 0.5, 1.5)
        b = _leaf(rng, (2,))
        stats = T.RunningStats(2)
        stats.mean = rng.uniform(-0.5, 0.5, 2)
        stats.var = rng.uniform(0.5, 1.5, 2)
        return [x, g, b], lambda: T.batchnorm2d(x, g, b, stats, train)
    return build


def _ce_case(rng):
    x = _leaf(rng, (2, 4, 3, 3), -2, 2)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 0, 0] = 255
    return [x], lambda: T.cross_entropy(x, labels)


REGISTRY: dict[str, Callable] = {
    "conv2d": _case(lambda r: [_leaf(r, (2, 3, 6, 5)), _leaf(r, (4, 3, 3, 3)), _leaf(r, (4,))],
                    lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1)),
    "conv2d_strided_dilated": _case(lambda r: [_leaf(r, (1, 2, 9, 9)), _leaf(r, (3, 2, 3, 3))],
                                    lambda x, w: T.conv2d(x, w, None, stride=2, padding=2, dilation=2)),
    "conv1d_along": _case(lambda r: [_leaf(r, (2, 3, 7)), _leaf(r, (3, 3, 3)), _leaf(r, (3,))],
                          lambda x, w, b: T.conv1d_along(x, w, b)),
    "batchnorm2d": _bn_case(True),
    "batchnorm2d_eval": _bn_case(False),
    "relu": _case(lambda r: [_leaf(r, (2, 3, 4, 4), away_from_zero=0.05)], T.relu),
    "sigmoid": _case(lambda r: [_leaf(r, (2, 3, 4, 4), -3, 3)], T.sigmoid),
    "add": _case(lambda r: [_leaf(r, (2, 3, 4, 5)), _leaf(r, (2, 3, 4, 5))], T.add),
    "add_broadcast": _case(lambda r: [_leaf(r, (2, 3, 4, 1)), _leaf(r, (2, 3, 1, 5))], T.add),
    "mul": _case(lambda r: [_leaf(r, (2, 3, 4, 5)), _leaf(r, (2, 3, 4, 5))], T.mul),
    "mul_broadcast": _case(lambda r: [_leaf(r, (2, 3, 4, 5)), _leaf(r, (2, 3, 4, 1))], T.mul),
    "concat_channels": _case(lambda r: [_leaf(r, (2, 2, 3, 3)), _leaf(r, (2, 3, 3, 3))], T.concat_channels),
    "bilinear_upsample": _case(lambda r: [_leaf(r, (1, 2, 3, 3))], lambda x: T.bilinear_upsample(x, 6, 7)),
    "cross_entropy": _ce_case,
    "avg_pool2d": _case(lambda r: [_leaf(r, (2, 2, 6, 4))], lambda x: P.avg_pool2d(x, P.PoolWindow(3, 2))),
    "strip_pool_h": _case(lambda r: [_leaf(r, (2, 3, 5, 6))], P.strip_pool_h),
    "strip_pool_v": _case(lambda r: [_leaf(r, (2, 3, 5, 6))], P.strip_pool_v),
    "adaptive_avg_pool2d": _case(lambda r: [_leaf(r, (1, 2, 7, 5))],
                                 lambda x: P.adaptive_avg_pool2d(x, P.BinGrid(3, 2))),
    "global_avg_pool": _case(lambda r: [_leaf(r, (2, 3, 4, 5))], P.global_avg_pool),
    "spm": _module_case(blocks.StripPoolingModule(3), (2, 3, 5, 4)),
    "se_gate": _module_case(blocks.GlobalPoolingGate(3), (2, 3, 5, 4)),
    "srd": _module_case(blocks.ShortRangeBranch(2, bins=(4, 3)), (2, 2, 8, 9)),
    "lrd": _module_case(blocks.LongRangeBranch(2), (2, 2, 8, 7)),
    "mpm": _module_case(blocks.MixedPoolingModule(8), (2, 8, 8, 7)),
}


def _break_adjoint(out: T.Node) -> T.Node:
    rule = out.backward_rule
    out.backward_rule = lambda g: [None if pg is None else 0.9 * pg for pg in rule(g)]
    return out


def check(name: str, trials: int = 20, seed: int = 0, max_coords: int = 24, broken: bool = False) -> CheckResult:
    build = REGISTRY[name]
    rng = np.random.default_rng([seed, len(name)])
    worst = 0.0
    checked = skipped = 0
    for _ in range(trials):
        inputs, fn = build(rng)
        with T.record_kinks() as base_pattern:
            out0 = fn()
        weights = rng.uniform(0.5, 1.5, size=out0.shape)

        def loss_value():
            with T.record_kinks() as pattern:
                v = float((fn().value * weights).sum())
            return v, pattern == base_pattern

        for p in inputs:
            p.grad = None
        out = fn()
        if broken:
            out = _break_adjoint(out)
        T.backward(T.sum_all(T.mul(out, T.const(weights))))
        for node in inputs:
            analytic = node.grad if node.grad is not None else np.zeros_like(node.value)
            flat = node.value.reshape(-1)
            coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
            for i in coords:
                a = float(analytic.reshape(-1)[i])
                if abs(a) <= MIN_GRAD:
                    continue
                orig = flat[i]
                flat[i] = orig + STEP
                up, same_up = loss_value()
                flat[i] = orig - STEP
                down, same_down = loss_value()
                flat[i] = orig
                if not (same_up and same_down):
                    # a relu switched inside the stencil: the difference quotient is not a derivative
                    skipped += 1
                    continue
                num = (up - down) / (2 * STEP)
                worst = max(worst, abs(a - num) / max(abs(a), abs(num)))
                checked += 1
    return CheckResult(name, trials, worst, checked, skipped)


def check_all(trials: int = 20, seed: int = 0) -> list[CheckResult]:
    return [check(name, trials, seed) for name in REGISTRY]
