"""Parameterised building blocks: conv layers, the strip pooling gate, the
global-pooling gate used as an ablation baseline, and the mixed pooling
residual block with its short- and long-range branches.

Modules are declared shape-first. Building a module tree allocates nothing;
``materialize`` fills parameters from a seed, so parameter audits at full
width cost no memory.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pooling import BinGrid, adaptive_avg_pool2d, global_avg_pool, strip_pool_h, strip_pool_v
from .tensor import ConfigError, Node, RunningStats

log = logging.getLogger(__name__)

PYRAMID_BINS = (20, 12)


class Module:
    """Container of declared parameters, running stats and child modules."""

    def __init__(self):
        self._decl: dict[str, tuple[tuple[int, ...], str, int]] = {}
        self.params: dict[str, Node] = {}
        self.stats: dict[str, RunningStats] = {}
        self.children: dict[str, Module] = {}

    def declare(self, name, shape, init="kaiming", fan_in=1):
        self._decl[name] = (tuple(shape), init, fan_in)

    def add(self, name, module):
        self.children[name] = module
        return module

    def named_shapes(self, prefix=""):
        for name, (shape, _, _) in self._decl.items():
            yield prefix + name, shape
        for cname, child in self.children.items():
            yield from child.named_shapes(f"{prefix}{cname}.")

    def named_parameters(self, prefix=""):
        for name, node in self.params.items():
            yield prefix + name, node
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_stats(self, prefix=""):
        for name, st in self.stats.items():
            yield prefix + name, st
        for cname, child in self.children.items():
            yield from child.named_stats(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for child in self.children.values():
            yield from child.modules()

    def materialize(self, seed: int, prefix=""):
        for name, (shape, init, fan_in) in self._decl.items():
            full = prefix + name
            if init == "kaiming":
                value = T.kaiming_uniform(shape, fan_in, T.rng_for(seed, full))
            elif init == "ones":
                value = np.ones(shape, dtype=T.DTYPE)
            else:
                value = np.zeros(shape, dtype=T.DTYPE)
            self.params[name] = T.param(value, name=full)
        for cname, child in self.children.items():
            child.materialize(seed, f"{prefix}{cname}.")
        return self

    def __getitem__(self, name) -> Node:
        return self.params[name]


def param_count(module: Module) -> int:
    """Exact number of trainable scalars declared by a module tree."""
    return int(sum(np.prod(shape) for _, shape in module.named_shapes()))


class ConvBN(Module):
    """conv (no bias) -> batchnorm -> activation; 2-D or 1-D along the last axis."""

    def __init__(self, cin, cout, k, stride=1, dilation=1, act="relu", dim=2):
        super().__init__()
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.dilation, self.act, self.dim = stride, dilation, act, dim
        wshape = (cout, cin, k, k) if dim == 2 else (cout, cin, k)
        self.declare("weight", wshape, "kaiming", cin * k ** dim)
        self.declare("bn.gamma", (cout,), "ones")
        self.declare("bn.beta", (cout,), "zeros")
        self.stats["bn"] = RunningStats(cout)

    def __call__(self, x: Node, train: bool) -> Node:
        if self.dim == 2:
            pad = self.dilation * (self.k - 1) // 2
            y = T.conv2d(x, self["weight"], None, self.stride, pad, self.dilation)
        else:
            y = T.conv1d_along(x, self["weight"])
        y = T.batchnorm2d(y, self["bn.gamma"], self["bn.beta"], self.stats["bn"], train)
        if self.act == "relu":
            return T.relu(y)
        if self.act == "sigmoid":
            return T.sigmoid(y)
        return y


class Conv(Module):
    """Standalone conv with bias (no normalisation follows it)."""

    def __init__(self, cin, cout, k, dim=2):
        super().__init__()
        self.k, self.dim = k, dim
        wshape = (cout, cin, k, k) if dim == 2 else (cout, cin, k)
        self.declare("weight", wshape, "kaiming", cin * k ** dim)
        self.declare("bias", (cout,), "zeros")

    def __call__(self, x: Node, train: bool = False) -> Node:
        if self.dim == 2:
            return T.conv2d(x, self["weight"], self["bias"], 1, (self.k - 1) // 2, 1)
        return T.conv1d_along(x, self["weight"], self["bias"])


@dataclass
class GateStats:
    min: float
    max: float
    mean: float


def _gate_stats(gate: Node) -> GateStats:
    v = gate.value
    return GateStats(float(v.min()), float(v.max()), float(v.mean()))


class StripPoolingModule(Module):
    """Row and column mean profiles, each filtered by a kernel-3 1-D conv, summed
    back to full resolution and turned into a sigmoid gate on the input."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv_h = self.add("conv_h", ConvBN(channels, channels, 3, dim=1))
        self.conv_v = self.add("conv_v", ConvBN(channels, channels, 3, dim=1))
        self.fuse = self.add("fuse", ConvBN(channels, channels, 1, act="sigmoid"))
        self.force_open = False
        self.last: dict[str, Node] = {}
        self.gate_stats: GateStats | None = None

    def profiles(self, x: Node, train: bool):
        n, c, h, w = x.shape
        yh = self.conv_h(T.reshape(strip_pool_h(x), (n, c, h)), train)
        yv = self.conv_v(T.reshape(strip_pool_v(x), (n, c, w)), train)
        return T.reshape(yh, (n, c, h, 1)), T.reshape(yv, (n, c, 1, w))

    def __call__(self, x: Node, train: bool) -> Node:
        if x.value.ndim != 4 or x.shape[1] != self.channels:
            raise ConfigError(f"strip pooling module expects {self.channels} channels, got input {x.shape}")
        yh, yv = self.profiles(x, train)
        y = T.add(yh, yv)
        gate = self.fuse(y, train)
        self.last = {"y_h": yh, "y_v": yv, "y": y, "gate": gate}
        self.gate_stats = _gate_stats(gate)
        if self.force_open:
            gate = T.const(np.ones_like(gate.value))
        return T.mul(x, gate)


class GlobalPoolingGate(Module):
    """The strip gate with both strip pools replaced by global average pooling.

    Its convs act on length-1 sequences, so they carry biases and no batchnorm
    (batch statistics over N*1 values are degenerate at batch size 1).
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv_h = self.add("conv_h", Conv(channels, channels, 3, dim=1))
        self.conv_v = self.add("conv_v", Conv(channels, channels, 3, dim=1))
        self.fuse = self.add("fuse", Conv(channels, channels, 1))
        self.force_open = False
        self.last: dict[str, Node] = {}
        self.gate_stats: GateStats | None = None

    def __call__(self, x: Node, train: bool) -> Node:
        if x.value.ndim != 4 or x.shape[1] != self.channels:
            raise ConfigError(f"global pooling gate expects {self.channels} channels, got input {x.shape}")
        n, c = x.shape[:2]
        pooled = T.reshape(global_avg_pool(x), (n, c, 1))
        yh = T.relu(self.conv_h(pooled))
        yv = T.relu(self.conv_v(pooled))
        y = T.reshape(T.add(yh, yv), (n, c, 1, 1))
        gate = T.sigmoid(self.fuse(y))
        self.last = {"y": y, "gate": gate}
        self.gate_stats = _gate_stats(gate)
        if self.force_open:
            gate = T.const(np.ones_like(gate.value))
        return T.mul(x, gate)


def clamp_bins(h: int, w: int, bins=PYRAMID_BINS) -> list[BinGrid]:
    return [BinGrid(min(b, h), min(b, w)) for b in bins]


class ShortRangeBranch(Module):
    """Two adaptive pyramid paths (20x20, 12x12 bins) plus a full-resolution
    3x3 path, summed, then a 3x3 fusion conv."""

    def __init__(self, channels: int, bins=PYRAMID_BINS):
        super().__init__()
        self.bins = tuple(bins)
        self.pool_convs = [self.add(f"pool{b}", ConvBN(channels, channels, 3)) for b in self.bins]
        self.direct = self.add("direct", ConvBN(channels, channels, 3))
        self.fusion = self.add("fusion", ConvBN(channels, channels, 3))
        self.last: dict[str, Node] = {}

    def __call__(self, x: Node, train: bool) -> Node:
        _, _, h, w = x.shape
        total = self.direct(x, train)
        self.last = {"direct": total}
        for b, grid, conv in zip(self.bins, clamp_bins(h, w, self.bins), self.pool_convs):
            path = T.bilinear_upsample(conv(adaptive_avg_pool2d(x, grid), train), h, w)
            self.last[f"pool{b}"] = path
            total = T.add(total, path)
        self.last["sum"] = total
        return self.fusion(total, train)


class LongRangeBranch(Module):
    """Horizontal and vertical strip profiles, 1-D filtered, broadcast back and
    summed, then a 3x3 fusion conv."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv_h = self.add("conv_h", ConvBN(channels, channels, 3, dim=1))
        self.conv_v = self.add("conv_v", ConvBN(channels, channels, 3, dim=1))
        self.fusion = self.add("fusion", ConvBN(channels, channels, 3))
        self.last: dict[str, Node] = {}

    def __call__(self, x: Node, train: bool) -> Node:
        n, c, h, w = x.shape
        yh = T.reshape(self.conv_h(T.reshape(strip_pool_h(x), (n, c, h)), train), (n, c, h, 1))
        yv = T.reshape(self.conv_v(T.reshape(strip_pool_v(x), (n, c, w)), train), (n, c, 1, w))
        total = T.add(yh, yv)
        self.last = {"y_h": yh, "y_v": yv, "sum": total}
        return self.fusion(total, train)


class MixedPoolingModule(Module):
    """Residual bottleneck: 1x1 reductions into each branch, concat, 1x1 expansion,
    identity shortcut. ``branches`` selects "both", "srd" or "lrd"."""

    def __init__(self, in_channels: int, branches: str = "both"):
        super().__init__()
        if in_channels % 4:
            raise ConfigError(f"mixed pooling module needs in_channels divisible by 4, got {in_channels}")
        if branches not in ("both", "srd", "lrd"):
            raise ConfigError(f"unknown mixed pooling branches {branches!r}")
        self.in_channels = in_channels
        self.branches = branches
        b = in_channels // 4
        self.bottleneck = b
        width = 0
        if branches in ("both", "srd"):
            self.reduce_srd = self.add("reduce_srd", ConvBN(in_channels, b, 1))
            self.srd = self.add("srd", ShortRangeBranch(b))
            width += b
        if branches in ("both", "lrd"):
            self.reduce_lrd = self.add("reduce_lrd", ConvBN(in_channels, b, 1))
            self.lrd = self.add("lrd", LongRangeBranch(b))
            width += b
        self.expand = self.add("expand", ConvBN(width, in_channels, 1, act=None))

    def __call__(self, x: Node, train: bool) -> Node:
        if x.value.ndim != 4 or x.shape[1] != self.in_channels:
            raise ConfigError(f"mixed pooling module expects {self.in_channels} channels, got input {x.shape}")
        outs = []
        if self.branches in ("both", "srd"):
            outs.append(self.srd(self.reduce_srd(x, train), train))
        if self.branches in ("both", "lrd"):
            outs.append(self.lrd(self.reduce_lrd(x, train), train))
        mixed = outs[0] if len(outs) == 1 else T.concat_channels(*outs)
        return T.add(x, self.expand(mixed, train))
