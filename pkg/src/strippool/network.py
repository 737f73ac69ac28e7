"""Dilated residual backbone with optional strip gates, a mixed-pooling head
and prediction/auxiliary classifiers."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .blocks import (
    PYRAMID_BINS,
    Conv,
    ConvBN,
    GlobalPoolingGate,
    MixedPoolingModule,
    Module,
    StripPoolingModule,
    param_count,
)
from .tensor import ConfigError, Node

log = logging.getLogger(__name__)

OUTPUT_STRIDE = 8


@dataclass
class BackboneSpec:
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    blocks: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    dilations: list[int] = field(default_factory=lambda: [1, 1, 2, 4])
    stem_width: int = 16

    def stage_strides(self) -> list[int]:
        return [1] + [2 if d == 1 else 1 for d in self.dilations[1:]]

    def validate(self):
        for name in ("widths", "blocks", "dilations"):
            v = getattr(self, name)
            if len(v) != 4 or any(int(x) < 1 for x in v):
                raise ConfigError(f"backbone.{name} must be 4 positive ints, got {v}")
        if any(w % 4 for w in self.widths):
            raise ConfigError(f"backbone.widths must be divisible by 4, got {self.widths}")
        if self.stem_width < 1:
            raise ConfigError(f"backbone.stem_width must be positive, got {self.stem_width}")
        stride = 4 * int(np.prod(self.stage_strides()))
        if stride != OUTPUT_STRIDE:
            raise ConfigError(f"backbone.dilations {self.dilations} give output stride {stride}, need 8")


@dataclass
class SpmPlacement:
    enabled: bool = False
    last_block_per_stage: bool = True
    all_blocks_last_stage: bool = True
    gate: str = "strip"

    def validate(self):
        if self.enabled and not (self.last_block_per_stage or self.all_blocks_last_stage):
            raise ConfigError("placement: enabled gates need last_block_per_stage or all_blocks_last_stage")
        if self.gate not in ("strip", "global"):
            raise ConfigError(f"placement.gate must be 'strip' or 'global', got {self.gate!r}")

    def wants(self, stage: int, block: int, n_blocks: int) -> bool:
        if not self.enabled:
            return False
        if self.last_block_per_stage and block == n_blocks - 1:
            return True
        return self.all_blocks_last_stage and stage == 3


@dataclass
class HeadSpec:
    neck_width: int = 64
    mpm_count: int = 2
    num_classes: int = 6
    aux_stage: int = 3
    aux_width: int = 0
    mpm_branches: str = "both"

    def validate(self):
        if self.num_classes < 1:
            raise ConfigError(f"head.num_classes must be positive, got {self.num_classes}")
        if self.mpm_count < 0:
            raise ConfigError(f"head.mpm_count must be >= 0, got {self.mpm_count}")
        if self.neck_width < 1 or (self.mpm_count > 0 and self.neck_width % 4):
            raise ConfigError(f"head.neck_width must be divisible by 4 with mixed pooling, got {self.neck_width}")
        if self.aux_stage not in (0, 1, 2, 3, 4):
            raise ConfigError(f"head.aux_stage must be 0 (off) or 1..4, got {self.aux_stage}")
        if self.mpm_branches not in ("both", "srd", "lrd"):
            raise ConfigError(f"head.mpm_branches must be both/srd/lrd, got {self.mpm_branches!r}")


@dataclass
class NetworkSpec:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    placement: SpmPlacement = field(default_factory=SpmPlacement)
    head: HeadSpec = field(default_factory=HeadSpec)

    def validate(self):
        self.backbone.validate()
        self.placement.validate()
        self.head.validate()
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        parts = {"backbone": BackboneSpec, "placement": SpmPlacement, "head": HeadSpec}
        _reject_unknown(d, parts, "network")
        kwargs = {}
        for key, typ in parts.items():
            sub = d.get(key, {})
            _reject_unknown(sub, {f.name for f in fields(typ)}, f"network.{key}")
            kwargs[key] = typ(**sub)
        return cls(**kwargs).validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> NetworkSpec:
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"network spec is not valid JSON: {e}") from e
        return cls.from_dict(d)


def _reject_unknown(d, known, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    extra = sorted(set(d) - set(known))
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(extra)}")


class Bottleneck(Module):
    """1x1 reduce -> 3x3 (strided or dilated) -> optional gate -> 1x1 expand, plus shortcut."""

    def __init__(self, cin, width, stride=1, dilation=1, gate: str | None = None):
        super().__init__()
        mid = width // 4
        self.conv1 = self.add("conv1", ConvBN(cin, mid, 1))
        self.conv2 = self.add("conv2", ConvBN(mid, mid, 3, stride=stride, dilation=dilation))
        self.gate = None
        if gate == "strip":
            self.gate = self.add("spm", StripPoolingModule(mid))
        elif gate == "global":
            self.gate = self.add("se", GlobalPoolingGate(mid))
        self.conv3 = self.add("conv3", ConvBN(mid, width, 1, act=None))
        self.shortcut = None
        if cin != width or stride != 1:
            self.shortcut = self.add("shortcut", ConvBN(cin, width, 1, stride=stride, act=None))

    def __call__(self, x: Node, train: bool) -> Node:
        y = self.conv2(self.conv1(x, train), train)
        if self.gate is not None:
            y = self.gate(y, train)
        y = self.conv3(y, train)
        short = x if self.shortcut is None else self.shortcut(x, train)
        return T.relu(T.add(y, short))


class SegmentationNet(Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        bb, pl, hd = spec.backbone, spec.placement, spec.head
        self.stem1 = self.add("stem1", ConvBN(3, bb.stem_width, 3, stride=2))
        self.stem2 = self.add("stem2", ConvBN(bb.stem_width, bb.stem_width, 3, stride=2))
        self.stages: list[list[Bottleneck]] = []
        cin = bb.stem_width
        for s, (width, n, dil, stride) in enumerate(zip(bb.widths, bb.blocks, bb.dilations, bb.stage_strides())):
            stage = []
            for b in range(n):
                gate = pl.gate if pl.wants(s, b, n) else None
                blk = Bottleneck(cin, width, stride if b == 0 else 1, dil, gate)
                stage.append(self.add(f"stage{s + 1}.block{b}", blk))
                cin = width
            self.stages.append(stage)
        self.neck = self.add("head.neck", ConvBN(cin, hd.neck_width, 1))
        self.mpms = [
            self.add(f"head.mpm{i}", MixedPoolingModule(hd.neck_width, hd.mpm_branches))
            for i in range(hd.mpm_count)
        ]
        self.predict = self.add("head.predict", Conv(hd.neck_width, hd.num_classes, 1))
        self.aux = None
        if hd.aux_stage:
            attach = bb.widths[hd.aux_stage - 1]
            aw = hd.aux_width or max(attach // 4, 1)
            self.aux = self.add("aux.conv", ConvBN(attach, aw, 3))
            self.aux_predict = self.add("aux.predict", Conv(aw, hd.num_classes, 1))
        self._clamp_logged: set[tuple[int, int]] = set()

    def gates(self):
        return [m for m in self.modules() if isinstance(m, (StripPoolingModule, GlobalPoolingGate))]

    def set_gates_open(self, value: bool):
        for g in self.gates():
            g.force_open = value

    def _log_clamp(self, h, w):
        if not self.mpms or (h, w) in self._clamp_logged:
            return
        self._clamp_logged.add((h, w))
        for b in PYRAMID_BINS:
            if b > h or b > w:
                log.info("pyramid bins %dx%d clamped to %dx%d for %dx%d features",
                         b, b, min(b, h), min(b, w), h, w)

    def forward(self, image, train: bool, with_aux: bool = True):
        """Return (main_logits, aux_logits) at input resolution; aux may be None."""
        x = image if isinstance(image, Node) else T.const(np.asarray(image, dtype=T.DTYPE))
        if x.value.ndim != 4 or x.shape[1] != 3:
            raise ConfigError(f"expected [N,3,H,W] image, got {x.shape}")
        h, w = x.shape[2:]
        if h < OUTPUT_STRIDE or w < OUTPUT_STRIDE or h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
            raise ConfigError(f"image extents {h}x{w} must be >= 8 and divisible by 8")
        y = self.stem2(self.stem1(x, train), train)
        aux_in = None
        for s, stage in enumerate(self.stages):
            for blk in stage:
                y = blk(y, train)
            if self.aux is not None and s + 1 == self.spec.head.aux_stage:
                aux_in = y
        y = self.neck(y, train)
        self._log_clamp(*y.shape[2:])
        for mpm in self.mpms:
            y = mpm(y, train)
        main = T.bilinear_upsample(self.predict(y), h, w)
        aux = None
        if with_aux and aux_in is not None:
            aux = T.bilinear_upsample(self.aux_predict(self.aux(aux_in, train)), h, w)
        return main, aux

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.value for name, p in self.named_parameters()}
        for name, st in self.named_stats():
            state[f"{name}.running_mean"] = st.mean
            state[f"{name}.running_var"] = st.var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        expected = {}
        for name, p in self.named_parameters():
            expected[name] = p
        for name, st in self.named_stats():
            expected[f"{name}.running_mean"] = st
            expected[f"{name}.running_var"] = st
        for name in expected:
            if name not in state:
                raise ConfigError(f"checkpoint is missing tensor {name}")
        for name, target in expected.items():
            value = np.asarray(state[name], dtype=T.DTYPE)
            if name.endswith(".running_mean") or name.endswith(".running_var"):
                want = target.mean.shape
            else:
                want = target.shape
            if value.shape != want:
                raise ConfigError(f"checkpoint tensor {name} has shape {value.shape}, network expects {want}")
            if name.endswith(".running_mean"):
                target.mean = value.copy()
            elif name.endswith(".running_var"):
                target.var = value.copy()
            else:
                target.value = value.copy()
        extra = sorted(set(state) - set(expected))
        if extra:
            raise ConfigError(f"checkpoint has unexpected tensor {extra[0]}")


def build_spnet(backbone: BackboneSpec, placement: SpmPlacement, head: HeadSpec,
                seed: int = 0, materialize: bool = True) -> SegmentationNet:
    spec = NetworkSpec(backbone, placement, head).validate()
    if head.aux_stage:
        log.info("auxiliary head attached after stage %d", head.aux_stage)
    net = SegmentationNet(spec)
    if materialize:
        net.materialize(seed)
    return net


def build_from_spec(spec: NetworkSpec, seed: int = 0, materialize: bool = True) -> SegmentationNet:
    return build_spnet(spec.backbone, spec.placement, spec.head, seed, materialize)


PRESETS = ("base-fcn", "1mpm", "2mpm", "2mpm+spm", "srd-only", "lrd-only", "se-baseline")

TOY_BACKBONE = dict(widths=[16, 32, 64, 128], blocks=[1, 1, 1, 1], dilations=[1, 1, 2, 4], stem_width=16)
FULL_BACKBONE = dict(widths=[256, 512, 1024, 2048], blocks=[3, 4, 6, 3], dilations=[1, 1, 2, 4], stem_width=64)


def preset_spec(name: str, scale: str = "toy", num_classes: int = 6,
                backbone: BackboneSpec | None = None, neck_width: int | None = None) -> NetworkSpec:
    """Map an ablation row onto a network spec."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    if backbone is None:
        backbone = BackboneSpec(**(FULL_BACKBONE if scale == "full" else TOY_BACKBONE))
    if neck_width is None:
        neck_width = backbone.widths[-1] // 2
    mpm_count = {"base-fcn": 0, "1mpm": 1}.get(name, 2)
    branches = {"srd-only": "srd", "lrd-only": "lrd"}.get(name, "both")
    placement = SpmPlacement(enabled=name in ("2mpm+spm", "se-baseline"),
                             gate="global" if name == "se-baseline" else "strip")
    head = HeadSpec(neck_width=neck_width, mpm_count=mpm_count, num_classes=num_classes,
                    mpm_branches=branches)
    return NetworkSpec(backbone, placement, head).validate()


def block_counts(net: SegmentationNet) -> dict[str, int]:
    """Trainable scalars grouped by top-level block (stem, stageN, head parts, aux)."""
    counts: dict[str, int] = {}
    for name, child in net.children.items():
        key = name.split(".")[0] if name.startswith("stage") else name
        counts[key] = counts.get(key, 0) + param_count(child)
    return counts
