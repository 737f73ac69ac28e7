"""Toy-scale ablation runs: every preset trains on the same corpus, schedule and seed."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .blocks import param_count
from .data import SyntheticSceneSpec, make_corpus
from .evaluate import MetricReport, evaluate
from .network import PRESETS, build_from_spec, preset_spec
from .tensor import ConfigError
from .train import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass
class AblationResult:
    preset: str
    report: MetricReport
    params: int
    params_full: int
    delta_full: int
    seconds: float
    history: list = field(repr=False, default_factory=list)


def param_summary(preset: str, num_classes: int = 6, neck_width: int | None = None) -> dict[str, int]:
    """Toy and full-width counts plus the full-width delta over base-fcn."""
    toy = param_count(build_from_spec(preset_spec(preset, "toy", num_classes, neck_width=neck_width),
                                      materialize=False))
    full = param_count(build_from_spec(preset_spec(preset, "full", num_classes), materialize=False))
    base = param_count(build_from_spec(preset_spec("base-fcn", "full", num_classes), materialize=False))
    return {"toy": toy, "full": full, "delta_full": full - base}


def run_ablation(preset: str, cfg: TrainConfig, scene: SyntheticSceneSpec | None = None,
                 train_size: int = 512, test_size: int = 128, net_seed: int | None = None,
                 neck_width: int | None = None) -> AblationResult:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    scene = (scene or SyntheticSceneSpec()).validate()
    corpus = make_corpus(scene, train_size, seed=scene.seed)
    held_out = make_corpus(scene, test_size, seed=scene.seed + 10_000)
    seed = cfg.seed if net_seed is None else net_seed
    net = build_from_spec(preset_spec(preset, "toy", scene.num_classes, neck_width=neck_width), seed=seed)
    t0 = time.perf_counter()
    history = train(net, cfg, corpus)
    report = evaluate(net, held_out, scene.num_classes)
    summary = param_summary(preset, scene.num_classes, neck_width)
    elapsed = time.perf_counter() - t0
    log.info("%s seed=%d miou=%.4f acc=%.4f (%.0fs)", preset, seed, report.miou, report.pixel_acc, elapsed)
    return AblationResult(preset, report, summary["toy"], summary["full"], summary["delta_full"], elapsed, history)


@dataclass
class SweepConfig:
    """The fixed toy-scale sweep behind the ordering checks."""

    presets: tuple[str, ...] = PRESETS
    seeds: tuple[int, ...] = (0, 1, 2)
    max_iter: int = 1000
    base_lr: float = 0.05
    batch_size: int = 4
    train_size: int = 1024
    test_size: int = 128
    # a narrow neck keeps head context capacity the bottleneck, which is what the presets vary
    neck_width: int = 32
    scene: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(max_iter=self.max_iter, base_lr=self.base_lr, batch_size=self.batch_size,
                           crop_size=self.scene.size, seed=seed)


def run_sweep(cfg: SweepConfig, on_result=None) -> dict[str, list[float]]:
    """mIoU per preset, one entry per seed in ``cfg.seeds`` order."""
    scores: dict[str, list[float]] = {p: [] for p in cfg.presets}
    for seed in cfg.seeds:
        for preset in cfg.presets:
            r = run_ablation(preset, cfg.train_config(seed), cfg.scene, cfg.train_size, cfg.test_size,
                             neck_width=cfg.neck_width)
            scores[preset].append(r.report.miou)
            if on_result:
                on_result(seed, r)
    return scores


ORDERINGS = (
    ("2mpm+spm", "2mpm"),
    ("2mpm", "1mpm"),
    ("1mpm", "base-fcn"),
    ("2mpm", "srd-only"),
    ("2mpm", "lrd-only"),
    ("2mpm+spm", "se-baseline"),
)


@dataclass
class OrderingCheck:
    higher: str
    lower: str
    margin: float
    lower_std: float

    @property
    def holds(self) -> bool:
        return self.margin > self.lower_std


def check_orderings(scores: dict[str, list[float]]) -> list[OrderingCheck]:
    """Each pair must win on mean mIoU by more than the lower preset's across-seed std (ddof=1)."""
    out = []
    for hi, lo in ORDERINGS:
        margin = float(np.mean(scores[hi]) - np.mean(scores[lo]))
        spread = float(np.std(scores[lo], ddof=1)) if len(scores[lo]) > 1 else 0.0
        out.append(OrderingCheck(hi, lo, margin, spread))
    return out
