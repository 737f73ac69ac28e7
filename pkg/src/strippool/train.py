"""Poly-schedule momentum SGD training with an auxiliary cross-entropy head."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .data import IGNORE, SegmentationSample, stack
from .tensor import ConfigError, Node

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 0.02
    power: float = 0.9
    max_iter: int = 1000
    momentum: float = 0.9
    weight_decay: float = 1e-4
    aux_weight: float = 0.4
    batch_size: int = 8
    crop_size: int = 64
    scale_range: tuple[float, float] = (1.0, 1.0)
    flip_prob: float = 0.5
    seed: int = 0

    def validate(self):
        if self.power <= 0:
            raise ConfigError(f"train.power must be > 0, got {self.power}")
        if self.aux_weight < 0:
            raise ConfigError(f"train.aux_weight must be >= 0, got {self.aux_weight}")
        if self.max_iter < 1 or self.batch_size < 1:
            raise ConfigError("train.max_iter and train.batch_size must be positive")
        lo, hi = self.scale_range
        if not 0.5 <= lo <= hi <= 2.0:
            raise ConfigError(f"train.scale_range must lie within [0.5, 2], got {self.scale_range}")
        if self.crop_size % 8:
            raise ConfigError(f"train.crop_size must be divisible by 8, got {self.crop_size}")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError(f"train.flip_prob must be in [0, 1], got {self.flip_prob}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"train: unknown field(s) {', '.join(extra)}")
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d).validate()


def poly_lr(it: int, cfg: TrainConfig) -> float:
    if not 0 <= it < cfg.max_iter:
        raise ConfigError(f"poly_lr: iteration {it} outside [0, {cfg.max_iter})")
    return cfg.base_lr * (1.0 - it / cfg.max_iter) ** cfg.power


def ce_loss(main_logits: Node, aux_logits: Node | None, labels: np.ndarray, aux_weight: float):
    """Return (total, main, aux) where total = main + aux_weight * aux."""
    main = T.cross_entropy(main_logits, labels, IGNORE)
    if aux_logits is None or aux_weight == 0:
        return main, main, None
    aux = T.cross_entropy(aux_logits, labels, IGNORE)
    return T.add(main, T.scale(aux, aux_weight)), main, aux


def resize_image(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of [..., H, W] arrays (half-pixel centres)."""
    ah = T.interp_matrix(h, img.shape[-2], img.dtype)
    aw = T.interp_matrix(w, img.shape[-1], img.dtype)
    return np.matmul(np.matmul(ah, img), aw.T)


def resize_labels(lab: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = np.minimum(((np.arange(h) + 0.5) * lab.shape[0] / h).astype(int), lab.shape[0] - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * lab.shape[1] / w).astype(int), lab.shape[1] - 1)
    return lab[rows][:, cols]


def augment(sample: SegmentationSample, cfg: TrainConfig, rng: np.random.Generator):
    """Random rescale, horizontal flip and crop (ignore-padded) to crop_size."""
    img, lab = sample.image, sample.labels
    lo, hi = cfg.scale_range
    if hi > lo or lo != 1.0:
        s = rng.uniform(lo, hi)
        h = max(int(round(img.shape[1] * s)), 1)
        w = max(int(round(img.shape[2] * s)), 1)
        img = resize_image(img, h, w)
        lab = resize_labels(lab, h, w)
    if rng.random() < cfg.flip_prob:
        img, lab = img[:, :, ::-1], lab[:, ::-1]
    c = cfg.crop_size
    h, w = lab.shape
    ph, pw = max(c - h, 0), max(c - w, 0)
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)))
        lab = np.pad(lab, ((0, ph), (0, pw)), constant_values=IGNORE)
        h, w = lab.shape
    y0 = int(rng.integers(0, h - c + 1))
    x0 = int(rng.integers(0, w - c + 1))
    return (np.ascontiguousarray(img[:, y0:y0 + c, x0:x0 + c], dtype=np.float32),
            np.ascontiguousarray(lab[y0:y0 + c, x0:x0 + c]))


def train(net, cfg: TrainConfig, corpus: list[SegmentationSample], callback=None):
    """Train ``net`` in place; returns rows of (iter, lr, main_loss, aux_loss)."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    params = net.parameters()
    velocity: dict[int, np.ndarray] = {}
    history = []
    for it in range(cfg.max_iter):
        idx = rng.integers(0, len(corpus), size=cfg.batch_size)
        pairs = [augment(corpus[i], cfg, rng) for i in idx]
        images = np.stack([p[0] for p in pairs])
        labels = np.stack([p[1] for p in pairs])
        lr = poly_lr(it, cfg)
        for p in params:
            p.zero_grad()
        main_logits, aux_logits = net.forward(images, train=True, with_aux=cfg.aux_weight > 0)
        total, main, aux = ce_loss(main_logits, aux_logits, labels, cfg.aux_weight)
        T.backward(total)
        T.sgd_step(params, lr, cfg.momentum, cfg.weight_decay, velocity)
        row = (it, lr, float(main.value[0]), float(aux.value[0]) if aux is not None else 0.0)
        history.append(row)
        if callback is not None:
            callback(row)
        if not np.isfinite(row[2]):
            raise FloatingPointError(f"loss diverged at iteration {it}")
    return history


def overfit_one(net, sample: SegmentationSample, steps=200, lr=0.05, momentum=0.9):
    """Fit a single sample with constant-lr momentum SGD; returns per-step losses."""
    images, labels = stack([sample])
    params = net.parameters()
    velocity: dict[int, np.ndarray] = {}
    losses = []
    for _ in range(steps):
        for p in params:
            p.zero_grad()
        main_logits, aux_logits = net.forward(images, train=True)
        total, main, _ = ce_loss(main_logits, aux_logits, labels, 0.4)
        T.backward(total)
        T.sgd_step(params, lr, momentum, 0.0, velocity)
        losses.append(float(main.value[0]))
    return losses
