"""Confusion-matrix metrics and single/multi-scale (+flip) inference."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import IGNORE, SegmentationSample
from .train import resize_image

log = logging.getLogger(__name__)

MULTI_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)


@dataclass
class MetricReport:
    confusion: np.ndarray  # [K,K], rows = label, cols = prediction

    @property
    def iou(self) -> np.ndarray:
        tp = np.diag(self.confusion).astype(np.float64)
        union = self.confusion.sum(0) + self.confusion.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.maximum(union, 1), np.nan)

    @property
    def miou(self) -> float:
        iou = self.iou
        return float(np.nanmean(iou)) if np.any(~np.isnan(iou)) else 0.0

    @property
    def pixel_acc(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.iou],
            "miou": self.miou,
            "pixel_acc": self.pixel_acc,
        }

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True)


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    valid = labels != IGNORE
    idx = labels[valid].astype(np.int64) * num_classes + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _logits(net, images: np.ndarray) -> np.ndarray:
    with T.no_grad():
        main, _ = net.forward(images, train=False, with_aux=False)
    return main.value


def predict(net, images: np.ndarray, multi_scale=False, flip=False, scales=MULTI_SCALES) -> np.ndarray:
    """Label maps [N,H,W] for a batch of images [N,3,H,W]."""
    if not multi_scale and not flip:
        return _logits(net, images).argmax(axis=1)
    use = tuple(scales) if multi_scale else (1.0,)
    h, w = images.shape[2:]
    acc = None
    count = 0
    for s in use:
        sh, sw = int(round(h * s / 8)) * 8, int(round(w * s / 8)) * 8
        if sh < 8 or sw < 8:
            log.warning("skipping scale %.2f: %dx%d input gives extent below 8", s, h, w)
            continue
        scaled = images if (sh, sw) == (h, w) else resize_image(images, sh, sw).astype(np.float32)
        variants = [(scaled, False)] + ([(np.ascontiguousarray(scaled[..., ::-1]), True)] if flip else [])
        for inp, flipped in variants:
            prob = _softmax(_logits(net, inp))
            if flipped:
                prob = prob[..., ::-1]
            if (sh, sw) != (h, w):
                prob = resize_image(prob, h, w)
            acc = prob if acc is None else acc + prob
            count += 1
    if acc is None:
        raise ValueError("no usable scale for multi-scale evaluation")
    return (acc / count).argmax(axis=1)


def evaluate(net, samples: list[SegmentationSample], num_classes: int, multi_scale=False, flip=False,
             scales=MULTI_SCALES, batch_size=16) -> MetricReport:
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        images = np.stack([s.image for s in chunk])
        labels = np.stack([s.labels for s in chunk])
        pred = predict(net, images, multi_scale, flip, scales)
        conf += confusion_matrix(pred, labels, num_classes)
    return MetricReport(conf)
