"""Synthetic scenes with banded and discretely aligned structures.

Several classes deliberately share a colour, so telling them apart needs
context along a row or column rather than local appearance: a horizontal and
a vertical band look identical pixel-for-pixel, and a blob belongs to the
"aligned" class only because other blobs sit in the same row or column.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IGNORE = 255

FAMILIES = ("background", "horizontal-band", "vertical-band", "discrete-blobs-aligned", "square-blob")


@dataclass
class SyntheticSceneSpec:
    size: int = 128
    num_classes: int = 6
    families: list[str] = field(default_factory=lambda: [
        "background", "horizontal-band", "vertical-band",
        "discrete-blobs-aligned", "square-blob", "discrete-blobs-aligned",
    ])
    # RGB per class; equal colours make classes locally indistinguishable
    colors: list[list[float]] = field(default_factory=lambda: [
        [0.45, 0.45, 0.45],
        [0.60, 0.55, 0.40],
        [0.60, 0.55, 0.40],
        [0.30, 0.45, 0.65],
        [0.30, 0.45, 0.65],
        [0.30, 0.45, 0.65],
    ])
    probs: list[float] = field(default_factory=lambda: [1.0, 0.5, 0.5, 0.6, 0.6, 0.6])
    noise: float = 0.1
    band_width: tuple[int, int] = (8, 16)
    blob_size: tuple[int, int] = (10, 14)
    # background left between structures; below the output stride a gap cannot be resolved
    gap: int = 4
    # background between blobs of one aligned group; wide spacing keeps partners
    # outside a local receptive field so alignment is a long-range cue
    blob_spacing: int = 24
    seed: int = 0

    def validate(self):
        from .tensor import ConfigError

        k = self.num_classes
        if len(self.families) != k or len(self.colors) != k or len(self.probs) != k:
            raise ConfigError(f"scene spec: families/colors/probs must each have {k} entries")
        bad = [f for f in self.families if f not in FAMILIES]
        if bad:
            raise ConfigError(f"scene spec: unknown family {bad[0]!r}")
        if self.families[0] != "background":
            raise ConfigError("scene spec: class 0 must be the background family")
        if self.gap < 1 or self.blob_spacing < 1:
            raise ConfigError(f"scene spec: gap and blob_spacing must be >= 1, got {self.gap}, {self.blob_spacing}")
        if self.size < 16:
            raise ConfigError(f"scene spec: size must be >= 16, got {self.size}")
        if not any("band" in f for f in self.families) or "discrete-blobs-aligned" not in self.families:
            raise ConfigError("scene spec: needs at least one banded and one aligned-blob family")
        return self


@dataclass
class SegmentationSample:
    image: np.ndarray  # float32 [3,H,W] in [0,1]
    labels: np.ndarray  # uint8 [H,W]
    present: list[int]  # classes rendered in this scene


def _free(taken, lo, hi):
    return all(hi <= a or lo >= b for a, b in taken)


def _place_spans(rng, size, length, count, taken, gap=1, spacing=None, tries=200):
    """Pick ``count`` [lo, lo+length) spans, ``gap`` clear of ``taken`` and ``spacing`` clear of each other."""
    spacing = gap if spacing is None else spacing
    spans = []
    for _ in range(tries):
        if len(spans) == count:
            break
        lo = int(rng.integers(0, size - length + 1))
        if _free(taken, lo - gap, lo + length + gap) and _free(spans, lo - spacing, lo + length + spacing):
            spans.append((lo, lo + length))
    return spans


LAYOUT_TRIES = 50


def generate_scene(spec: SyntheticSceneSpec, rng: np.random.Generator) -> SegmentationSample:
    """Render one scene; every draw comes from ``rng`` so a seed fixes the sample.

    The set of classes is drawn first from ``probs``; the geometry is then redrawn
    until every drawn class fits on the canvas (or the tries run out, in which case
    the fullest layout wins), so class frequencies track ``probs``.
    """
    draws = rng.random(spec.num_classes)
    active = [k for k in range(1, spec.num_classes) if draws[k] < spec.probs[k]]
    best = None
    for _ in range(LAYOUT_TRIES):
        labels, present = _layout(spec, active, rng)
        if best is None or len(present) > len(best[1]):
            best = labels, present
        if len(present) == len(active) + 1:
            break
    labels, present = best
    colors = np.asarray(spec.colors, dtype=np.float32)
    image = colors[labels].transpose(2, 0, 1).copy()
    if spec.noise > 0:
        image += rng.normal(0.0, spec.noise, size=image.shape).astype(np.float32)
    np.clip(image, 0.0, 1.0, out=image)
    return SegmentationSample(image.astype(np.float32), labels, sorted(set(present)))


def _layout(spec: SyntheticSceneSpec, active: list[int], rng: np.random.Generator):
    s = spec.size
    labels = np.zeros((s, s), dtype=np.uint8)
    present = [0]
    by_family: dict[str, list[int]] = {}
    for k in active:
        by_family.setdefault(spec.families[k], []).append(k)

    # blobs of different groups never share rows or columns, so a blob's class
    # is decided by whether partners exist along its row, its column, or neither;
    # band spans are reserved too so no blob overlaps a band
    rows_taken: list[tuple[int, int]] = []
    cols_taken: list[tuple[int, int]] = []
    g = spec.gap

    for k in by_family.get("vertical-band", []):
        t = int(rng.integers(spec.band_width[0], spec.band_width[1] + 1))
        x0 = int(rng.integers(0, s - t + 1))
        labels[:, x0:x0 + t] = k
        cols_taken.append((x0, x0 + t))
        present.append(k)
    for k in by_family.get("horizontal-band", []):
        t = int(rng.integers(spec.band_width[0], spec.band_width[1] + 1))
        y0 = int(rng.integers(0, s - t + 1))
        labels[y0:y0 + t, :] = k
        rows_taken.append((y0, y0 + t))
        present.append(k)

    aligned = [k for k in range(spec.num_classes) if spec.families[k] == "discrete-blobs-aligned"]
    for k in by_family.get("discrete-blobs-aligned", []):
        if len(aligned) > 1:
            horizontal = aligned.index(k) % 2 == 0
        else:
            horizontal = bool(rng.random() < 0.5)
        b = int(rng.integers(spec.blob_size[0], spec.blob_size[1] + 1))
        n = int(rng.integers(3, 5))
        along_taken, across_taken = (cols_taken, rows_taken) if horizontal else (rows_taken, cols_taken)
        across = _place_spans(rng, s, b, 1, across_taken, g)
        along = _place_spans(rng, s, b, n, along_taken, g, spec.blob_spacing)
        if len(along) < 2 or not across:
            continue
        (c0, c1), = across
        for a0, a1 in along:
            if horizontal:
                labels[c0:c1, a0:a1] = k
            else:
                labels[a0:a1, c0:c1] = k
        across_taken.append((c0, c1))
        along_taken.extend(along)
        present.append(k)

    for k in by_family.get("square-blob", []):
        b = int(rng.integers(spec.blob_size[0], spec.blob_size[1] + 1))
        placed = False
        for _ in range(int(rng.integers(1, 3))):
            r = _place_spans(rng, s, b, 1, rows_taken, g)
            c = _place_spans(rng, s, b, 1, cols_taken, g)
            if not r or not c:
                continue
            (r0, r1), (c0, c1) = r[0], c[0]
            labels[r0:r1, c0:c1] = k
            rows_taken.append((r0, r1))
            cols_taken.append((c0, c1))
            placed = True
        if placed:
            present.append(k)
    return labels, present


def make_corpus(spec: SyntheticSceneSpec, count: int, seed: int | None = None) -> list[SegmentationSample]:
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    return [generate_scene(spec, rng) for _ in range(count)]


def stack(samples: list[SegmentationSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])
