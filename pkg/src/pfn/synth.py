"""Synthetic scenes of coloured shapes with occlusion.

Each category has its own shape family and base colour; every instance gets a
small colour jitter. Shapes are painted back to front, so later shapes occlude
earlier ones, while each instance's box always bounds its full (amodal) extent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .losses import encode_location_targets
from .rng import XorShift64Star

SHAPES = ("disk", "rectangle", "triangle")

# base RGB per category, cycled when there are more categories than entries
BASE_COLORS = (
    (0.90, 0.25, 0.20),
    (0.20, 0.70, 0.25),
    (0.25, 0.35, 0.90),
    (0.90, 0.80, 0.20),
    (0.75, 0.30, 0.85),
    (0.20, 0.80, 0.85),
)


@dataclass
class GenConfig:
    height: int = 64
    width: int = 64
    num_categories: int = 3
    max_instances: int = 4
    occlusion: bool = True
    seed: int = 0
    min_size: int = 10
    max_size: int = 26
    # instances showing less than this fraction of their area are rerolled
    min_visible_frac: float = 0.3
    color_jitter: float = 0.08
    # upper bound on box IoU between two instances of the same category
    # (None: unrestricted, 0.0: same-category boxes never overlap)
    max_same_category_box_iou: Optional[float] = None

    def validate(self) -> None:
        if self.max_instances < 1:
            raise ValueError("max_instances must be >= 1")
        if self.num_categories < 1:
            raise ValueError("num_categories must be >= 1")
        if self.min_size < 2 or self.max_size < self.min_size:
            raise ValueError("invalid shape size range")
        if self.max_size > min(self.height, self.width):
            raise ValueError("shapes must fit inside the canvas")
        if self.max_same_category_box_iou is not None and not 0.0 <= self.max_same_category_box_iou <= 1.0:
            raise ValueError("max_same_category_box_iou must lie in [0, 1]")


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    labels: np.ndarray  # H x W uint16
    instance_ids: np.ndarray  # H x W uint16
    boxes: dict[int, tuple[int, tuple[float, float, float, float]]] = field(default_factory=dict)
    counts: np.ndarray = None  # C float32

    @property
    def num_categories(self) -> int:
        return len(self.counts)

    def instances(self) -> list[tuple[int, np.ndarray]]:
        """(category, mask) for every instance with visible pixels."""
        out = []
        for iid, (cat, _box) in sorted(self.boxes.items()):
            mask = self.instance_ids == iid
            if mask.any():
                out.append((cat, mask))
        return out


def _shape_mask(kind: str, rng: XorShift64Star, h: int, w: int, cfg: GenConfig) -> np.ndarray:
    sw = rng.randint(cfg.min_size, cfg.max_size)
    sh = rng.randint(cfg.min_size, cfg.max_size)
    x0 = rng.randint(0, w - sw)
    y0 = rng.randint(0, h - sh)
    yy, xx = np.mgrid[0:h, 0:w]
    px, py = xx + 0.5, yy + 0.5
    if kind == "disk":
        r = min(sw, sh) / 2.0
        cx, cy = x0 + r, y0 + r
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if kind == "rectangle":
        return (xx >= x0) & (xx < x0 + sw) & (yy >= y0) & (yy < y0 + sh)
    # triangle: apex at top centre or bottom centre
    flip = rng.random() < 0.5
    v = (py - y0) / sh
    if flip:
        v = 1.0 - v
    half = 0.5 * sw * v
    cx = x0 + sw / 2.0
    return (v >= 0) & (v <= 1) & (np.abs(px - cx) <= half)


def _tight_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def box_iou(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> float:
    """IoU of two ``(lx, ly, rx, ry)`` boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def generate_scene(cfg: GenConfig, index: int) -> Sample:
    """Deterministic scene ``index`` of the stream seeded by ``cfg.seed``."""
    cfg.validate()
    rng = XorShift64Star.stream(cfg.seed, index)
    h, w = cfg.height, cfg.width
    bg = np.array([rng.uniform(0.05, 0.25) for _ in range(3)], dtype=np.float64)
    n_target = rng.randint(1, cfg.max_instances)

    ids = np.zeros((h, w), dtype=np.uint16)
    full_masks: dict[int, np.ndarray] = {}
    cats: dict[int, int] = {}
    colors: dict[int, np.ndarray] = {}
    next_id = 1
    for _ in range(n_target):
        for _attempt in range(10):
            cat = rng.randint(1, cfg.num_categories)
            kind = SHAPES[(cat - 1) % len(SHAPES)]
            mask = _shape_mask(kind, rng, h, w, cfg)
            base = np.array(BASE_COLORS[(cat - 1) % len(BASE_COLORS)])
            color = np.clip(base + [rng.uniform(-cfg.color_jitter, cfg.color_jitter) for _ in range(3)], 0, 1)
            if not mask.any():
                continue
            box = _tight_box(mask)
            if any(_tight_box(m) == box and cats[i] == cat for i, m in full_masks.items()):
                continue
            if cfg.max_same_category_box_iou is not None and any(
                cats[i] == cat and box_iou(_tight_box(m), box) > cfg.max_same_category_box_iou
                for i, m in full_masks.items()
            ):
                continue
            if not cfg.occlusion and (ids[mask] != 0).any():
                continue
            trial = ids.copy()
            trial[mask] = next_id
            ok = True
            for iid, m in list(full_masks.items()) + [(next_id, mask)]:
                visible = int((trial == iid).sum())
                if visible < max(1, int(np.ceil(cfg.min_visible_frac * m.sum()))):
                    ok = False
                    break
            if not ok:
                continue
            ids = trial
            full_masks[next_id] = mask
            cats[next_id] = cat
            colors[next_id] = color
            next_id += 1
            break

    image = np.empty((3, h, w), dtype=np.float64)
    image[:] = bg[:, None, None]
    labels = np.zeros((h, w), dtype=np.uint16)
    boxes = {}
    counts = np.zeros(cfg.num_categories, dtype=np.float32)
    for iid, mask in full_masks.items():
        vis = ids == iid
        image[:, vis] = colors[iid][:, None]
        labels[vis] = cats[iid]
        boxes[iid] = (cats[iid], _tight_box(mask))
        counts[cats[iid] - 1] += 1
    return Sample(image.astype(np.float32), labels, ids, boxes, counts)


def generate_dataset(cfg: GenConfig, num: int, start: int = 0) -> list[Sample]:
    return [generate_scene(cfg, start + i) for i in range(num)]


def encode_sample(sample: Sample, layout: str = "full"):
    """(image, labels, location targets, counts) training record."""
    targets, counts = encode_location_targets(
        sample.instance_ids, sample.boxes, sample.labels, sample.num_categories, layout=layout
    )
    return sample.image, sample.labels, targets, counts
