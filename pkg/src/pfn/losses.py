"""Location targets and the training objectives of the instance network.

Boxes use continuous edges: an instance covering pixel columns ``a..b`` has
``lx = a`` and ``rx = b + 1``, so its width is the number of covered columns.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

LAYOUTS = {
    "full": 6,  # centers, top-left, bottom-right
    "centers": 2,
    "offsets": 2,
    "centers_wh": 4,
    "centers_topleft": 4,
    "full_corners": 10,  # plus top-right and bottom-left
}
DEFAULT_LAYOUT = "full"


def layout_for_dims(dims: int) -> str:
    """Default layout name for a channel count."""
    for name in ("full", "centers", "centers_topleft", "full_corners"):
        if LAYOUTS[name] == dims:
            return name
    raise ValueError(f"unsupported location_dims {dims}; expected one of 2, 4, 6, 10")


def location_vector(box: Sequence[float], layout: str = DEFAULT_LAYOUT, pixel=None) -> np.ndarray:
    """Target vector of one instance box ``(lx, ly, rx, ry)``.

    ``pixel`` (x, y) is needed only by the ``offsets`` layout.
    """
    lx, ly, rx, ry = (float(v) for v in box)
    w, h = rx - lx, ry - ly
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate box {tuple(box)}")
    cx, cy = (lx + rx) / 2.0, (ly + ry) / 2.0
    if layout == "full":
        v = [cx / w, cy / h, lx / w, ly / h, rx / w, ry / h]
    elif layout == "centers":
        v = [cx / w, cy / h]
    elif layout == "offsets":
        if pixel is None:
            raise ValueError("offsets layout needs the pixel position")
        v = [(cx - pixel[0]) / w, (cy - pixel[1]) / h]
    elif layout == "centers_wh":
        v = [cx / w, cy / h, w, h]
    elif layout == "centers_topleft":
        v = [cx / w, cy / h, lx / w, ly / h]
    elif layout == "full_corners":
        v = [cx / w, cy / h, lx / w, ly / h, rx / w, ry / h, rx / w, ly / h, lx / w, ry / h]
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return np.asarray(v, dtype=np.float64)


def encode_location_targets(
    instance_ids: np.ndarray,
    boxes: Mapping[int, tuple[int, Sequence[float]]],
    labels: np.ndarray,
    num_categories: int,
    layout: str = DEFAULT_LAYOUT,
) -> tuple[np.ndarray, np.ndarray]:
    """Dense per-pixel location targets and per-category instance counts.

    Args:
        instance_ids: H x W integer map, 0 for background.
        boxes: instance id -> (category, (lx, ly, rx, ry)).
        labels: H x W category map, 0 for background.
        num_categories: C.
        layout: which location vector to emit; ``"full"`` is the 6-d default.

    Returns:
        ``(targets, counts)`` with targets of shape ``dims x H x W`` (zeros at
        background) and counts of length C, as float32.
    """
    instance_ids = np.asarray(instance_ids)
    h, w = instance_ids.shape
    dims = LAYOUTS[layout]
    targets = np.zeros((dims, h, w), dtype=np.float64)
    counts = np.zeros(num_categories, dtype=np.float64)
    present = [int(i) for i in np.unique(instance_ids) if i != 0]
    for iid in present:
        if iid not in boxes:
            raise KeyError(f"instance id {iid} has no box entry")
        cat, box = boxes[iid]
        if not 1 <= cat <= num_categories:
            raise ValueError(f"instance {iid} has category {cat} outside 1..{num_categories}")
        mask = instance_ids == iid
        if layout == "offsets":
            ys, xs = np.nonzero(mask)
            for x, y in zip(xs, ys):
                targets[:, y, x] = location_vector(box, layout, pixel=(x, y))
        else:
            targets[:, mask] = location_vector(box, layout)[:, None]
    for iid, (cat, _box) in boxes.items():
        if iid in present:
            counts[cat - 1] += 1
    fg = np.asarray(labels) > 0
    targets[:, ~fg] = 0.0
    return targets.astype(np.float32), counts.astype(np.float32)


def decode_bbox_from_vector(t: Sequence[float], width: float = None, height: float = None) -> tuple[float, ...]:
    """Invert a 6-d location vector.

    Without ``width``/``height`` the box is returned in units of the instance
    size, i.e. ``(lx/w, ly/h, rx/w, ry/h)``; with them the original box is
    recovered.
    """
    t = np.asarray(t, dtype=np.float64)
    lx, ly, rx, ry = t[2], t[3], t[4], t[5]
    if rx <= lx or ry <= ly:
        raise ValueError(f"degenerate location vector {tuple(t)}")
    if width is None or height is None:
        return (lx, ly, rx, ry)
    return (lx * width, ly * height, rx * width, ry * height)


def smooth_l1(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1 else ax - 0.5


def resample_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resampling of the last two axes (pixel-centre rule)."""
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return arr[..., ys[:, None], xs[None, :]]


def masked_location_loss(pred: Tensor, target: np.ndarray, labels: np.ndarray, weights=None) -> Tensor:
    """Sum of smooth-L1 residuals over foreground pixels (all channels).

    ``target`` and ``labels`` are resampled to the prediction's resolution by
    nearest neighbour when they differ. Batched inputs sum over the batch too,
    each element scaled by ``weights[n]`` when given.
    """
    target = np.asarray(target)
    labels = np.asarray(labels)
    ph, pw = pred.shape[-2:]
    target = resample_nearest(target, ph, pw)
    labels = resample_nearest(labels, ph, pw)
    if target.shape != pred.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    fg = (labels >= 1).astype(pred.dtype)
    if weights is not None:
        fg = fg * np.asarray(weights, dtype=pred.dtype).reshape((-1,) + (1,) * (fg.ndim - 1))
    resid = T.add(pred, T.Tensor(-target, dtype=pred.dtype))
    per = T.smooth_l1(resid)
    return T.sum_all(T.mask_scale(per, np.expand_dims(fg, -3)))


def foreground_count(labels: np.ndarray, out_h: int, out_w: int) -> int:
    return int((resample_nearest(np.asarray(labels), out_h, out_w) >= 1).sum())


def total_location_loss(stream_losses: Sequence, fused_loss, omega: int):
    """Sum of stream and fused losses divided by the foreground count.

    Works on floats or scalar tensors. With ``omega == 0`` the image is
    location-inactive and the result is 0.
    """
    if omega < 0:
        raise ValueError("omega must be nonnegative")
    if omega == 0:
        return 0.0
    total = fused_loss
    for s in stream_losses:
        total = total + s
    if isinstance(total, Tensor):
        return T.mul(total, 1.0 / omega)
    return float(total) / omega


def count_loss(g, g_star):
    """Mean squared count residual over the C categories."""
    if isinstance(g, Tensor):
        gs = np.asarray(g_star, dtype=g.dtype)
        if gs.shape[-1] != g.shape[-1]:
            raise ValueError(f"count vectors differ in length: {g.shape[-1]} vs {gs.shape[-1]}")
        c = g.shape[-1]
        return T.mul(T.sum_all(T.square(T.add(g, T.Tensor(-gs, dtype=g.dtype)))), 1.0 / c)
    g = np.asarray(g, dtype=np.float64)
    gs = np.asarray(g_star, dtype=np.float64)
    if g.shape != gs.shape:
        raise ValueError(f"count vectors differ in length: {g.shape} vs {gs.shape}")
    return float(np.mean((g - gs) ** 2))


def joint_loss(loc_loss, num_loss, lam: float = 10.0):
    if isinstance(loc_loss, Tensor) or isinstance(num_loss, Tensor):
        return T.add(T.mul(loc_loss, lam) if isinstance(loc_loss, Tensor) else lam * loc_loss, num_loss)
    return lam * loc_loss + num_loss


def cross_entropy_segmentation(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[true class]``."""
    labels = np.asarray(labels)
    num_classes = logits.shape[-3]
    if labels.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError(f"label values must lie in 0..{num_classes - 1}")
    logp = T.log_softmax_channels(logits)
    picked = T.pick_channels(logp, labels)
    return T.neg(T.mean_all(picked))
