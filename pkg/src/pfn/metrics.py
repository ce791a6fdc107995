"""Instance-level AP over masks, plus category-level mean IoU."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

VOL_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass
class MatchResult:
    tp: np.ndarray  # bool per prediction, in descending score order
    scores: np.ndarray
    num_gt: int

    @property
    def fp(self) -> np.ndarray:
        return ~self.tp


@dataclass
class EvalReport:
    iou_thresh: float
    per_class: dict[int, float] = field(default_factory=dict)
    mean_ap: float = 0.0
    ap_vol: Optional[float] = None

    def to_text(self) -> str:
        lines = [f"{'class':>8}  {'AP':>8}"]
        for c in sorted(self.per_class):
            lines.append(f"{c:>8}  {self.per_class[c]:>8.4f}")
        lines.append(f"{'mean':>8}  {self.mean_ap:>8.4f}   (IoU {self.iou_thresh:g})")
        if self.ap_vol is not None:
            lines.append(f"{'vol':>8}  {self.ap_vol:>8.4f}")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        out = [f"iou={self.iou_thresh:g}", f"mean_ap={self.mean_ap:.10f}"]
        out += [f"ap_class_{c}={v:.10f}" for c, v in sorted(self.per_class.items())]
        if self.ap_vol is not None:
            out.append(f"ap_vol={self.ap_vol:.10f}")
        return "\n".join(out) + "\n"


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def _iou_matrix(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    p = np.stack([np.asarray(m, dtype=bool).reshape(-1) for m in preds]).astype(np.float64)
    g = np.stack([np.asarray(m, dtype=bool).reshape(-1) for m in gts]).astype(np.float64)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def greedy_match(
    preds: Sequence[tuple[float, np.ndarray, int]],
    gts: Sequence[tuple[np.ndarray, int]],
    iou_thresh: float,
) -> MatchResult:
    """Match scored predictions of one class to ground truth.

    ``preds`` holds ``(score, mask, image_index)``; ``gts`` holds
    ``(mask, image_index)``. Predictions are visited by descending score (stable
    for ties); each takes the unmatched same-image GT with the highest IoU if
    that IoU reaches the threshold.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in (0, 1]")
    order = sorted(range(len(preds)), key=lambda i: -preds[i][0])
    by_image: dict[int, list[int]] = {}
    for j, (_m, img) in enumerate(gts):
        by_image.setdefault(img, []).append(j)
    ious: dict[int, np.ndarray] = {}
    pred_by_image: dict[int, list[int]] = {}
    for i, (_s, _m, img) in enumerate(preds):
        pred_by_image.setdefault(img, []).append(i)
    for img, pidx in pred_by_image.items():
        gidx = by_image.get(img, [])
        mat = _iou_matrix([preds[i][1] for i in pidx], [gts[j][0] for j in gidx])
        for row, i in enumerate(pidx):
            ious[i] = mat[row]
    matched = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(preds), dtype=bool)
    for rank, i in enumerate(order):
        img = preds[i][2]
        gidx = by_image.get(img, [])
        best, best_iou = -1, -1.0
        for col, j in enumerate(gidx):
            if matched[j]:
                continue
            v = ious[i][col]
            if v > best_iou:
                best, best_iou = j, v
        if best >= 0 and best_iou >= iou_thresh:
            matched[best] = True
            tp[rank] = True
    scores = np.array([preds[i][0] for i in order], dtype=np.float64)
    return MatchResult(tp, scores, len(gts))


def average_precision(match: MatchResult) -> float:
    """All-points AP: area under the monotone precision envelope."""
    if match.num_gt == 0:
        return 0.0
    if len(match.tp) == 0:
        return 0.0
    tp = np.cumsum(match.tp)
    fp = np.cumsum(~match.tp)
    recall = tp / match.num_gt
    precision = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def _by_class(preds, gts):
    pc: dict[int, list] = {}
    gc: dict[int, list] = {}
    for img, insts in enumerate(preds):
        for cat, mask, score in insts:
            pc.setdefault(int(cat), []).append((float(score), mask, img))
    for img, insts in enumerate(gts):
        for inst in insts:
            cat, mask = inst[0], inst[1]
            gc.setdefault(int(cat), []).append((mask, img))
    return pc, gc


def ap_r(preds: Sequence[Iterable], gts: Sequence[Iterable], iou_thresh: float = 0.5) -> EvalReport:
    """Per-class and mean AP over a dataset.

    ``preds[i]`` lists ``(category, mask, score)`` for image ``i``; ``gts[i]``
    lists ``(category, mask)`` (extra fields ignored). Classes without ground
    truth do not enter the mean.
    """
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth lists cover different image counts")
    pc, gc = _by_class(preds, gts)
    report = EvalReport(iou_thresh)
    for cat in sorted(gc):
        m = greedy_match(pc.get(cat, []), gc[cat], iou_thresh)
        report.per_class[cat] = average_precision(m)
    report.mean_ap = float(np.mean(list(report.per_class.values()))) if report.per_class else 0.0
    return report


def ap_r_vol(preds, gts, thresholds: Sequence[float] = VOL_THRESHOLDS) -> float:
    """Mean of mean-AP over IoU thresholds 0.1 .. 0.9."""
    return float(np.mean([ap_r(preds, gts, t).mean_ap for t in thresholds]))


def mean_pixel_iou(pred_labels: Sequence[np.ndarray], gt_labels: Sequence[np.ndarray], num_classes: int) -> float:
    """Per-class pixel IoU accumulated over the dataset, averaged over classes
    that occur in prediction or ground truth (background included)."""
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    for p, g in zip(pred_labels, gt_labels):
        p = np.asarray(p).astype(np.int64)
        g = np.asarray(g).astype(np.int64)
        if p.shape != g.shape:
            raise ValueError("label map shapes differ")
        for c in range(num_classes):
            pc, gc = p == c, g == c
            inter[c] += np.logical_and(pc, gc).sum()
            union[c] += np.logical_or(pc, gc).sum()
    present = union > 0
    if not present.any():
        return 0.0
    return float(np.mean(inter[present] / union[present]))
