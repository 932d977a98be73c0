"""Detection and answer-matching evaluation.

Average precision follows the 101-point interpolated convention with the
headline mAP averaged over IoU thresholds 0.50:0.05:0.95; relaxed accuracy
admits a 5% numeric deviation and otherwise requires a case-insensitive
exact match.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .geometry import mask_iou

MAP_IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class MetricsError(ValueError):
    """Rejected input: evaluation contract violated."""


@dataclass
class Detection:
    image_id: int
    category_id: int
    score: float
    mask: np.ndarray


@dataclass
class GroundTruth:
    image_id: int
    category_id: int
    mask: np.ndarray


@dataclass
class EvalReport:
    map: float
    map50: float
    map75: float
    per_category: dict[str, dict[str, float]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mAP": self.map,
            "mAP50": self.map50,
            "mAP75": self.map75,
            "per_category": self.per_category,
            "counts": self.counts,
        }


def average_precision(dets: list[Detection], gts: list[GroundTruth],
                      iou_thresh: float) -> float | None:
    """101-point interpolated AP for one category.

    Detections are matched greedily in descending score order (input order
    breaks ties) to the highest-IoU unmatched ground truth of the same
    image with IoU >= iou_thresh. Returns None when the category has no
    ground truth (excluded from any mean).
    """
    if not gts:
        return None
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    gt_by_image: dict[int, list[int]] = {}
    for gi, gt in enumerate(gts):
        gt_by_image.setdefault(gt.image_id, []).append(gi)
    matched: set[int] = set()
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for rank, di in enumerate(order):
        det = dets[di]
        best_iou, best_gi = 0.0, -1
        for gi in gt_by_image.get(det.image_id, ()):
            if gi in matched:
                continue
            iou = mask_iou(det.mask, gts[gi].mask)
            if iou > best_iou:
                best_iou, best_gi = iou, gi
        if best_gi >= 0 and best_iou >= iou_thresh:
            matched.add(best_gi)
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0
    if len(dets) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / len(gts)
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    ap = 0.0
    for r in RECALL_POINTS:
        mask = recall >= r
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / len(RECALL_POINTS)


def map_suite(dets: list[Detection], gts: list[GroundTruth],
              category_names: dict[int, str] | None = None) -> EvalReport:
    """mAP over 0.50:0.05:0.95 plus mAP50/mAP75 and a per-category table."""
    if not gts:
        raise MetricsError("map_suite needs a non-empty ground-truth set")
    gt_cats = sorted({g.category_id for g in gts})
    names = category_names or {c: str(c) for c in gt_cats}
    per_cat: dict[str, dict[str, float]] = {}
    ap_by_thresh: dict[float, list[float]] = {t: [] for t in MAP_IOU_THRESHOLDS}
    for cat in gt_cats:
        cat_dets = [d for d in dets if d.category_id == cat]
        cat_gts = [g for g in gts if g.category_id == cat]
        aps = {}
        for t in MAP_IOU_THRESHOLDS:
            ap = average_precision(cat_dets, cat_gts, t)
            aps[t] = ap
            ap_by_thresh[t].append(ap)
        name = names.get(cat, str(cat))
        per_cat[name] = {
            "AP": float(np.mean(list(aps.values()))),
            "AP50": aps[0.5],
            "AP75": aps[0.75],
            "num_gt": len(cat_gts),
            "num_det": len(cat_dets),
        }
    map50 = float(np.mean(ap_by_thresh[0.5]))
    map75 = float(np.mean(ap_by_thresh[0.75]))
    map_all = float(np.mean([np.mean(ap_by_thresh[t]) for t in MAP_IOU_THRESHOLDS]))
    return EvalReport(
        map=map_all, map50=map50, map75=map75, per_category=per_cat,
        counts={"images": len({g.image_id for g in gts}),
                "detections": len(dets), "ground_truths": len(gts)},
    )


# -- relaxed accuracy ---------------------------------------------------------

_NUMERIC_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)$")


def _parse_numeric(text: str) -> float | None:
    """Numeric reading of an answer: surrounding whitespace trimmed, one
    leading % or $ and one trailing % stripped."""
    s = text.strip()
    if s.startswith(("%", "$")):
        s = s[1:]
    if s.endswith("%"):
        s = s[:-1]
    s = s.strip()
    if _NUMERIC_RE.match(s):
        return float(s)
    return None


def relaxed_accuracy(pred: str, gold: str, numeric_tolerance: float = 0.05) -> bool:
    """Correct iff numeric answers agree within 5% of the gold value
    (boundary inclusive; a gold of 0 demands an exact 0), and other answers
    match case-insensitively after trimming."""
    p_num = _parse_numeric(pred)
    g_num = _parse_numeric(gold)
    if p_num is not None and g_num is not None:
        if g_num == 0.0:
            return p_num == 0.0
        return abs(p_num - g_num) <= numeric_tolerance * abs(g_num)
    return pred.strip().lower() == gold.strip().lower()
