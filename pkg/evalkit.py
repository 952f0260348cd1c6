"""
COCO-style evaluation: mask/box IoU, greedy single-match assignment, 101-point
interpolated AP averaged over IoU thresholds, and a PCK keypoint score.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from boxgeom import iou

logger = logging.getLogger(__name__)

IOU_KINDS = ("mask", "box")
DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# two cells of a 28-cell keypoint heatmap, as a fraction of the box side
PCK_ALPHA = 2.0 / 28.0


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    iou_kind: str = "mask"
    max_detections_per_image: int = 100
    interpolation_points: int = 101
    pck_alpha: float = PCK_ALPHA

    def __post_init__(self):
        thresholds = tuple(float(t) for t in self.iou_thresholds)
        if not thresholds:
            raise ValueError("at least one IoU threshold is required")
        if any(t <= 0.0 or t > 1.0 for t in thresholds):
            raise ValueError(f"IoU thresholds must be in (0,1], got {thresholds}")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError(f"IoU thresholds must be strictly increasing, got {thresholds}")
        if self.iou_kind not in IOU_KINDS:
            raise ValueError(f"unknown iou_kind {self.iou_kind!r}, expected one of {IOU_KINDS}")
        if self.max_detections_per_image < 1:
            raise ValueError(f"max_detections_per_image must be >= 1, got {self.max_detections_per_image}")
        if self.interpolation_points < 2:
            raise ValueError(f"interpolation_points must be >= 2, got {self.interpolation_points}")
        object.__setattr__(self, "iou_thresholds", thresholds)


@dataclass
class PRCurve:
    recall_points: np.ndarray
    precision: np.ndarray
    ap: float
    num_gt: int = 0
    num_detections: int = 0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask_iou: extents differ {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def _overlap(det, gt, iou_kind: str) -> float:
    if iou_kind == "mask":
        if det.mask is None:
            raise ValueError("mask evaluation needs pasted detection masks")
        return mask_iou(det.mask, gt.mask)
    return iou(det.box, gt.box)


def _score_order(detections: Sequence) -> List[int]:
    scores = np.array([d.score for d in detections], dtype=np.float64)
    return np.argsort(-scores, kind="stable").tolist()


def match_detections(detections: Sequence, gts: Sequence, iou_threshold: float,
                     iou_kind: str = "mask") -> List[bool]:
    """TP/FP flag per detection (input order).

    Detections are visited by descending score, ties by input order. Each one
    takes the unmatched same-class GT with the highest IoU >= iou_threshold.
    """
    flags = [False] * len(detections)
    matched = [False] * len(gts)
    for i in _score_order(detections):
        det = detections[i]
        best, best_iou = -1, iou_threshold
        for j, gt in enumerate(gts):
            if matched[j] or gt.class_id != det.class_id:
                continue
            overlap = _overlap(det, gt, iou_kind)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = j, overlap
        if best >= 0:
            matched[best] = True
            flags[i] = True
    return flags


def average_precision(flags: Sequence[bool], scores: Sequence[float], num_gt: int,
                      interpolation_points: int = 101) -> Optional[PRCurve]:
    """Interpolated AP; None when there is no ground truth (AP undefined)"""
    if num_gt < 0:
        raise ValueError(f"num_gt must be >= 0, got {num_gt}")
    recall_points = np.linspace(0.0, 1.0, interpolation_points)
    if num_gt == 0:
        return None
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return PRCurve(recall_points, np.zeros(interpolation_points), 0.0, num_gt, 0)
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(flags[order])
    fp = np.cumsum(~flags[order])
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    positions = np.searchsorted(recall, recall_points, side="left")
    sampled = np.where(positions < envelope.size, envelope[np.minimum(positions, envelope.size - 1)], 0.0)
    return PRCurve(recall_points, sampled, float(sampled.mean()), num_gt, int(flags.size))


def _top_detections(detections: Sequence, limit: int) -> List:
    return [detections[i] for i in _score_order(detections)[:limit]]


def evaluate_curves(detections_per_image: Sequence[Sequence], gts_per_image: Sequence[Sequence],
                    config: EvalConfig) -> Dict[Tuple[int, float], Optional[PRCurve]]:
    """PR curve per (class, threshold), pooling detections across images in image order"""
    if len(detections_per_image) != len(gts_per_image):
        raise ValueError(f"{len(detections_per_image)} detection lists for {len(gts_per_image)} images")
    classes = sorted({g.class_id for gts in gts_per_image for g in gts}
                     | {d.class_id for dets in detections_per_image for d in dets})
    kept = [_top_detections(dets, config.max_detections_per_image) for dets in detections_per_image]
    curves = {}
    for threshold in config.iou_thresholds:
        per_image_flags = [match_detections(dets, gts, threshold, config.iou_kind)
                           for dets, gts in zip(kept, gts_per_image)]
        for class_id in classes:
            flags, scores, num_gt = [], [], 0
            for dets, gts, image_flags in zip(kept, gts_per_image, per_image_flags):
                num_gt += sum(1 for g in gts if g.class_id == class_id)
                for det, flag in zip(dets, image_flags):
                    if det.class_id == class_id:
                        flags.append(flag)
                        scores.append(det.score)
            curves[(class_id, threshold)] = average_precision(flags, scores, num_gt, config.interpolation_points)
    return curves


def summarize(curves: Dict[Tuple[int, float], Optional[PRCurve]], thresholds: Sequence[float],
              prefix: str = "mask") -> Dict[str, float]:
    """AP (mean over classes, then thresholds), AP50 and AP75 when those thresholds are present"""
    per_threshold = {}
    for threshold in thresholds:
        aps = [c.ap for (_, t), c in sorted(curves.items(), key=lambda kv: kv[0]) if t == threshold and c is not None]
        if aps:
            per_threshold[threshold] = float(np.mean(aps))
    if not per_threshold:
        raise ValueError("empty evaluation set: no class has ground truth")
    report = {f"{prefix}_AP": float(np.mean([per_threshold[t] for t in thresholds if t in per_threshold]))}
    for name, target in (("AP50", 0.5), ("AP75", 0.75)):
        for threshold, value in per_threshold.items():
            if np.isclose(threshold, target):
                report[f"{prefix}_{name}"] = value
    return report


def evaluate(detections_per_image: Sequence[Sequence], gts_per_image: Sequence[Sequence],
             config: EvalConfig) -> Dict[str, float]:
    curves = evaluate_curves(detections_per_image, gts_per_image, config)
    return summarize(curves, config.iou_thresholds, prefix=config.iou_kind)


def ap_by_threshold(detections_per_image: Sequence[Sequence], gts_per_image: Sequence[Sequence],
                    config: EvalConfig) -> List[Tuple[float, float]]:
    """(threshold, class-mean AP) pairs; the AP-vs-IoU series for plot data"""
    curves = evaluate_curves(detections_per_image, gts_per_image, config)
    series = []
    for threshold in config.iou_thresholds:
        aps = [c.ap for (_, t), c in curves.items() if t == threshold and c is not None]
        if aps:
            series.append((threshold, float(np.mean(aps))))
    return series


def keypoint_pck(detections_per_image: Sequence[Sequence], gts_per_image: Sequence[Sequence],
                 alpha: float = PCK_ALPHA, match_threshold: float = 0.5) -> Optional[float]:
    """Fraction of visible GT keypoints predicted within alpha * max(box side) of the truth.

    GTs are paired with detections by box matching at match_threshold; an
    unmatched GT counts all of its visible keypoints as misses. Not comparable
    to OKS keypoint AP.
    """
    hits, total = 0, 0
    for dets, gts in zip(detections_per_image, gts_per_image):
        matched_det = {}
        for i in _score_order(dets):
            det = dets[i]
            best, best_iou = -1, match_threshold
            for j, gt in enumerate(gts):
                if j in matched_det or gt.class_id != det.class_id:
                    continue
                overlap = iou(det.box, gt.box)
                if overlap >= best_iou and (best < 0 or overlap > best_iou):
                    best, best_iou = j, overlap
            if best >= 0:
                matched_det[best] = i
        for j, gt in enumerate(gts):
            radius = alpha * max(gt.box.width, gt.box.height)
            det = dets[matched_det[j]] if j in matched_det else None
            for k, (x, y, visible) in enumerate(gt.keypoints):
                if not visible:
                    continue
                total += 1
                if det is None or det.keypoints is None or k >= len(det.keypoints):
                    continue
                px, py = det.keypoints[k][0], det.keypoints[k][1]
                if np.hypot(px - x, py - y) <= radius:
                    hits += 1
    if total == 0:
        return None
    return hits / total
