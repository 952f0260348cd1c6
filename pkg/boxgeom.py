"""
Continuous-coordinate box algebra: IoU, NMS, anchors, box regression coding
and the positive/negative RoI sampler
"""

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np

if TYPE_CHECKING:
    from synthgen import InstanceAnnotation

logger = logging.getLogger(__name__)

FG_IOU_THRESHOLD = 0.5
IDENTITY_WEIGHTS = (1.0, 1.0, 1.0, 1.0)


class BoxError(ValueError):
    """Raised for malformed boxes or sampler arguments"""


@dataclass(frozen=True)
class Box:
    """Half-open rectangle in image pixels; area is (x2-x1)*(y2-y1), nothing is rounded"""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise BoxError(f"box coordinates must be finite: {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise BoxError(f"box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x1 + 0.5 * self.width, self.y1 + 0.5 * self.height)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def scaled(self, factor: float) -> "Box":
        return Box(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)

    def clipped(self, image_h: float, image_w: float) -> "Box":
        x1 = min(max(self.x1, 0.0), image_w)
        y1 = min(max(self.y1, 0.0), image_h)
        x2 = min(max(self.x2, 0.0), image_w)
        y2 = min(max(self.y2, 0.0), image_h)
        return Box(x1, y1, x2, y2)

    @staticmethod
    def from_array(values) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in values)
        return Box(x1, y1, x2, y2)


@dataclass
class AnchorSet:
    boxes: List[Box]
    scales: List[float]
    ratios: List[float]
    stride: float

    @property
    def array(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 4))
        return np.stack([b.as_array() for b in self.boxes])

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class RoISample:
    roi: Box
    label: int
    matched_gt: Optional[int] = None
    regression_target: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def is_positive(self) -> bool:
        return self.label > 0


def iou(a: Box, b: Box) -> float:
    """Intersection over union; two zero-area boxes give 0"""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N,4) and (M,4) arrays -> (N,M)"""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2]) - np.maximum(boxes_a[:, None, 0], boxes_b[None, :, 0])
    ih = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3]) - np.maximum(boxes_a[:, None, 1], boxes_b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, threshold: float) -> List[int]:
    """Greedy NMS on arrays; equal scores keep the lower original index first"""
    if not 0.0 <= threshold <= 1.0:
        raise BoxError(f"nms threshold must be in [0,1], got {threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return []
    overlaps = iou_matrix(boxes, boxes)
    order = np.argsort(-scores, kind="stable")
    suppressed = np.zeros(scores.size, dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= overlaps[i] > threshold
    return keep


def nms(boxes: Sequence[Tuple[Box, float]], threshold: float) -> List[int]:
    """Indices kept by greedy descending-score suppression"""
    if not boxes:
        return []
    array = np.stack([b.as_array() for b, _ in boxes])
    return nms_arrays(array, np.array([s for _, s in boxes], dtype=np.float64), threshold)


def generate_anchors(grid_h: int, grid_w: int, stride: float, scales: Sequence[float],
                     ratios: Sequence[float]) -> AnchorSet:
    """Anchors ordered by cell (row-major), then scale, then ratio; ratio is width/height"""
    if stride <= 0:
        raise BoxError(f"anchor stride must be positive, got {stride}")
    if not scales or not ratios:
        raise BoxError("anchor scales and ratios must be nonempty")
    if any(s <= 0 for s in scales) or any(r <= 0 for r in ratios):
        raise BoxError(f"anchor scales/ratios must be positive: {list(scales)} / {list(ratios)}")
    boxes = []
    for i in range(grid_h):
        for j in range(grid_w):
            cx, cy = (j + 0.5) * stride, (i + 0.5) * stride
            for scale in scales:
                for ratio in ratios:
                    w = scale * math.sqrt(ratio)
                    h = scale / math.sqrt(ratio)
                    boxes.append(Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    return AnchorSet(boxes=boxes, scales=list(scales), ratios=list(ratios), stride=stride)


def encode_boxes(targets: np.ndarray, anchors: np.ndarray, weights=IDENTITY_WEIGHTS) -> np.ndarray:
    """(N,4) targets against (N,4) anchors -> (N,4) deltas (tx, ty, tw, th)"""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    w = targets[:, 2] - targets[:, 0]
    h = targets[:, 3] - targets[:, 1]
    if np.any(wa <= 0) or np.any(ha <= 0):
        raise BoxError("encode: anchors need positive width and height")
    if np.any(w <= 0) or np.any(h <= 0):
        raise BoxError("encode: targets need positive width and height")
    wx, wy, ww, wh = weights
    dx = wx * ((targets[:, 0] + 0.5 * w) - (anchors[:, 0] + 0.5 * wa)) / wa
    dy = wy * ((targets[:, 1] + 0.5 * h) - (anchors[:, 1] + 0.5 * ha)) / ha
    dw = ww * np.log(w / wa)
    dh = wh * np.log(h / ha)
    return np.stack([dx, dy, dw, dh], axis=1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray, weights=IDENTITY_WEIGHTS,
                 max_log_scale: Optional[float] = None) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    if np.any(wa <= 0) or np.any(ha <= 0):
        raise BoxError("decode: anchors need positive width and height")
    wx, wy, ww, wh = weights
    dw = deltas[:, 2] / ww
    dh = deltas[:, 3] / wh
    if max_log_scale is not None:
        dw = np.minimum(dw, max_log_scale)
        dh = np.minimum(dh, max_log_scale)
    cx = anchors[:, 0] + 0.5 * wa + deltas[:, 0] / wx * wa
    cy = anchors[:, 1] + 0.5 * ha + deltas[:, 1] / wy * ha
    w = wa * np.exp(dw)
    h = ha * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_box(target: Box, anchor: Box, weights=IDENTITY_WEIGHTS) -> np.ndarray:
    return encode_boxes(target.as_array(), anchor.as_array(), weights)[0]


def decode_box(delta: Sequence[float], anchor: Box, weights=IDENTITY_WEIGHTS) -> Box:
    return Box.from_array(decode_boxes(np.asarray(delta), anchor.as_array(), weights)[0])


def match_and_sample(proposals: Sequence[Box], gts: Sequence["InstanceAnnotation"], n: int,
                     pos_fraction: float, rng: np.random.Generator,
                     weights=IDENTITY_WEIGHTS) -> List[RoISample]:
    """Label proposals by max-IoU ground truth and draw up to n of them, positives first.

    The positive quota is round(n * pos_fraction); a shortfall of positives is
    filled with extra negatives, never with duplicated positives.
    """
    if n <= 0:
        raise BoxError(f"sample size must be positive, got {n}")
    if not 0.0 < pos_fraction < 1.0:
        raise BoxError(f"pos_fraction must be in (0,1), got {pos_fraction}")
    if not proposals:
        return []
    proposal_array = np.stack([p.as_array() for p in proposals])
    if gts:
        gt_array = np.stack([g.box.as_array() for g in gts])
        overlaps = iou_matrix(proposal_array, gt_array)
        best_gt = overlaps.argmax(axis=1)
        best_iou = overlaps[np.arange(len(proposals)), best_gt]
    else:
        best_gt = np.zeros(len(proposals), dtype=int)
        best_iou = np.zeros(len(proposals))

    positive = np.flatnonzero(best_iou >= FG_IOU_THRESHOLD)
    negative = np.flatnonzero(best_iou < FG_IOU_THRESHOLD)
    quota = int(round(n * pos_fraction))
    num_pos = min(quota, positive.size)
    chosen_pos = rng.choice(positive, size=num_pos, replace=False) if num_pos else np.array([], dtype=int)
    num_neg = min(n - num_pos, negative.size)
    chosen_neg = rng.choice(negative, size=num_neg, replace=False) if num_neg else np.array([], dtype=int)

    samples = []
    for idx in chosen_pos:
        gt = gts[int(best_gt[idx])]
        target = encode_box(gt.box, proposals[idx], weights)
        samples.append(RoISample(roi=proposals[idx], label=int(gt.class_id),
                                 matched_gt=int(best_gt[idx]), regression_target=target))
    for idx in chosen_neg:
        samples.append(RoISample(roi=proposals[idx], label=0))
    logger.debug(f"Sampled {num_pos} positives / {num_neg} negatives from {len(proposals)} proposals")
    return samples
