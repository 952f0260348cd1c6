"""
Inference-time assembly: per-class box decoding and NMS, k-th mask selection,
mask pasting into the full image, keypoint decoding and detection serialization.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import rle
from boxgeom import Box, decode_boxes, nms_arrays
from roiops import resample_clamped

logger = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5
DETECTION_FORMAT_VERSION = 1


@dataclass
class DetectionResult:
    box: Box
    class_id: int
    score: float
    mask_logits: Optional[np.ndarray] = field(default=None, repr=False)
    keypoint_heatmaps: Optional[np.ndarray] = field(default=None, repr=False)
    mask: Optional[np.ndarray] = field(default=None, repr=False)
    keypoints: Optional[List[Tuple[float, float, float]]] = None

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError(f"detections are foreground only, got class {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must be in [0,1], got {self.score}")


@dataclass
class InstanceMask:
    grid: np.ndarray
    detection_index: int

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.grid))


def decode_detections(proposals: Sequence[Box], class_probs: np.ndarray, deltas: np.ndarray,
                      image_h: int, image_w: int, weights=(10.0, 10.0, 5.0, 5.0),
                      max_log_scale: float = math.log(1000.0 / 16.0)) -> List[Tuple[Box, int, float]]:
    """Class-specific box refinement: one (box, class, score) per proposal and foreground class.

    class_probs is [N, K+1] (column 0 background), deltas [N, K, 4].
    """
    scored = []
    if not proposals:
        return scored
    anchors = np.stack([p.as_array() for p in proposals])
    num_classes = deltas.shape[1]
    for k in range(1, num_classes + 1):
        boxes = decode_boxes(deltas[:, k - 1], anchors, weights, max_log_scale=max_log_scale)
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, image_w)
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, image_h)
        for i, values in enumerate(boxes):
            scored.append((Box.from_array(values), k, float(class_probs[i, k])))
    return scored


def select_detections(scored_boxes: Sequence[Tuple[Box, int, float]], nms_threshold: float = 0.5,
                      score_threshold: float = 0.05, top_k: int = 100) -> List[DetectionResult]:
    """Score filter, per-class NMS, then the global top_k by score (ties keep input order)"""
    if not 0.0 <= nms_threshold <= 1.0 or not 0.0 <= score_threshold <= 1.0:
        raise ValueError(f"thresholds must be in [0,1]: nms={nms_threshold}, score={score_threshold}")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    survivors = []
    classes = sorted({c for _, c, _ in scored_boxes})
    for class_id in classes:
        members = [i for i, (_, c, s) in enumerate(scored_boxes) if c == class_id and s >= score_threshold]
        if not members:
            continue
        boxes = np.stack([scored_boxes[i][0].as_array() for i in members])
        scores = np.array([scored_boxes[i][2] for i in members])
        survivors.extend(members[j] for j in nms_arrays(boxes, scores, nms_threshold))
    survivors.sort()
    order = sorted(survivors, key=lambda i: -scored_boxes[i][2])[:top_k]
    return [DetectionResult(box=scored_boxes[i][0], class_id=scored_boxes[i][1], score=scored_boxes[i][2])
            for i in order]


def select_mask(mask_logits: np.ndarray, predicted_class: int, class_agnostic: bool = False) -> np.ndarray:
    """Channel k-1 for class k; a class-agnostic branch has a single channel used for every class"""
    mask_logits = np.asarray(mask_logits)
    channels = mask_logits.shape[0]
    if class_agnostic or channels == 1:
        if predicted_class < 1:
            raise ValueError(f"predicted class must be foreground, got {predicted_class}")
        return mask_logits[0]
    if not 1 <= predicted_class <= channels:
        raise ValueError(f"predicted class {predicted_class} out of range [1,{channels}]")
    return mask_logits[predicted_class - 1]


def paste_mask(mask_probs: np.ndarray, box: Box, image_h: int, image_w: int, threshold: float = MASK_THRESHOLD,
               detection_index: int = 0) -> InstanceMask:
    """Resize the m x m probabilities to the box's integer pixel extent, binarize with >= threshold"""
    grid = np.zeros((image_h, image_w), dtype=bool)
    if box.width <= 0 or box.height <= 0:
        return InstanceMask(grid, detection_index)
    x1, y1 = int(math.floor(box.x1)), int(math.floor(box.y1))
    x2, y2 = int(math.ceil(box.x2)), int(math.ceil(box.y2))
    bw, bh = x2 - x1, y2 - y1
    mh, mw = mask_probs.shape
    # box pixel p maps to mask coordinate (p + 0.5) * m / extent - 0.5
    xs = (np.arange(bw) + 0.5) * mw / bw - 0.5
    ys = (np.arange(bh) + 0.5) * mh / bh - 0.5
    grid_x, grid_y = np.meshgrid(xs, ys)
    patch = resample_clamped(np.asarray(mask_probs, dtype=np.float64), grid_x, grid_y) >= threshold
    top, left = max(y1, 0), max(x1, 0)
    bottom, right = min(y2, image_h), min(x2, image_w)
    if bottom > top and right > left:
        grid[top:bottom, left:right] = patch[top - y1:bottom - y1, left - x1:right - x1]
    return InstanceMask(grid, detection_index)


def decode_keypoints(heatmaps: np.ndarray, box: Box) -> List[Tuple[float, float, float]]:
    """Argmax cell of each heatmap mapped to its centre in image coordinates; third value is the softmax peak"""
    keypoints = []
    kp, mh, mw = heatmaps.shape
    for logits in heatmaps:
        flat = logits.ravel()
        index = int(np.argmax(flat))
        row, col = divmod(index, mw)
        shifted = np.exp(flat - flat[index])
        confidence = float(1.0 / shifted.sum())
        x = box.x1 + (col + 0.5) * box.width / mw
        y = box.y1 + (row + 0.5) * box.height / mh
        keypoints.append((x, y, confidence))
    return keypoints


def serialize_detections(image_id: int, detections: Sequence[DetectionResult]) -> List[Dict]:
    """One JSON-ready record per instance; masks are RLE over the full image grid"""
    records = []
    for det in detections:
        record = {
            "image": image_id,
            "class": det.class_id,
            "score": det.score,
            "box": [det.box.x1, det.box.y1, det.box.x2, det.box.y2],
        }
        if det.mask is not None:
            record["mask"] = rle.to_json(det.mask)
        if det.keypoints is not None:
            record["keypoints"] = [list(k) for k in det.keypoints]
        records.append(record)
    return records


def write_detections(path: str, records: Sequence[Dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"format_version": DETECTION_FORMAT_VERSION, "detections": list(records)}, f)
    logger.info(f"Wrote {len(records)} detections to {path}")


def read_detections(path: str) -> List[DetectionResult]:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format_version") != DETECTION_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported detection format {payload.get('format_version')}")
    detections = []
    for record in payload["detections"]:
        det = DetectionResult(box=Box.from_array(record["box"]), class_id=record["class"], score=record["score"])
        if "mask" in record:
            det.mask = rle.from_json(record["mask"])
        if "keypoints" in record:
            det.keypoints = [tuple(k) for k in record["keypoints"]]
        detections.append(det)
    return detections
