"""
RoI feature extraction: RoIAlign and the RoIPool / RoIWarp baselines, each with
an analytic backward pass.

Grid convention: feature value (i, j) lives at the continuous point (x=j, y=i).
Bilinear neighbours that fall outside the map contribute zero, which keeps every
operator linear in the feature map.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from boxgeom import Box
from interfaces import RoiOperator
from tensorlab import Function, Tensor

logger = logging.getLogger(__name__)

ROI_KINDS = ("align", "pool", "warp")
AGGREGATIONS = ("average", "max")


class ProvenanceError(ValueError):
    """Raised when a backward pass is replayed against the wrong forward"""


@dataclass(frozen=True)
class RoiOpSpec:
    kind: str = "align"
    output_h: int = 7
    output_w: int = 7
    sampling_points: int = 2
    aggregation: str = "average"
    feature_stride: float = 16.0

    def __post_init__(self):
        if self.kind not in ROI_KINDS:
            raise ValueError(f"unknown RoI operator kind {self.kind!r}, expected one of {ROI_KINDS}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}, expected one of {AGGREGATIONS}")
        if self.output_h < 1 or self.output_w < 1:
            raise ValueError(f"RoI output extent must be >= 1, got {self.output_h}x{self.output_w}")
        if self.sampling_points < 1:
            raise ValueError(f"sampling points must be >= 1, got {self.sampling_points}")
        if self.feature_stride <= 0:
            raise ValueError(f"feature stride must be positive, got {self.feature_stride}")


@dataclass
class RoiProvenance:
    """Everything backward needs: bilinear taps per sampling point, or argmax sources"""

    kind: str
    aggregation: str
    feature_shape: Tuple[int, int, int]
    output_shape: Tuple[int, int, int]
    tap_index: Optional[np.ndarray] = None   # [oh, ow, P, 4] flat feature indices
    tap_weight: Optional[np.ndarray] = None  # [oh, ow, P, 4]
    argmax: Optional[np.ndarray] = None      # [C, oh, ow]; sample index, or flat cell (-1 = empty bin) for pool


@dataclass
class RoiFeature:
    values: Tensor
    provenance: RoiProvenance


def _as_array(feature: Union[Tensor, np.ndarray]) -> np.ndarray:
    data = feature.data if isinstance(feature, Tensor) else np.asarray(feature, dtype=np.float64)
    if data.ndim != 3 or data.size == 0:
        raise ValueError(f"feature map must be a nonempty [C,H,W] array, got shape {data.shape}")
    return data


def bilinear_taps(xs: np.ndarray, ys: np.ndarray, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Flat indices and weights of the 4 neighbours of each point; missing neighbours get weight 0"""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    cols = np.stack([x0, x0 + 1, x0, x0 + 1], axis=-1)
    rows = np.stack([y0, y0, y0 + 1, y0 + 1], axis=-1)
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    valid = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    index = np.where(valid, rows * width + cols, 0).astype(np.int64)
    return index, np.where(valid, weights, 0.0)


def bilinear_sample(feature: Union[Tensor, np.ndarray], x: float, y: float) -> np.ndarray:
    """Value of every channel at the continuous point (x, y)"""
    data = _as_array(feature)
    c, h, w = data.shape
    index, weight = bilinear_taps(np.array(x), np.array(y), h, w)
    return data.reshape(c, h * w)[:, index] @ weight


def resample_clamped(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup on a 2-D grid with edge clamping (used for masks, not features)"""
    h, w = grid.shape
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1.0)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
    bottom = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def _quantize(roi: Box, stride: float) -> Tuple[int, int, int, int]:
    """Round-half-to-even of roi/stride; the quantized extent is at least one cell"""
    x1 = int(np.round(roi.x1 / stride))
    y1 = int(np.round(roi.y1 / stride))
    x2 = int(np.round(roi.x2 / stride))
    y2 = int(np.round(roi.y2 / stride))
    return x1, y1, x1 + max(x2 - x1, 1), y1 + max(y2 - y1, 1)


def _sample_bins(data: np.ndarray, fx1: float, fy1: float, fx2: float, fy2: float,
                 spec: RoiOpSpec, kind: str) -> RoiFeature:
    c, h, w = data.shape
    oh, ow, n = spec.output_h, spec.output_w, spec.sampling_points
    bin_w = (fx2 - fx1) / ow
    bin_h = (fy2 - fy1) / oh
    frac = (np.arange(n) + 0.5) / n
    ys = fy1 + (np.arange(oh)[:, None] + frac[None, :]) * bin_h  # [oh, n]
    xs = fx1 + (np.arange(ow)[:, None] + frac[None, :]) * bin_w  # [ow, n]
    # sampling point p (rows) x q (cols) of bin (bi, bj), flattened to P = n*n
    grid_y = np.broadcast_to(ys[:, None, :, None], (oh, ow, n, n)).reshape(oh, ow, n * n)
    grid_x = np.broadcast_to(xs[None, :, None, :], (oh, ow, n, n)).reshape(oh, ow, n * n)
    index, weight = bilinear_taps(grid_x, grid_y, h, w)
    flat = data.reshape(c, h * w)
    point_values = np.sum(flat[:, index] * weight[None], axis=-1)  # [C, oh, ow, P]
    provenance = RoiProvenance(kind=kind, aggregation=spec.aggregation, feature_shape=(c, h, w),
                               output_shape=(c, oh, ow), tap_index=index, tap_weight=weight)
    if spec.aggregation == "average":
        values = point_values.mean(axis=-1)
    else:
        provenance.argmax = point_values.argmax(axis=-1)
        values = np.take_along_axis(point_values, provenance.argmax[..., None], axis=-1)[..., 0]
    return RoiFeature(values=Tensor(values), provenance=provenance)


def roi_align_forward(feature: Union[Tensor, np.ndarray], roi: Box, spec: RoiOpSpec) -> RoiFeature:
    """RoIAlign: x/stride with no rounding anywhere; (p+0.5)/n sampling fractions per bin"""
    if spec.kind != "align":
        raise ValueError(f"roi_align_forward called with spec kind {spec.kind!r}")
    s = spec.feature_stride
    return _sample_bins(_as_array(feature), roi.x1 / s, roi.y1 / s, roi.x2 / s, roi.y2 / s, spec, "align")


def roi_warp_forward(feature: Union[Tensor, np.ndarray], roi: Box, spec: RoiOpSpec) -> RoiFeature:
    """RoIWarp: quantize the RoI like RoIPool, then sample bilinearly inside it like RoIAlign"""
    if spec.kind != "warp":
        raise ValueError(f"roi_warp_forward called with spec kind {spec.kind!r}")
    x1, y1, x2, y2 = _quantize(roi, spec.feature_stride)
    return _sample_bins(_as_array(feature), float(x1), float(y1), float(x2), float(y2), spec, "warp")


def roi_pool_forward(feature: Union[Tensor, np.ndarray], roi: Box, spec: RoiOpSpec) -> RoiFeature:
    """RoIPool: quantized RoI and bins, max over covered integer cells; empty bins give 0"""
    if spec.kind != "pool":
        raise ValueError(f"roi_pool_forward called with spec kind {spec.kind!r}")
    data = _as_array(feature)
    c, h, w = data.shape
    oh, ow = spec.output_h, spec.output_w
    x1, y1, x2, y2 = _quantize(roi, spec.feature_stride)
    bin_h = (y2 - y1) / oh
    bin_w = (x2 - x1) / ow
    values = np.zeros((c, oh, ow))
    argmax = np.full((c, oh, ow), -1, dtype=np.int64)
    for bi in range(oh):
        hs = min(max(int(np.floor(bi * bin_h)) + y1, 0), h)
        he = min(max(int(np.ceil((bi + 1) * bin_h)) + y1, 0), h)
        for bj in range(ow):
            ws = min(max(int(np.floor(bj * bin_w)) + x1, 0), w)
            we = min(max(int(np.ceil((bj + 1) * bin_w)) + x1, 0), w)
            if he <= hs or we <= ws:
                continue
            region = data[:, hs:he, ws:we].reshape(c, -1)
            local = region.argmax(axis=1)
            values[:, bi, bj] = region[np.arange(c), local]
            rows = hs + local // (we - ws)
            cols = ws + local % (we - ws)
            argmax[:, bi, bj] = rows * w + cols
    provenance = RoiProvenance(kind="pool", aggregation="max", feature_shape=(c, h, w),
                               output_shape=(c, oh, ow), argmax=argmax)
    return RoiFeature(values=Tensor(values), provenance=provenance)


def roi_backward(grad_out: np.ndarray, provenance: RoiProvenance,
                 feature_shape: Tuple[int, int, int]) -> np.ndarray:
    """Adjoint of the matching forward: scatter grad_out onto a zero feature map"""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if tuple(feature_shape) != tuple(provenance.feature_shape):
        raise ProvenanceError(f"feature shape {tuple(feature_shape)} != forward's {provenance.feature_shape}")
    if grad_out.shape != tuple(provenance.output_shape):
        raise ProvenanceError(f"grad shape {grad_out.shape} != forward output {provenance.output_shape}")
    c, h, w = feature_shape
    grad = np.zeros((c, h * w))
    channels = np.arange(c)
    if provenance.kind == "pool":
        valid = provenance.argmax >= 0
        chan = np.broadcast_to(channels[:, None, None], provenance.argmax.shape)
        np.add.at(grad, (chan[valid], provenance.argmax[valid]), grad_out[valid])
        return grad.reshape(c, h, w)
    index, weight = provenance.tap_index, provenance.tap_weight
    if provenance.aggregation == "average":
        points = index.shape[2]
        contrib = grad_out[:, :, :, None, None] * weight[None] / points
        np.add.at(grad, (channels[:, None, None, None, None], index[None]), contrib)
    else:
        pick = provenance.argmax[..., None, None]  # [C, oh, ow, 1, 1]
        chosen_index = np.take_along_axis(np.broadcast_to(index[None], (c,) + index.shape), pick, axis=3)[:, :, :, 0]
        chosen_weight = np.take_along_axis(np.broadcast_to(weight[None], (c,) + weight.shape), pick, axis=3)[:, :, :, 0]
        contrib = grad_out[..., None] * chosen_weight
        np.add.at(grad, (channels[:, None, None, None], chosen_index), contrib)
    return grad.reshape(c, h, w)


class RoiAlignOperator(RoiOperator):
    kind = "align"

    def forward(self, feature, roi, spec):
        return roi_align_forward(feature, roi, spec)

    def backward(self, grad_out, provenance, feature_shape):
        return roi_backward(grad_out, provenance, feature_shape)


class RoiPoolOperator(RoiOperator):
    kind = "pool"

    def forward(self, feature, roi, spec):
        return roi_pool_forward(feature, roi, spec)

    def backward(self, grad_out, provenance, feature_shape):
        return roi_backward(grad_out, provenance, feature_shape)


class RoiWarpOperator(RoiOperator):
    kind = "warp"

    def forward(self, feature, roi, spec):
        return roi_warp_forward(feature, roi, spec)

    def backward(self, grad_out, provenance, feature_shape):
        return roi_backward(grad_out, provenance, feature_shape)


def create_roi_operator(kind: str) -> RoiOperator:
    """Factory: operator instance for a RoiOpSpec kind"""
    operators = {"align": RoiAlignOperator, "pool": RoiPoolOperator, "warp": RoiWarpOperator}
    if kind not in operators:
        raise ValueError(f"unknown RoI operator kind {kind!r}")
    return operators[kind]()


class RoiExtract(Function):
    """Batched RoI extraction from one [C,H,W] map; RoI coordinates are constants"""

    def forward(self, feature, rois, spec):
        operator = create_roi_operator(spec.kind)
        c = feature.shape[0]
        outputs = [operator.forward(feature, roi, spec) for roi in rois]
        self.save_for_backward(operator, [o.provenance for o in outputs], feature.shape)
        if not outputs:
            return np.zeros((0, c, spec.output_h, spec.output_w))
        return np.stack([o.values.data for o in outputs])

    def backward(self, grad_output):
        operator, provenances, feature_shape = self.saved
        grad = np.zeros(feature_shape)
        for g, provenance in zip(grad_output, provenances):
            grad += operator.backward(g, provenance, feature_shape)
        return (grad,)


def extract_rois(feature: Tensor, rois: Sequence[Box], spec: RoiOpSpec) -> Tensor:
    """[C,H,W] feature + N boxes -> [N, C, output_h, output_w], differentiable in the feature"""
    return RoiExtract.apply(feature, rois=list(rois), spec=spec)
