"""
Per-RoI heads and their losses: box classification/regression, the FCN and MLP
mask branches, the keypoint head, and training-target construction.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from boxgeom import Box
from roiops import resample_clamped
from tensorlab import (Parameter, ShapeError, Tensor, conv2d, deconv2d, linear, log_softmax, relu,
                       smooth_l1, softplus, uniform_init, upsample_bilinear2x)

logger = logging.getLogger(__name__)

MASK_VARIANTS = ("sigmoid_per_class", "softmax_multinomial", "class_agnostic")
BRANCH_KINDS = ("fcn", "mlp")
TASK_SETS = ("box", "box_mask", "box_keypoint", "box_mask_keypoint")
MASK_THRESHOLD = 0.5


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = 3
    mask_resolution: int = 14
    mask_variant: str = "sigmoid_per_class"
    branch_kind: str = "fcn"
    keypoint_count: int = 3
    keypoint_resolution: int = 28
    tasks: str = "box_mask"
    conv_width: int = 32
    mask_convs: int = 4
    keypoint_convs: int = 4
    mlp_hidden: int = 128
    box_hidden: int = 128
    box_pool_size: int = 7

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.mask_resolution < 2 or self.mask_resolution % 2:
            raise ValueError(f"mask_resolution must be even and >= 2, got {self.mask_resolution}")
        if self.mask_variant not in MASK_VARIANTS:
            raise ValueError(f"unknown mask_variant {self.mask_variant!r}, expected one of {MASK_VARIANTS}")
        if self.branch_kind not in BRANCH_KINDS:
            raise ValueError(f"unknown branch_kind {self.branch_kind!r}, expected one of {BRANCH_KINDS}")
        if self.tasks not in TASK_SETS:
            raise ValueError(f"unknown tasks {self.tasks!r}, expected one of {TASK_SETS}")
        if self.keypoint_count < 0:
            raise ValueError(f"keypoint_count must be >= 0, got {self.keypoint_count}")
        if self.keypoints_enabled:
            if self.keypoint_resolution < self.mask_resolution:
                raise ValueError(f"keypoint_resolution {self.keypoint_resolution} < mask_resolution {self.mask_resolution}")
            if self.keypoint_resolution % 4:
                raise ValueError(f"keypoint_resolution must be divisible by 4, got {self.keypoint_resolution}")

    @property
    def mask_enabled(self) -> bool:
        return "mask" in self.tasks

    @property
    def keypoints_enabled(self) -> bool:
        return "keypoint" in self.tasks and self.keypoint_count > 0

    @property
    def mask_channels(self) -> int:
        if self.mask_variant == "class_agnostic":
            return 1
        if self.mask_variant == "softmax_multinomial":
            return self.num_classes + 1
        return self.num_classes

    @property
    def mask_input_size(self) -> int:
        return self.mask_resolution // 2

    @property
    def keypoint_input_size(self) -> int:
        return self.keypoint_resolution // 4


@dataclass
class MaskTarget:
    grid: np.ndarray
    class_index: int
    degenerate: bool = False


@dataclass
class KeypointTarget:
    indices: np.ndarray
    visible: np.ndarray

    @property
    def num_visible(self) -> int:
        return int(np.count_nonzero(self.visible))


def _conv_param(name: str, rng: np.random.Generator, c_out: int, c_in: int, k: int) -> Tuple[Parameter, Parameter]:
    weight = uniform_init(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)
    return Parameter(f"{name}.weight", weight), Parameter(f"{name}.bias", np.zeros(c_out))


def _deconv_param(name: str, rng: np.random.Generator, c_in: int, c_out: int) -> Tuple[Parameter, Parameter]:
    weight = uniform_init(rng, (c_in, c_out, 2, 2), c_in * 4, c_out * 4)
    return Parameter(f"{name}.weight", weight), Parameter(f"{name}.bias", np.zeros(c_out))


def _fc_param(name: str, rng: np.random.Generator, d_in: int, d_out: int) -> Tuple[Parameter, Parameter]:
    weight = uniform_init(rng, (d_in, d_out), d_in, d_out)
    return Parameter(f"{name}.weight", weight), Parameter(f"{name}.bias", np.zeros(d_out))


class HeadModule:
    """A bag of named Parameters with a forward call"""

    def __init__(self, name: str):
        self.name = name
        self._params: List[Parameter] = []

    def _register(self, *params: Parameter) -> Tuple[Parameter, ...]:
        self._params.extend(params)
        return params

    def parameters(self) -> List[Parameter]:
        return list(self._params)

    def parameter_count(self) -> int:
        return sum(p.size for p in self._params)


class FcnMaskBranch(HeadModule):
    """Convs at fixed width, one 2x2 stride-2 deconv, then a 1x1 conv to the mask channels"""

    def __init__(self, config: HeadConfig, in_channels: int, rng: np.random.Generator, name: str = "mask"):
        super().__init__(name)
        self.config = config
        width = config.conv_width
        self.convs = []
        c_in = in_channels
        for i in range(config.mask_convs):
            self.convs.append(self._register(*_conv_param(f"{name}.conv{i + 1}", rng, width, c_in, 3)))
            c_in = width
        self.deconv = self._register(*_deconv_param(f"{name}.deconv", rng, width, width))
        self.predictor = self._register(*_conv_param(f"{name}.logits", rng, config.mask_channels, width, 1))

    def __call__(self, x: Tensor) -> Tensor:
        size = self.config.mask_input_size
        if x.shape[-2:] != (size, size):
            raise ShapeError(f"mask branch expects {size}x{size} RoI features, got {x.shape[-2:]}")
        for weight, bias in self.convs:
            x = relu(conv2d(x, weight.value, bias.value, stride=1, pad=1))
        x = relu(deconv2d(x, self.deconv[0].value, self.deconv[1].value, stride=2))
        return conv2d(x, self.predictor[0].value, self.predictor[1].value)


class MlpMaskBranch(HeadModule):
    """Flatten, two hidden fc layers, fc to K*m*m reshaped to [K,m,m]"""

    def __init__(self, config: HeadConfig, in_channels: int, rng: np.random.Generator, name: str = "mask"):
        super().__init__(name)
        self.config = config
        size = config.mask_input_size
        d_in = in_channels * size * size
        hidden = config.mlp_hidden
        m = config.mask_resolution
        self.fc1 = self._register(*_fc_param(f"{name}.fc1", rng, d_in, hidden))
        self.fc2 = self._register(*_fc_param(f"{name}.fc2", rng, hidden, hidden))
        self.predictor = self._register(*_fc_param(f"{name}.logits", rng, hidden, config.mask_channels * m * m))

    def __call__(self, x: Tensor) -> Tensor:
        size = self.config.mask_input_size
        if x.shape[-2:] != (size, size):
            raise ShapeError(f"mask branch expects {size}x{size} RoI features, got {x.shape[-2:]}")
        batched = x.ndim == 4
        n = x.shape[0] if batched else 1
        m = self.config.mask_resolution
        h = x.reshape(n, int(np.prod(x.shape[-3:])))
        h = relu(linear(h, self.fc1[0].value, self.fc1[1].value))
        h = relu(linear(h, self.fc2[0].value, self.fc2[1].value))
        out = linear(h, self.predictor[0].value, self.predictor[1].value)
        shape = (n, self.config.mask_channels, m, m) if batched else (self.config.mask_channels, m, m)
        return out.reshape(shape)


class BoxHead(HeadModule):
    """Two hidden fc layers feeding the (K+1)-way classifier and per-class box deltas"""

    def __init__(self, config: HeadConfig, in_channels: int, rng: np.random.Generator, name: str = "box"):
        super().__init__(name)
        self.config = config
        d_in = in_channels * config.box_pool_size ** 2
        hidden = config.box_hidden
        self.fc1 = self._register(*_fc_param(f"{name}.fc1", rng, d_in, hidden))
        self.fc2 = self._register(*_fc_param(f"{name}.fc2", rng, hidden, hidden))
        self.cls = self._register(*_fc_param(f"{name}.cls", rng, hidden, config.num_classes + 1))
        self.reg = self._register(*_fc_param(f"{name}.reg", rng, hidden, 4 * config.num_classes))

    def __call__(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        n = x.shape[0]
        h = x.reshape(n, int(np.prod(x.shape[1:])))
        h = relu(linear(h, self.fc1[0].value, self.fc1[1].value))
        h = relu(linear(h, self.fc2[0].value, self.fc2[1].value))
        cls_logits = linear(h, self.cls[0].value, self.cls[1].value)
        deltas = linear(h, self.reg[0].value, self.reg[1].value).reshape(n, self.config.num_classes, 4)
        return cls_logits, deltas


class KeypointHead(HeadModule):
    """Conv stack, a deconv to one channel per keypoint type, then fixed 2x bilinear upscaling"""

    def __init__(self, config: HeadConfig, in_channels: int, rng: np.random.Generator, name: str = "keypoint"):
        super().__init__(name)
        self.config = config
        width = config.conv_width
        self.convs = []
        c_in = in_channels
        for i in range(config.keypoint_convs):
            self.convs.append(self._register(*_conv_param(f"{name}.conv{i + 1}", rng, width, c_in, 3)))
            c_in = width
        self.deconv = self._register(*_deconv_param(f"{name}.deconv", rng, width, config.keypoint_count))

    def __call__(self, x: Tensor) -> Tensor:
        size = self.config.keypoint_input_size
        if x.shape[-2:] != (size, size):
            raise ShapeError(f"keypoint head expects {size}x{size} RoI features, got {x.shape[-2:]}")
        for weight, bias in self.convs:
            x = relu(conv2d(x, weight.value, bias.value, stride=1, pad=1))
        x = deconv2d(x, self.deconv[0].value, self.deconv[1].value, stride=2)
        return upsample_bilinear2x(x)


def build_mask_branch(config: HeadConfig, in_channels: int, rng: np.random.Generator) -> FcnMaskBranch:
    if config.branch_kind != "fcn":
        raise ValueError(f"build_mask_branch needs branch_kind 'fcn', got {config.branch_kind!r}")
    return FcnMaskBranch(config, in_channels, rng)


def build_mlp_mask_branch(config: HeadConfig, in_channels: int, rng: np.random.Generator) -> MlpMaskBranch:
    if config.branch_kind != "mlp":
        raise ValueError(f"build_mlp_mask_branch needs branch_kind 'mlp', got {config.branch_kind!r}")
    return MlpMaskBranch(config, in_channels, rng)


def create_mask_branch(config: HeadConfig, in_channels: int, rng: np.random.Generator) -> HeadModule:
    """Factory: the mask branch the config asks for"""
    if config.branch_kind == "mlp":
        return build_mlp_mask_branch(config, in_channels, rng)
    return build_mask_branch(config, in_channels, rng)


def _check_mask_logits(logits: Tensor, target: MaskTarget, channels: int, name: str) -> None:
    m = target.grid.shape[0]
    if logits.shape != (channels, m, m):
        raise ShapeError(f"{name}: logits {logits.shape} do not match target grid {target.grid.shape}")


def mask_loss_sigmoid(logits: Tensor, target: MaskTarget) -> Tensor:
    """Mean per-pixel binary cross-entropy on channel k only; other channels get exactly zero gradient"""
    k = target.class_index
    if not 0 <= k < logits.shape[0]:
        raise ValueError(f"mask_loss_sigmoid: class {k} out of range for {logits.shape[0]} channels")
    _check_mask_logits(logits, target, logits.shape[0], "mask_loss_sigmoid")
    x = logits[k]
    # BCE(sigmoid(x), t) == softplus(x) - x*t
    return (softplus(x) - x * target.grid).mean()


def mask_loss_softmax(logits: Tensor, target: MaskTarget) -> Tensor:
    """Per-pixel (K+1)-way cross-entropy; foreground pixels labelled k+1, background 0"""
    channels = logits.shape[0]
    k = target.class_index
    if not 0 <= k < channels - 1:
        raise ValueError(f"mask_loss_softmax: class {k} out of range for {channels - 1} foreground channels")
    _check_mask_logits(logits, target, channels, "mask_loss_softmax")
    labels = np.where(target.grid > 0, k + 1, 0)
    onehot = (np.arange(channels)[:, None, None] == labels[None]).astype(np.float64)
    m2 = target.grid.size
    return -(log_softmax(logits, axis=0) * onehot).sum() * (1.0 / m2)


def mask_loss(logits: Tensor, target: MaskTarget, variant: str) -> Tensor:
    if variant == "softmax_multinomial":
        return mask_loss_softmax(logits, target)
    if variant == "class_agnostic":
        return mask_loss_sigmoid(logits, MaskTarget(target.grid, 0, target.degenerate))
    return mask_loss_sigmoid(logits, target)


def cls_loss(logits: Tensor, label) -> Tensor:
    """Softmax cross-entropy over K+1 classes; 2-D logits average over rows"""
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    rows = logits if logits.ndim == 2 else logits.reshape(1, logits.shape[0])
    num_classes = rows.shape[1]
    if labels.shape[0] != rows.shape[0]:
        raise ShapeError(f"cls_loss: {rows.shape[0]} logit rows but {labels.shape[0]} labels")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"cls_loss: labels {labels.tolist()} out of range [0,{num_classes})")
    onehot = np.zeros(rows.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return -(log_softmax(rows, axis=1) * onehot).sum() * (1.0 / labels.size)


def box_loss(pred_deltas: Tensor, target_delta: Sequence[float], label: int) -> Tensor:
    """Smooth-L1 summed over class k's four deltas"""
    if label <= 0:
        raise ValueError(f"box_loss is only defined for foreground labels, got {label}")
    if label > pred_deltas.shape[0]:
        raise ValueError(f"box_loss: label {label} out of range for {pred_deltas.shape[0]} classes")
    diff = pred_deltas[label - 1] - np.asarray(target_delta, dtype=np.float64)
    return smooth_l1(diff).sum()


def total_loss(cls: Tensor, box: Optional[Tensor] = None, mask: Optional[Tensor] = None,
               *extra: Optional[Tensor]) -> Tensor:
    """Unweighted sum L = L_cls + L_box + L_mask (+ keypoint / RPN terms when given)"""
    loss = cls
    for term in (box, mask) + extra:
        if term is not None:
            loss = loss + term
    return loss


def make_mask_target(roi: Box, gt_mask: np.ndarray, m: int, class_index: int = 0) -> MaskTarget:
    """Crop the ground-truth mask to the RoI, resample bilinearly to m x m at cell centres, threshold >= 0.5"""
    gt_mask = np.asarray(gt_mask, dtype=np.float64)
    if gt_mask.ndim != 2 or gt_mask.size == 0:
        raise ValueError(f"gt_mask must be a nonempty 2-D grid, got shape {gt_mask.shape}")
    if roi.width <= 0 or roi.height <= 0:
        return MaskTarget(np.zeros((m, m)), class_index, degenerate=True)
    h, w = gt_mask.shape
    xs = roi.x1 + (np.arange(m) + 0.5) * roi.width / m
    ys = roi.y1 + (np.arange(m) + 0.5) * roi.height / m
    grid_x, grid_y = np.meshgrid(xs, ys)
    # mask pixel (r, c) is centred at (c + 0.5, r + 0.5)
    values = resample_clamped(gt_mask, grid_x - 0.5, grid_y - 0.5)
    outside = (grid_x < 0) | (grid_x > w) | (grid_y < 0) | (grid_y > h)
    values[outside] = 0.0
    return MaskTarget((values >= MASK_THRESHOLD).astype(np.float64), class_index)


def make_keypoint_target(roi: Box, keypoints: Sequence[Tuple[float, float, bool]], m: int) -> KeypointTarget:
    """Map each visible keypoint to the RoI-relative cell containing it; outside the RoI -> not visible"""
    if m < 1:
        raise ValueError(f"keypoint resolution must be >= 1, got {m}")
    indices = np.zeros(len(keypoints), dtype=np.int64)
    visible = np.zeros(len(keypoints), dtype=bool)
    if roi.width <= 0 or roi.height <= 0:
        return KeypointTarget(indices, visible)
    for i, (x, y, vis) in enumerate(keypoints):
        if not vis or x < roi.x1 or x > roi.x2 or y < roi.y1 or y > roi.y2:
            continue
        col = min(int(np.floor((x - roi.x1) / roi.width * m)), m - 1)
        row = min(int(np.floor((y - roi.y1) / roi.height * m)), m - 1)
        indices[i] = row * m + col
        visible[i] = True
    return KeypointTarget(indices, visible)


def keypoint_loss(logits: Tensor, target: KeypointTarget) -> Tensor:
    """m^2-way softmax cross-entropy per visible keypoint type, averaged over visible types"""
    kp, m = logits.shape[0], logits.shape[-1]
    if kp != target.indices.shape[0]:
        raise ShapeError(f"keypoint_loss: {kp} heatmaps but {target.indices.shape[0]} keypoint targets")
    if target.num_visible == 0:
        return (logits * 0.0).sum()
    flat = logits.reshape(kp, m * m)
    onehot = np.zeros((kp, m * m))
    onehot[np.flatnonzero(target.visible), target.indices[target.visible]] = 1.0
    return -(log_softmax(flat, axis=1) * onehot).sum() * (1.0 / target.num_visible)
