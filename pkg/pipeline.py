"""
The two-stage detector: a small strided backbone, an RPN or oracle proposal
source, the per-RoI heads, the training loop with checkpoints and the
inference path.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import evalkit
from boxgeom import (Box, RoISample, decode_boxes, encode_boxes, generate_anchors, iou_matrix, match_and_sample,
                     nms_arrays)
from experiment_config import (BackboneConfig, ExperimentConfig, ProposalConfig, TrainSchedule, config_hash,
                               config_to_ini, parse_config)
from heads import (BoxHead, HeadModule, KeypointHead, box_loss, cls_loss, create_mask_branch,
                   keypoint_loss, make_keypoint_target, make_mask_target, mask_loss, total_loss)
from interfaces import ProposalSource
from postproc import (DetectionResult, InstanceMask, decode_detections, decode_keypoints, paste_mask, select_detections,
                      select_mask)
from roiops import extract_rois
from synthgen import InstanceAnnotation, Scene, tight_box
from tensorlab import (Parameter, Tensor, backward, conv2d, load_snapshot, relu, save_snapshot, sgd_step, smooth_l1,
                       softplus, stable_sigmoid, uniform_init)

logger = logging.getLogger(__name__)

# second-stage box coding weights; the RPN uses unit weights
BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
RPN_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
MAX_LOG_SCALE = math.log(1000.0 / 16.0)
METRIC_FIELDS = ("iteration", "lr", "loss", "cls", "box", "mask", "keypoint", "rpn_objectness", "rpn_box", "num_pos")
SCALE_JITTER_RANGE = (80, 96)


class DivergenceError(RuntimeError):
    """Training loss blew up; carries the path of the diagnostic dump"""

    def __init__(self, message: str, dump_path: Optional[str] = None):
        super().__init__(message)
        self.dump_path = dump_path


class CheckpointMismatchError(ValueError):
    """Checkpoint tensors do not fit the configured model"""


def _conv(name: str, rng: np.random.Generator, c_out: int, c_in: int, k: int) -> Tuple[Parameter, Parameter]:
    weight = uniform_init(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)
    return Parameter(f"{name}.weight", weight), Parameter(f"{name}.bias", np.zeros(c_out))


class Backbone(HeadModule):
    """Stages of 3x3 conv + relu sampled at even positions, i.e. a stride-2 conv with floor semantics"""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, in_channels: int = 3):
        super().__init__("backbone")
        self.config = config
        self.stages = []
        c_in = in_channels
        for i in range(config.num_stages):
            width = config.widths[i]
            self.stages.append(self._register(*_conv(f"backbone.stage{i + 1}", rng, width, c_in, 3)))
            c_in = width

    def __call__(self, image: Tensor) -> Tensor:
        stride = self.config.stride
        h, w = image.shape[-2:]
        if h % stride or w % stride:
            raise ValueError(f"image {h}x{w} is not divisible by backbone stride {stride}")
        x = image
        for weight, bias in self.stages:
            x = conv2d(x, weight.value, bias.value, stride=1, pad=1)
            if self.config.activation == "relu":
                x = relu(x)
            # conv2d needs (H+2p-k) divisible by the stride, which an even H with k=3, p=1 is not;
            # the stride-1 pass costs 4x the multiply-adds of a true stride-2 conv at these sizes
            x = x[:, ::2, ::2]
        return x


def run_backbone(backbone: Backbone, image: np.ndarray) -> Tensor:
    return backbone(Tensor(image))


class RpnHead(HeadModule):
    """Shared 3x3 conv, then per-anchor objectness and 4 box deltas via 1x1 convs"""

    def __init__(self, config: ProposalConfig, in_channels: int, rng: np.random.Generator):
        super().__init__("rpn")
        self.config = config
        self.num_anchors = len(config.anchor_scales) * len(config.anchor_ratios)
        self.shared = self._register(*_conv("rpn.conv", rng, in_channels, in_channels, 3))
        self.objectness = self._register(*_conv("rpn.objectness", rng, self.num_anchors, in_channels, 1))
        self.deltas = self._register(*_conv("rpn.deltas", rng, 4 * self.num_anchors, in_channels, 1))

    def __call__(self, features: Tensor) -> Tuple[Tensor, Tensor]:
        """Objectness [A*h*w] and deltas [A*h*w, 4], anchor-major to match anchor_array()"""
        a = self.num_anchors
        _, fh, fw = features.shape
        x = relu(conv2d(features, self.shared[0].value, self.shared[1].value, pad=1))
        objectness = conv2d(x, self.objectness[0].value, self.objectness[1].value).reshape(a * fh * fw)
        raw = conv2d(x, self.deltas[0].value, self.deltas[1].value).reshape(a * 4 * fh * fw)
        # channel a*4+d at cell p sits at flat (a*4+d)*h*w + p
        cells = np.arange(fh * fw)
        index = ((np.arange(a)[:, None, None] * 4 + np.arange(4)[None, None, :]) * fh * fw
                 + cells[None, :, None]).reshape(a * fh * fw, 4)
        return objectness, raw[index]

    def anchor_array(self, fh: int, fw: int, stride: float) -> np.ndarray:
        anchors = generate_anchors(fh, fw, stride, self.config.anchor_scales, self.config.anchor_ratios).array
        return anchors.reshape(fh, fw, self.num_anchors, 4).transpose(2, 0, 1, 3).reshape(-1, 4)


def rpn_propose(objectness: np.ndarray, deltas: np.ndarray, anchors: np.ndarray, image_h: int, image_w: int,
                top_n: int = 64, nms_threshold: float = 0.7) -> List[Tuple[Box, float]]:
    """Decode, clip, drop empty boxes, NMS; the top_n survivors by objectness (ties by anchor index)"""
    boxes = decode_boxes(deltas, anchors, RPN_WEIGHTS, max_log_scale=MAX_LOG_SCALE)
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, image_w)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, image_h)
    valid = np.flatnonzero((boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0))
    if valid.size == 0:
        return []
    order = valid[np.argsort(-objectness[valid], kind="stable")][:6 * top_n]
    keep = nms_arrays(boxes[order], objectness[order], nms_threshold)[:top_n]
    return [(Box.from_array(boxes[order[k]]), float(objectness[order[k]])) for k in keep]


def rpn_targets(anchors: np.ndarray, annotations: Sequence[InstanceAnnotation], config: ProposalConfig,
                rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Sampled anchor indices, their 0/1 labels, and positive indices with regression targets"""
    if not annotations:
        negatives = np.arange(anchors.shape[0])
        chosen = rng.choice(negatives, size=min(config.rpn_batch, negatives.size), replace=False)
        return chosen, np.zeros(chosen.size), np.array([], dtype=int), np.zeros((0, 4))
    gts = np.stack([a.box.as_array() for a in annotations])
    overlaps = iou_matrix(anchors, gts)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps.max(axis=1)
    labels = np.full(anchors.shape[0], -1)
    labels[best_iou < config.rpn_negative_iou] = 0
    labels[best_iou >= config.rpn_positive_iou] = 1
    # every GT keeps its best anchor as a positive
    labels[overlaps.argmax(axis=0)] = 1
    positives = np.flatnonzero(labels == 1)
    negatives = np.flatnonzero(labels == 0)
    num_pos = min(positives.size, config.rpn_batch // 2)
    pos = rng.choice(positives, size=num_pos, replace=False) if num_pos else np.array([], dtype=int)
    num_neg = min(negatives.size, config.rpn_batch - num_pos)
    neg = rng.choice(negatives, size=num_neg, replace=False) if num_neg else np.array([], dtype=int)
    chosen = np.concatenate([pos, neg]).astype(int)
    targets = encode_boxes(gts[best_gt[pos]], anchors[pos], RPN_WEIGHTS) if num_pos else np.zeros((0, 4))
    return chosen, np.concatenate([np.ones(num_pos), np.zeros(num_neg)]), pos.astype(int), targets


def _random_box(rng: np.random.Generator, image_h: int, image_w: int) -> Box:
    size_w, size_h = rng.uniform(8.0, 48.0, size=2)
    x1 = rng.uniform(0.0, max(image_w - size_w, 1.0))
    y1 = rng.uniform(0.0, max(image_h - size_h, 1.0))
    return Box(x1, y1, min(x1 + size_w, image_w), min(y1 + size_h, image_h))


class OracleProposalSource(ProposalSource):
    """Ground-truth boxes with uniform relative jitter, plus random background boxes"""

    def __init__(self, config: ProposalConfig, include_ground_truth: bool = True):
        self.config = config
        self.include_ground_truth = include_ground_truth
        self.logger = logging.getLogger(__name__)

    def propose(self, image_shape, annotations, rng):
        image_h, image_w = image_shape
        proposals = []
        for ann in annotations:
            box = ann.box
            if self.include_ground_truth:
                proposals.append(box)
            for _ in range(self.config.oracle_copies):
                shift = rng.uniform(-1.0, 1.0, size=4) * self.config.oracle_jitter
                x1 = box.x1 + shift[0] * box.width
                y1 = box.y1 + shift[1] * box.height
                x2 = max(box.x2 + shift[2] * box.width, x1 + 1.0)
                y2 = max(box.y2 + shift[3] * box.height, y1 + 1.0)
                proposals.append(Box(x1, y1, x2, y2).clipped(image_h, image_w))
        for _ in range(self.config.oracle_random_boxes):
            proposals.append(_random_box(rng, image_h, image_w))
        return [p for p in proposals if p.width > 0 and p.height > 0]


class RegionModel:
    """Backbone, optional RPN and the heads selected by the config"""

    def __init__(self, config: ExperimentConfig, seed: int):
        self.config = config
        self.seed = seed
        self.logger = logging.getLogger(__name__)
        rng = np.random.default_rng([seed, 7919])
        self.backbone = Backbone(config.backbone, rng)
        channels = config.backbone.out_channels
        heads = config.heads
        self.rpn = RpnHead(config.proposals, channels, rng) if config.proposals.kind == "rpn" else None
        self.box_head = BoxHead(heads, channels, rng)
        self.mask_branch = create_mask_branch(heads, channels, rng) if heads.mask_enabled else None
        self.keypoint_head = KeypointHead(heads, channels, rng) if heads.keypoints_enabled else None
        stride = config.backbone.stride
        self.box_spec = config.roi.spec(heads.box_pool_size, stride)
        self.mask_spec = config.roi.spec(heads.mask_input_size, stride)
        self.keypoint_spec = config.roi.keypoint_spec(heads.keypoint_input_size, stride)
        self.oracle = OracleProposalSource(config.proposals)
        self.oracle_inference = OracleProposalSource(config.proposals, include_ground_truth=False)

    def modules(self) -> List[HeadModule]:
        return [m for m in (self.backbone, self.rpn, self.box_head, self.mask_branch, self.keypoint_head)
                if m is not None]

    def parameters(self) -> List[Parameter]:
        return [p for m in self.modules() for p in m.parameters()]

    def state(self) -> Dict[str, np.ndarray]:
        tensors = {}
        for p in self.parameters():
            tensors[p.name] = p.value.data
            tensors[f"{p.name}.momentum"] = p.momentum_buffer.data
        return tensors

    def load_state(self, tensors: Dict[str, np.ndarray]) -> None:
        problems = []
        for p in self.parameters():
            for key, expected in ((p.name, p.shape), (f"{p.name}.momentum", p.shape)):
                if key not in tensors:
                    problems.append(f"missing {key} {expected}")
                elif tensors[key].shape != expected:
                    problems.append(f"{key}: checkpoint {tensors[key].shape} vs model {expected}")
        known = {p.name for p in self.parameters()} | {f"{p.name}.momentum" for p in self.parameters()}
        problems.extend(f"unexpected {k} {tensors[k].shape}" for k in sorted(set(tensors) - known))
        if problems:
            raise CheckpointMismatchError("checkpoint does not match model: " + "; ".join(problems))
        for p in self.parameters():
            p.value.data = np.array(tensors[p.name], dtype=np.float64)
            p.momentum_buffer.data = np.array(tensors[f"{p.name}.momentum"], dtype=np.float64)

    def propose(self, features: Tensor, image_shape: Tuple[int, int],
                annotations: Sequence[InstanceAnnotation], rng: np.random.Generator,
                training: bool) -> Tuple[List[Box], Optional[Tuple[Tensor, Tensor]]]:
        """Proposals for one image, and the RPN loss when training an RPN"""
        if self.rpn is None:
            source = self.oracle if training else self.oracle_inference
            return source.propose(image_shape, annotations, rng), None
        image_h, image_w = image_shape
        _, fh, fw = features.shape
        anchors = self.rpn.anchor_array(fh, fw, self.config.backbone.stride)
        objectness, deltas = self.rpn(features)
        scored = rpn_propose(objectness.data, deltas.data, anchors, image_h, image_w,
                             self.config.proposals.rpn_top_n, self.config.proposals.rpn_nms)
        proposals = [box for box, _ in scored]
        if not training:
            return proposals, None
        proposals = proposals + [a.box for a in annotations]
        chosen, labels, positives, targets = rpn_targets(anchors, annotations, self.config.proposals, rng)
        logits = objectness[chosen]
        objectness_loss = (softplus(logits) - logits * labels).mean()
        if positives.size:
            box_term = smooth_l1(deltas[positives] - targets).sum() * (1.0 / max(chosen.size, 1))
        else:
            box_term = (deltas * 0.0).sum()
        return proposals, (objectness_loss, box_term)


@dataclass
class StepLosses:
    total: Tensor
    components: Dict[str, float]
    num_pos: int


def _zero(like: Tensor) -> Tensor:
    return (like * 0.0).sum()


def image_losses(model: RegionModel, image: np.ndarray, annotations: Sequence[InstanceAnnotation],
                 rng: np.random.Generator) -> StepLosses:
    """Multi-task loss for one image: cls over all sampled RoIs, box/mask/keypoint over positives"""
    config = model.config
    heads = config.heads
    features = run_backbone(model.backbone, image)
    image_shape = image.shape[-2:]
    proposals, rpn_terms = model.propose(features, image_shape, annotations, rng, training=True)
    samples: List[RoISample] = match_and_sample(proposals, annotations, config.schedule.rois_per_image,
                                                config.schedule.pos_fraction, rng, BOX_WEIGHTS) if proposals else []
    components = {"cls": 0.0, "box": 0.0, "mask": 0.0, "keypoint": 0.0, "rpn_objectness": 0.0, "rpn_box": 0.0}
    zero = _zero(features)
    if not samples:
        total = zero
        if rpn_terms is not None:
            total = total_loss(zero, None, None, *rpn_terms)
            components.update(rpn_objectness=rpn_terms[0].item(), rpn_box=rpn_terms[1].item())
        return StepLosses(total, components, 0)

    roi_features = extract_rois(features, [s.roi for s in samples], model.box_spec)
    cls_logits, deltas = model.box_head(roi_features)
    labels = np.array([s.label for s in samples])
    l_cls = cls_loss(cls_logits, labels)
    positives = [i for i, s in enumerate(samples) if s.is_positive]
    num_pos = len(positives)

    l_box, l_mask, l_keypoint = zero, zero, None
    if num_pos:
        l_box = zero
        for i in positives:
            l_box = l_box + box_loss(deltas[i], samples[i].regression_target, samples[i].label)
        l_box = l_box * (1.0 / num_pos)
        pos_rois = [samples[i].roi for i in positives]
        if model.mask_branch is not None:
            mask_logits = model.mask_branch(extract_rois(features, pos_rois, model.mask_spec))
            l_mask = zero
            for row, i in enumerate(positives):
                sample = samples[i]
                gt = annotations[sample.matched_gt]
                target = make_mask_target(sample.roi, gt.mask, heads.mask_resolution, sample.label - 1)
                l_mask = l_mask + mask_loss(mask_logits[row], target, heads.mask_variant)
            l_mask = l_mask * (1.0 / num_pos)
        if model.keypoint_head is not None:
            heatmaps = model.keypoint_head(extract_rois(features, pos_rois, model.keypoint_spec))
            l_keypoint = zero
            for row, i in enumerate(positives):
                gt = annotations[samples[i].matched_gt]
                target = make_keypoint_target(samples[i].roi, gt.keypoints, heads.keypoint_resolution)
                l_keypoint = l_keypoint + keypoint_loss(heatmaps[row], target)
            l_keypoint = l_keypoint * (1.0 / num_pos)

    extras = [t for t in (l_keypoint,) if t is not None] + (list(rpn_terms) if rpn_terms is not None else [])
    total = total_loss(l_cls, l_box, l_mask if model.mask_branch is not None else None, *extras)
    components.update(cls=l_cls.item(), box=l_box.item(), mask=l_mask.item(),
                      keypoint=l_keypoint.item() if l_keypoint is not None else 0.0)
    if rpn_terms is not None:
        components.update(rpn_objectness=rpn_terms[0].item(), rpn_box=rpn_terms[1].item())
    return StepLosses(total, components, num_pos)


def _resize_nearest(grid: np.ndarray, size: int) -> np.ndarray:
    h, w = grid.shape[-2:]
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return grid[..., rows[:, None], cols[None, :]]


def scale_scene(image: np.ndarray, annotations: Sequence[InstanceAnnotation],
                size: int) -> Tuple[np.ndarray, List[InstanceAnnotation]]:
    """Nearest-neighbour resize to size x size with masks, boxes and keypoints scaled consistently"""
    h, w = image.shape[-2:]
    sx, sy = size / w, size / h
    scaled = []
    for ann in annotations:
        mask = _resize_nearest(ann.mask, size)
        if not mask.any():
            continue
        keypoints = [(x * sx, y * sy, v and 0.0 <= x * sx < size and 0.0 <= y * sy < size)
                     for x, y, v in ann.keypoints]
        scaled.append(InstanceAnnotation(ann.class_id, tight_box(mask), mask, keypoints, ann.depth))
    return _resize_nearest(image, size), scaled


def _jitter_sizes(stride: int) -> List[int]:
    low, high = SCALE_JITTER_RANGE
    return [s for s in range(low, high + 1) if s % stride == 0]


def save_checkpoint(path: str, model: RegionModel, iteration: int) -> None:
    meta = {"config": config_to_ini(model.config), "config_hash": config_hash(model.config),
            "iteration": iteration, "seed": model.seed}
    save_snapshot(path, model.state(), meta)


def load_model(path: str, config: Optional[ExperimentConfig] = None) -> Tuple[RegionModel, int]:
    """Rebuild the model from a checkpoint; a config given explicitly must fit its tensors"""
    tensors, meta = load_snapshot(path)
    if config is None:
        config = parse_config(meta["config"])
    model = RegionModel(config, int(meta.get("seed", 0)))
    model.load_state(tensors)
    return model, int(meta.get("iteration", 0))


def checkpoint_path(out_dir: str, config: ExperimentConfig, seed: int, iteration: Optional[int] = None) -> str:
    suffix = "final" if iteration is None else f"it{iteration:06d}"
    return os.path.join(out_dir, f"{config_hash(config)}_seed{seed}_{suffix}.ckpt")


def metrics_path(out_dir: str, config: ExperimentConfig, seed: int) -> str:
    return os.path.join(out_dir, f"{config_hash(config)}_seed{seed}_metrics.csv")


def train(config: ExperimentConfig, scenes: Sequence[Scene], seed: int, out_dir: str,
          resume_from: Optional[str] = None) -> str:
    """Run the schedule; returns the final checkpoint path.

    Randomness at iteration t comes from default_rng([seed, t]) and the image
    order from a per-epoch permutation, so a resumed run replays the
    uninterrupted one exactly.
    """
    if not scenes:
        raise ValueError("train needs at least one scene")
    os.makedirs(out_dir, exist_ok=True)
    schedule: TrainSchedule = config.schedule
    model = RegionModel(config, seed)
    start = 0
    if resume_from is not None:
        tensors, meta = load_snapshot(resume_from)
        if meta.get("config_hash") != config_hash(config):
            raise CheckpointMismatchError(f"{resume_from} was written by config {meta.get('config_hash')}, "
                                          f"not {config_hash(config)}")
        model.load_state(tensors)
        start = int(meta["iteration"])
        logger.info(f"Resuming from {resume_from} at iteration {start}")

    log_file = metrics_path(out_dir, config, seed)
    mode = "a" if resume_from is not None and os.path.exists(log_file) else "w"
    params = model.parameters()
    sizes = _jitter_sizes(config.backbone.stride)
    with open(log_file, mode, newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        if mode == "w":
            writer.writeheader()
        for iteration in range(start, schedule.iterations):
            rng = np.random.default_rng([seed, iteration])
            lr = schedule.lr_at(iteration)
            loss = None
            components = {k: 0.0 for k in METRIC_FIELDS[3:-1]}
            num_pos = 0
            for slot in range(schedule.images_per_step):
                position = iteration * schedule.images_per_step + slot
                epoch, offset = divmod(position, len(scenes))
                order = np.random.default_rng([seed, epoch, 1]).permutation(len(scenes))
                scene = scenes[order[offset]]
                image, annotations = scene.image, scene.annotations
                if schedule.scale_jitter and sizes:
                    image, annotations = scale_scene(image, annotations, int(rng.choice(sizes)))
                step = image_losses(model, image, annotations, rng)
                loss = step.total if loss is None else loss + step.total
                for key, value in step.components.items():
                    components[key] += value / schedule.images_per_step
                num_pos += step.num_pos
            loss = loss * (1.0 / schedule.images_per_step)
            value = loss.item()
            if not math.isfinite(value) or value > schedule.divergence_threshold:
                dump = checkpoint_path(out_dir, config, seed, iteration) + ".diverged"
                save_checkpoint(dump, model, iteration)
                logger.error(f"Loss diverged at iteration {iteration} ({value}); state dumped to {dump}")
                raise DivergenceError(f"loss {value} at iteration {iteration}", dump)
            backward(loss, params)
            sgd_step(params, lr, schedule.momentum, schedule.weight_decay)
            writer.writerow({"iteration": iteration, "lr": lr, "loss": value, "num_pos": num_pos, **components})
            done = iteration + 1
            if done % schedule.log_interval == 0:
                logger.info(f"[seed {seed}] iteration {done}/{schedule.iterations} loss {value:.4f} lr {lr:g}")
            if done % schedule.checkpoint_interval == 0 and done < schedule.iterations:
                save_checkpoint(checkpoint_path(out_dir, config, seed, done), model, done)
    final = checkpoint_path(out_dir, config, seed)
    save_checkpoint(final, model, schedule.iterations)
    logger.info(f"Training finished, checkpoint {final}")
    return final


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def infer(model: RegionModel, image: np.ndarray, annotations: Sequence[InstanceAnnotation] = (),
          top_k: Optional[int] = None, rng: Optional[np.random.Generator] = None
          ) -> List[Tuple[DetectionResult, InstanceMask]]:
    """Box pass on proposals, then mask/keypoint passes re-extracted on the surviving detections"""
    config = model.config
    settings = config.inference
    top_k = settings.top_k if top_k is None else top_k
    rng = rng if rng is not None else np.random.default_rng([model.seed, 104729])
    image_h, image_w = image.shape[-2:]
    features = run_backbone(model.backbone, image)
    proposals, _ = model.propose(features, (image_h, image_w), annotations, rng, training=False)
    if not proposals:
        return []
    cls_logits, deltas = model.box_head(extract_rois(features, proposals, model.box_spec))
    probs = _softmax_rows(cls_logits.data)
    scored = decode_detections(proposals, probs, deltas.data, image_h, image_w, BOX_WEIGHTS, MAX_LOG_SCALE)
    detections = select_detections(scored, settings.nms_threshold, settings.score_threshold, top_k)
    detections = [d for d in detections if d.box.width > 0 and d.box.height > 0]
    if not detections:
        return []
    boxes = [d.box for d in detections]
    heads = config.heads
    if model.mask_branch is not None:
        mask_logits = model.mask_branch(extract_rois(features, boxes, model.mask_spec)).data
        for det, logits in zip(detections, mask_logits):
            det.mask_logits = logits
    if model.keypoint_head is not None:
        heatmaps = model.keypoint_head(extract_rois(features, boxes, model.keypoint_spec)).data
        for det, maps in zip(detections, heatmaps):
            det.keypoint_heatmaps = maps
            det.keypoints = decode_keypoints(maps, det.box)
    results = []
    for index, det in enumerate(detections):
        if det.mask_logits is not None:
            if heads.mask_variant == "softmax_multinomial":
                probs_k = _softmax_rows(np.moveaxis(det.mask_logits, 0, -1))[..., det.class_id]
            else:
                probs_k = stable_sigmoid(select_mask(det.mask_logits, det.class_id,
                                                     heads.mask_variant == "class_agnostic"))
            pasted = paste_mask(probs_k, det.box, image_h, image_w, detection_index=index)
        else:
            pasted = paste_mask(np.ones((2, 2)), det.box, image_h, image_w, detection_index=index)
        det.mask = pasted.grid
        results.append((det, pasted))
    return results


def evaluate_model(model: RegionModel, scenes: Sequence[Scene]) -> Dict[str, float]:
    """Mask and box AP/AP50/AP75, plus keypoint PCK when the keypoint head is on"""
    config = model.config
    detections, truths = [], []
    for scene in scenes:
        results = infer(model, scene.image, scene.annotations)
        detections.append([det for det, _ in results])
        truths.append(scene.annotations)
    return evaluate_detections(detections, truths, config)


def evaluate_detections(detections: Sequence[Sequence[DetectionResult]],
                        truths: Sequence[Sequence[InstanceAnnotation]], config: ExperimentConfig) -> Dict[str, float]:
    report = {}
    for kind in ("mask", "box"):
        eval_config = evalkit.EvalConfig(config.eval.iou_thresholds, kind, config.eval.max_detections_per_image,
                                         config.eval.interpolation_points, config.eval.pck_alpha)
        report.update(evalkit.evaluate(detections, truths, eval_config))
    if config.heads.keypoints_enabled:
        pck = evalkit.keypoint_pck(detections, truths, config.eval.pck_alpha)
        if pck is not None:
            report["keypoint_PCK"] = pck
    return report


def ap_series(model: RegionModel, scenes: Sequence[Scene], kind: str = "mask") -> List[Tuple[float, float]]:
    config = model.config
    detections, truths = [], []
    for scene in scenes:
        detections.append([det for det, _ in infer(model, scene.image, scene.annotations)])
        truths.append(scene.annotations)
    eval_config = evalkit.EvalConfig(config.eval.iou_thresholds, kind, config.eval.max_detections_per_image,
                                     config.eval.interpolation_points, config.eval.pck_alpha)
    return evalkit.ap_by_threshold(detections, truths, eval_config)
