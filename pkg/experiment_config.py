"""
Experiment configuration: the dataclasses for every training/ablation knob and
their INI codec (configparser), hashing and copy-with-overrides.
"""

import configparser
import hashlib
import io
import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Tuple

from evalkit import EvalConfig
from heads import HeadConfig
from roiops import RoiOpSpec
from synthgen import SceneSpec

logger = logging.getLogger(__name__)

ROI_OPERATORS = {
    "align-avg": ("align", "average"),
    "align-max": ("align", "max"),
    "pool-max": ("pool", "max"),
    "warp-max": ("warp", "max"),
    "warp-avg": ("warp", "average"),
}
KEYPOINT_OPERATORS = {"align": ("align", "average"), "pool": ("pool", "max")}
BACKBONE_STRIDES = (4, 8, 16, 32)
PROPOSAL_KINDS = ("rpn", "oracle")
THREADS_ENV = "REGIONLAB_THREADS"


class ConfigError(ValueError):
    """Raised for unreadable, unknown or invalid configuration entries"""


@dataclass(frozen=True)
class DatasetConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    train_count: int = 1000
    eval_count: int = 200
    path: str = "data"

    def __post_init__(self):
        if self.train_count < 1 or self.eval_count < 1:
            raise ValueError(f"split sizes must be >= 1, got {self.train_count}/{self.eval_count}")


@dataclass(frozen=True)
class BackboneConfig:
    """One stride-2 stage per factor of two; stage i outputs widths[i] channels"""

    stride: int = 8
    widths: Tuple[int, ...] = (16, 32, 32, 32, 32)
    activation: str = "relu"

    def __post_init__(self):
        if self.stride not in BACKBONE_STRIDES:
            raise ValueError(f"backbone stride must be one of {BACKBONE_STRIDES}, got {self.stride}")
        if len(self.widths) < self.num_stages:
            raise ValueError(f"stride {self.stride} needs {self.num_stages} stage widths, got {len(self.widths)}")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"stage widths must be positive, got {self.widths}")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def num_stages(self) -> int:
        return self.stride.bit_length() - 1

    @property
    def out_channels(self) -> int:
        return self.widths[self.num_stages - 1]


@dataclass(frozen=True)
class TrainSchedule:
    iterations: int = 3000
    lr: float = 0.01
    lr_drop_factor: float = 0.1
    drop_points: Tuple[int, ...] = (2250,)
    warmup_iterations: int = 0
    warmup_factor: float = 1.0 / 3.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    images_per_step: int = 1
    rois_per_image: int = 16
    pos_fraction: float = 0.25
    scale_jitter: bool = False
    checkpoint_interval: int = 500
    log_interval: int = 100
    divergence_threshold: float = 1e4

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if any(d >= self.iterations or d < 0 for d in self.drop_points):
            raise ValueError(f"drop points {self.drop_points} must lie in [0, {self.iterations})")
        if list(self.drop_points) != sorted(self.drop_points):
            raise ValueError(f"drop points must be sorted, got {self.drop_points}")
        if self.rois_per_image < 4:
            raise ValueError(f"rois_per_image must be >= 4, got {self.rois_per_image}")
        if not 0.0 < self.pos_fraction < 1.0:
            raise ValueError(f"pos_fraction must be in (0,1), got {self.pos_fraction}")
        if self.images_per_step < 1 or self.checkpoint_interval < 1 or self.log_interval < 1:
            raise ValueError("images_per_step, checkpoint_interval and log_interval must be >= 1")
        if self.warmup_iterations < 0:
            raise ValueError(f"warmup_iterations must be >= 0, got {self.warmup_iterations}")

    def lr_at(self, iteration: int) -> float:
        lr = self.lr * self.lr_drop_factor ** sum(1 for d in self.drop_points if iteration >= d)
        if iteration < self.warmup_iterations:
            alpha = iteration / self.warmup_iterations
            lr *= self.warmup_factor * (1.0 - alpha) + alpha
        return lr


@dataclass(frozen=True)
class ProposalConfig:
    kind: str = "oracle"
    oracle_jitter: float = 0.15
    oracle_copies: int = 4
    oracle_random_boxes: int = 12
    anchor_scales: Tuple[float, ...] = (16.0, 32.0, 48.0)
    anchor_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    rpn_batch: int = 64
    rpn_nms: float = 0.7
    rpn_top_n: int = 64

    def __post_init__(self):
        if self.kind not in PROPOSAL_KINDS:
            raise ValueError(f"unknown proposal kind {self.kind!r}, expected one of {PROPOSAL_KINDS}")
        if self.oracle_jitter < 0 or self.oracle_copies < 0 or self.oracle_random_boxes < 0:
            raise ValueError("oracle jitter, copies and random boxes must be >= 0")
        if not 0.0 <= self.rpn_negative_iou <= self.rpn_positive_iou <= 1.0:
            raise ValueError(f"rpn thresholds out of order: {self.rpn_negative_iou} / {self.rpn_positive_iou}")
        if self.rpn_batch < 2 or self.rpn_top_n < 1:
            raise ValueError("rpn_batch must be >= 2 and rpn_top_n >= 1")


@dataclass(frozen=True)
class RoiSettings:
    operator: str = "align-avg"
    sampling_points: int = 2
    keypoint_operator: str = "align"

    def __post_init__(self):
        if self.operator not in ROI_OPERATORS:
            raise ValueError(f"unknown RoI operator {self.operator!r}, expected one of {tuple(ROI_OPERATORS)}")
        if self.keypoint_operator not in KEYPOINT_OPERATORS:
            raise ValueError(f"unknown keypoint RoI operator {self.keypoint_operator!r}")
        if self.sampling_points < 1:
            raise ValueError(f"sampling_points must be >= 1, got {self.sampling_points}")

    def spec(self, output_size: int, feature_stride: float) -> RoiOpSpec:
        kind, aggregation = ROI_OPERATORS[self.operator]
        return RoiOpSpec(kind=kind, output_h=output_size, output_w=output_size, sampling_points=self.sampling_points,
                         aggregation=aggregation, feature_stride=float(feature_stride))

    def keypoint_spec(self, output_size: int, feature_stride: float) -> RoiOpSpec:
        kind, aggregation = KEYPOINT_OPERATORS[self.keypoint_operator]
        return RoiOpSpec(kind=kind, output_h=output_size, output_w=output_size, sampling_points=self.sampling_points,
                         aggregation=aggregation, feature_stride=float(feature_stride))


@dataclass(frozen=True)
class InferenceConfig:
    nms_threshold: float = 0.5
    score_threshold: float = 0.05
    top_k: int = 100

    def __post_init__(self):
        if not 0.0 <= self.nms_threshold <= 1.0 or not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("inference thresholds must be in [0,1]")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "default"
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    roi: RoiSettings = field(default_factory=RoiSettings)
    heads: HeadConfig = field(default_factory=HeadConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)


# section name -> ExperimentConfig attribute; [experiment] holds name and seeds
SECTIONS = ("dataset", "backbone", "roi", "heads", "schedule", "proposals", "eval", "inference")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, default: Any, key: str) -> Any:
    if not isinstance(text, str):
        return tuple(text) if isinstance(default, tuple) else text
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(f"not a boolean: {text!r}")
            return lowered in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            element = default[0] if default else 0.0
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            return tuple(_parse_value(t, element, key) for t in items)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e
    return text


def _section_items(cfg: ExperimentConfig, section: str) -> Dict[str, Any]:
    obj = getattr(cfg, section)
    items = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if section == "dataset" and f.name == "scene":
            for sf in fields(value):
                items[sf.name] = getattr(value, sf.name)
        else:
            items[f.name] = value
    return items


def config_to_ini(cfg: ExperimentConfig) -> str:
    """Canonical INI text; equal configs give identical text"""
    parser = configparser.ConfigParser(interpolation=None)
    parser["experiment"] = {"name": cfg.name, "seeds": _format_value(tuple(cfg.seeds))}
    for section in SECTIONS:
        parser[section] = {k: _format_value(v) for k, v in _section_items(cfg, section).items()}
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_to_ini(cfg).encode("utf-8")).hexdigest()[:12]


def _build(values: Dict[str, Dict[str, Any]]) -> ExperimentConfig:
    """Rebuild a config from {section: {key: value}}; missing keys keep defaults"""
    defaults = ExperimentConfig()
    try:
        experiment = values.get("experiment", {})
        seeds = _parse_value(experiment.get("seeds", defaults.seeds), defaults.seeds, "experiment.seeds")
        kwargs = {"name": str(experiment.get("name", defaults.name)), "seeds": tuple(int(s) for s in seeds)}
        for section in SECTIONS:
            default_items = _section_items(defaults, section)
            given = values.get(section, {})
            unknown = sorted(set(given) - set(default_items))
            if unknown:
                raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
            merged = {k: _parse_value(given[k], v, f"{section}.{k}") if k in given else v
                      for k, v in default_items.items()}
            if section == "dataset":
                scene_keys = {f.name for f in fields(SceneSpec)}
                scene = SceneSpec(**{k: merged.pop(k) for k in list(merged) if k in scene_keys})
                kwargs[section] = DatasetConfig(scene=scene, **merged)
            else:
                kwargs[section] = type(getattr(defaults, section))(**merged)
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    allowed = {"experiment", *SECTIONS}
    unknown = sorted(set(parser.sections()) - allowed)
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    experiment_keys = set(parser["experiment"]) if parser.has_section("experiment") else set()
    if experiment_keys - {"name", "seeds"}:
        raise ConfigError(f"[experiment] unknown keys: {', '.join(sorted(experiment_keys - {'name', 'seeds'}))}")
    return _build({s: dict(parser[s]) for s in parser.sections()})


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = parse_config(text)
    logger.debug(f"Loaded config {path} (hash {config_hash(cfg)})")
    return cfg


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(config_to_ini(cfg))


def with_overrides(cfg: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    """Copy of cfg with {"section.key": value} changes applied and revalidated"""
    values = {"experiment": {"name": cfg.name, "seeds": tuple(cfg.seeds)}}
    for section in SECTIONS:
        values[section] = _section_items(cfg, section)
    for dotted, value in overrides.items():
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        if section not in values:
            raise ConfigError(f"override {dotted!r}: unknown section {section!r}")
        if section != "experiment" and key not in values[section]:
            raise ConfigError(f"override {dotted!r}: unknown key {key!r}")
        values[section][key] = value
    return _build(values)


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> Dict[str, Tuple[Any, Any]]:
    """{"section.key": (a_value, b_value)} for every differing field"""
    diff = {}
    for section in SECTIONS:
        items_a, items_b = _section_items(a, section), _section_items(b, section)
        for key in items_a:
            if items_a[key] != items_b[key]:
                diff[f"{section}.{key}"] = (items_a[key], items_b[key])
    if a.name != b.name:
        diff["experiment.name"] = (a.name, b.name)
    if tuple(a.seeds) != tuple(b.seeds):
        diff["experiment.seeds"] = (a.seeds, b.seeds)
    return diff


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning(f"{THREADS_ENV}={raw!r} is not an integer, using 1")
        return 1
