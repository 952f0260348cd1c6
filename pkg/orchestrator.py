"""
Ablation orchestration service.
The orchestrator depends on the CellRunner and ReportRenderer abstractions;
factories at the bottom wire the production and smoke-test variants.
"""

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import pipeline
from experiment_config import ExperimentConfig, config_diff, config_hash, thread_count, with_overrides
from heads import create_mask_branch
from interfaces import CellRunner, ReportRenderer
from report_renderer import JsonReportRenderer, SeriesRenderer, TableRenderer, signed_delta
from synthgen import DatasetFormatError, Scene, generate_scenes, read_dataset

MIN_SEEDS = 3
AGNOSTIC_TOLERANCE = 0.03


@dataclass(frozen=True)
class AblationAxis:
    name: str
    key: str
    variants: Tuple[Tuple[str, object], ...]
    base_overrides: Tuple[Tuple[str, object], ...] = ()
    metric: str = "mask_AP"


AXES = {
    "roiop": AblationAxis("roiop", "roi.operator",
                          (("align-avg", "align-avg"), ("align-max", "align-max"), ("pool-max", "pool-max"),
                           ("warp-max", "warp-max"), ("warp-avg", "warp-avg")),
                          (("proposals.kind", "oracle"), ("backbone.stride", 16))),
    "maskloss": AblationAxis("maskloss", "heads.mask_variant",
                             (("sigmoid", "sigmoid_per_class"), ("softmax", "softmax_multinomial"))),
    "branch": AblationAxis("branch", "heads.branch_kind", (("fcn", "fcn"), ("mlp", "mlp"))),
    "agnostic": AblationAxis("agnostic", "heads.mask_variant",
                             (("class-specific", "sigmoid_per_class"), ("class-agnostic", "class_agnostic"))),
    "keypoint_roiop": AblationAxis("keypoint_roiop", "roi.keypoint_operator", (("align", "align"), ("pool", "pool")),
                                   (("heads.tasks", "box_mask_keypoint"),), metric="keypoint_PCK"),
    "multitask": AblationAxis("multitask", "heads.tasks",
                              (("box", "box"), ("box+mask", "box_mask"), ("box+keypoint", "box_keypoint"),
                               ("box+mask+keypoint", "box_mask_keypoint")), metric="box_AP"),
    "sampling": AblationAxis("sampling", "roi.sampling_points", (("1", 1), ("2", 2), ("3", 3), ("4", 4))),
    "stride": AblationAxis("stride", "backbone.stride", (("16", 16), ("32", 32)), (("roi.operator", "align-avg"),)),
}


@dataclass
class AblationReport:
    axis: str
    metric: str
    seeds: List[int]
    variants: List[str]
    config_hashes: Dict[str, str]
    cells: Dict[str, Dict[int, Optional[Dict[str, float]]]]
    deltas: Dict[str, Dict[str, Dict]] = field(default_factory=dict)
    checks: Dict[str, Dict] = field(default_factory=dict)

    @property
    def failed_cells(self) -> List[Tuple[str, int]]:
        return [(v, s) for v in self.variants for s in self.seeds if self.cells[v].get(s) is None]

    def to_dict(self) -> Dict:
        return {
            "axis": self.axis,
            "metric": self.metric,
            "seeds": self.seeds,
            "variants": self.variants,
            "config_hashes": self.config_hashes,
            "cells": {v: {str(s): m for s, m in cells.items()} for v, cells in self.cells.items()},
            "deltas": self.deltas,
            "checks": self.checks,
        }


def load_splits(config: ExperimentConfig) -> Tuple[List[Scene], List[Scene]]:
    """Train/eval scenes from the dataset directory, or regenerated when it is absent"""
    dataset = config.dataset
    train_dir = os.path.join(dataset.path, "train")
    eval_dir = os.path.join(dataset.path, "eval")
    if os.path.isdir(train_dir) and os.path.isdir(eval_dir):
        train_spec, train_scenes = read_dataset(train_dir)
        eval_spec, eval_scenes = read_dataset(eval_dir)
        if train_spec != dataset.scene or eval_spec != dataset.scene:
            raise DatasetFormatError(f"{dataset.path}: stored scene spec differs from the configured one")
        return train_scenes[:dataset.train_count], eval_scenes[:dataset.eval_count]
    logging.getLogger(__name__).info(f"No dataset at {dataset.path}, generating scenes in memory")
    return (generate_scenes(dataset.scene, dataset.train_count),
            generate_scenes(dataset.scene, dataset.eval_count, start=dataset.train_count))


class TrainEvalCellRunner(CellRunner):
    """Trains one (config, seed) cell and evaluates it on the held-out split"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def run_cell(self, config, seed, out_dir):
        train_scenes, eval_scenes = load_splits(config)
        checkpoint = pipeline.train(config, train_scenes, seed, out_dir)
        model, _ = pipeline.load_model(checkpoint, config)
        metrics = pipeline.evaluate_model(model, eval_scenes)
        for threshold, ap in pipeline.ap_series(model, eval_scenes, "mask" if config.heads.mask_enabled else "box"):
            metrics[f"AP@{threshold:.2f}"] = ap
        self.logger.info(f"Cell {config_hash(config)} seed {seed}: {metrics}")
        return metrics


def _run_cell_job(runner: CellRunner, config: ExperimentConfig, seed: int, out_dir: str) -> Dict[str, float]:
    return runner.run_cell(config, seed, out_dir)


def mask_branch_parameter_counts(config: ExperimentConfig) -> Dict[str, int]:
    """Mask-branch parameter counts of the FCN and MLP variants at the config's m and K"""
    counts = {}
    channels = config.backbone.out_channels
    for kind in ("fcn", "mlp"):
        heads = replace(config.heads, branch_kind=kind)
        counts[kind] = create_mask_branch(heads, channels, np.random.default_rng(0)).parameter_count()
    return counts


class AblationOrchestrator:
    """
    Coordinates ablation cells and report emission
    Depends on the CellRunner and ReportRenderer abstractions
    """

    def __init__(self,
                 cell_runner: CellRunner,
                 table_renderer: ReportRenderer,
                 json_renderer: ReportRenderer,
                 series_renderer: ReportRenderer,
                 max_workers: int = 1):
        self.cell_runner = cell_runner
        self.table_renderer = table_renderer
        self.json_renderer = json_renderer
        self.series_renderer = series_renderer
        self.max_workers = max(1, max_workers)
        self.logger = logging.getLogger(__name__)

    def variant_configs(self, axis: AblationAxis, base: ExperimentConfig) -> Dict[str, ExperimentConfig]:
        """One config per variant; each differs from the first in exactly the axis field"""
        base = with_overrides(base, dict(axis.base_overrides)) if axis.base_overrides else base
        configs = {label: with_overrides(base, {axis.key: value}) for label, value in axis.variants}
        reference = next(iter(configs.values()))
        for label, cfg in configs.items():
            changed = set(config_diff(reference, cfg))
            if not changed <= {axis.key}:
                raise AssertionError(f"variant {label} differs in {sorted(changed)}, expected only {axis.key}")
        return configs

    def run_ablation(self, axis_name: str, base: ExperimentConfig, seeds: Sequence[int], out_dir: str) -> AblationReport:
        """Train and evaluate every (variant, seed) cell, then fold the results into a report"""
        if axis_name not in AXES:
            raise ValueError(f"unknown ablation axis {axis_name!r}, expected one of {sorted(AXES)}")
        if len(seeds) < MIN_SEEDS:
            raise ValueError(f"ablations need at least {MIN_SEEDS} seeds, got {len(seeds)}")
        axis = AXES[axis_name]
        configs = self.variant_configs(axis, base)
        os.makedirs(out_dir, exist_ok=True)
        self.logger.info(f"Ablation {axis_name}: {len(configs)} variants x {len(seeds)} seeds")

        jobs = [(label, seed) for label in configs for seed in seeds]
        results = self._run_jobs(jobs, configs, out_dir)
        report = AblationReport(
            axis=axis_name,
            metric=axis.metric,
            seeds=list(seeds),
            variants=list(configs),
            config_hashes={label: config_hash(cfg) for label, cfg in configs.items()},
            cells={label: {seed: results[(label, seed)] for seed in seeds} for label in configs},
        )
        report.deltas = self._compute_deltas(report)
        report.checks = self._acceptance_checks(report, configs)
        for label, seed in report.failed_cells:
            self.logger.warning(f"Cell {label} / seed {seed} failed and is excluded from deltas")
        return report

    def _run_jobs(self, jobs, configs, out_dir) -> Dict[Tuple[str, int], Optional[Dict[str, float]]]:
        results = {}
        if self.max_workers == 1:
            for label, seed in jobs:
                results[(label, seed)] = self._run_one(label, seed, configs[label], out_dir)
            return results
        with ProcessPoolExecutor(max_workers=self.max_workers) as pool:
            futures = {(label, seed): pool.submit(_run_cell_job, self.cell_runner, configs[label], seed, out_dir)
                       for label, seed in jobs}
            for key in jobs:
                try:
                    results[key] = futures[key].result()
                except Exception as e:
                    self.logger.error(f"Cell {key[0]} / seed {key[1]} failed: {str(e)}")
                    results[key] = None
        return results

    def _run_one(self, label: str, seed: int, config: ExperimentConfig, out_dir: str) -> Optional[Dict[str, float]]:
        self.logger.info(f"Running cell {label} / seed {seed} ({config_hash(config)})")
        try:
            return self.cell_runner.run_cell(config, seed, out_dir)
        except Exception as e:
            self.logger.error(f"Cell {label} / seed {seed} failed: {str(e)}")
            return None

    def _compute_deltas(self, report: AblationReport) -> Dict[str, Dict[str, Dict]]:
        """Per variant and metric: per-seed differences against the first variant, their median and signs"""
        reference = report.variants[0]
        deltas = {}
        for label in report.variants[1:]:
            per_metric = {}
            metrics = set()
            for seed in report.seeds:
                for cell in (report.cells[label].get(seed), report.cells[reference].get(seed)):
                    if cell:
                        metrics.update(cell)
            for metric in sorted(metrics):
                values = []
                for seed in report.seeds:
                    a, b = report.cells[label].get(seed), report.cells[reference].get(seed)
                    if a is None or b is None or metric not in a or metric not in b:
                        continue
                    values.append(a[metric] - b[metric])
                if not values:
                    continue
                per_metric[metric] = {
                    "per_seed": values,
                    "median": float(np.median(values)),
                    "positive": sum(1 for v in values if v > 0),
                    "negative": sum(1 for v in values if v < 0),
                    "zero": sum(1 for v in values if v == 0),
                }
            deltas[label] = per_metric
        return deltas

    def _wins(self, report: AblationReport, better: str, worse: str, metric: str) -> Tuple[int, int]:
        wins, total = 0, 0
        for seed in report.seeds:
            a, b = report.cells[better].get(seed), report.cells[worse].get(seed)
            if a is None or b is None or metric not in a or metric not in b:
                continue
            total += 1
            wins += a[metric] > b[metric]
        return wins, total

    def _median(self, report: AblationReport, label: str, metric: str) -> Optional[float]:
        values = [c[metric] for c in report.cells[label].values() if c is not None and metric in c]
        return float(np.median(values)) if values else None

    def _acceptance_checks(self, report: AblationReport, configs: Dict[str, ExperimentConfig]) -> Dict[str, Dict]:
        """Directional checks; 'hard' failures make the harness exit with the acceptance code"""
        needed = len(report.seeds) - len(report.seeds) // 5

        def sign_check(better: str, worse: str, metric: str) -> Dict:
            wins, total = self._wins(report, better, worse, metric)
            return {"passed": total > 0 and wins >= needed, "hard": True,
                    "detail": f"{better} > {worse} on {metric} in {wins}/{total} seeds (need {needed})"}

        checks = {}
        if report.axis == "roiop":
            checks["align_beats_pool"] = sign_check("align-avg", "pool-max", "mask_AP")
            gap = {}
            for metric in ("mask_AP50", "mask_AP75"):
                a, b = self._median(report, "align-avg", metric), self._median(report, "pool-max", metric)
                gap[metric] = None if a is None or b is None else a - b
            ok = None not in gap.values() and gap["mask_AP75"] >= gap["mask_AP50"]
            checks["stricter_metric_gap"] = {"passed": ok, "hard": True,
                                             "detail": f"AP75 gap {gap['mask_AP75']} vs AP50 gap {gap['mask_AP50']}"}
        elif report.axis == "maskloss":
            checks["sigmoid_beats_softmax"] = sign_check("sigmoid", "softmax", "mask_AP")
        elif report.axis == "branch":
            fcn, mlp = self._median(report, "fcn", "mask_AP"), self._median(report, "mlp", "mask_AP")
            checks["fcn_not_worse"] = {"passed": fcn is not None and mlp is not None and fcn >= mlp, "hard": True,
                                       "detail": f"median mask AP fcn {fcn} vs mlp {mlp}"}
            counts = mask_branch_parameter_counts(configs["fcn"])
            checks["fcn_fewer_parameters"] = {"passed": counts["fcn"] < counts["mlp"], "hard": True,
                                              "detail": f"fcn {counts['fcn']} vs mlp {counts['mlp']} parameters"}
        elif report.axis == "agnostic":
            a = self._median(report, "class-specific", "mask_AP")
            b = self._median(report, "class-agnostic", "mask_AP")
            near = a is not None and b is not None and abs(a - b) <= AGNOSTIC_TOLERANCE
            checks["agnostic_near_parity"] = {"passed": near, "hard": False,
                                              "detail": f"median mask AP {a} vs class-agnostic {b}"}
        elif report.axis == "keypoint_roiop":
            checks["align_beats_pool_keypoints"] = sign_check("align", "pool", "keypoint_PCK")
        return checks

    def save_report(self, report: AblationReport, out_dir: str, prefix: str) -> Dict[str, str]:
        """Write the JSON report, the console table and per-variant AP-vs-IoU series"""
        title = f"ablation {report.axis}"
        paths = {}
        json_path = os.path.join(out_dir, f"{prefix}_ablation_{report.axis}.json")
        with open(json_path, "w", encoding="utf-8") as f:
            f.write(self.json_renderer.render(report.to_dict(), title))
        paths["json"] = json_path

        table_path = os.path.join(out_dir, f"{prefix}_ablation_{report.axis}.txt")
        with open(table_path, "w", encoding="utf-8") as f:
            f.write(self.table_renderer.render(self.summary_table(report), title))
        paths["table"] = table_path

        series = self.ap_threshold_series(report)
        if series["rows"]:
            series_path = os.path.join(out_dir, f"{prefix}_ablation_{report.axis}_ap_vs_iou.csv")
            with open(series_path, "w", encoding="utf-8") as f:
                f.write(self.series_renderer.render(series, f"{title} AP vs IoU threshold"))
            paths["series"] = series_path
        self.logger.info(f"Wrote ablation report {json_path}")
        return paths

    def summary_table(self, report: AblationReport) -> Dict:
        """Median metric per variant plus the signed delta row against the first variant"""
        metrics = ["mask_AP", "mask_AP50", "mask_AP75", "box_AP"]
        if report.metric not in metrics:
            metrics.append(report.metric)
        rows = []
        for label in report.variants:
            row = [label]
            for metric in metrics:
                median = self._median(report, label, metric)
                row.append("n/a" if median is None else f"{100.0 * median:.1f}")
            delta = report.deltas.get(label, {}).get(report.metric)
            row.append("" if delta is None else f"{signed_delta(delta['median'])} "
                                                 f"({delta['positive']}+/{delta['negative']}-)")
            rows.append(row)
        return {"columns": ["variant"] + metrics + [f"delta {report.metric}"], "rows": rows}

    def ap_threshold_series(self, report: AblationReport) -> Dict:
        """Rows of (variant, threshold, median AP) from the per-cell AP@t entries"""
        rows = []
        for label in report.variants:
            keys = sorted({k for c in report.cells[label].values() if c for k in c if k.startswith("AP@")})
            for key in keys:
                rows.append([label, float(key[3:]), self._median(report, label, key)])
        return {"columns": ["variant", "iou_threshold", "median_AP"], "rows": rows}


def load_report(path: str) -> Dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)["report"]


def report_from_dict(data: Dict) -> AblationReport:
    return AblationReport(
        axis=data["axis"],
        metric=data["metric"],
        seeds=[int(s) for s in data["seeds"]],
        variants=list(data["variants"]),
        config_hashes=dict(data["config_hashes"]),
        cells={v: {int(s): m for s, m in cells.items()} for v, cells in data["cells"].items()},
        deltas=data.get("deltas", {}),
        checks=data.get("checks", {}),
    )


def create_production_orchestrator() -> AblationOrchestrator:
    """Factory function to create the ablation orchestrator used by the harness"""
    return AblationOrchestrator(
        cell_runner=TrainEvalCellRunner(),
        table_renderer=TableRenderer(),
        json_renderer=JsonReportRenderer(),
        series_renderer=SeriesRenderer(),
        max_workers=thread_count(),
    )


def create_orchestrator_with_runner(cell_runner: CellRunner) -> AblationOrchestrator:
    """Factory function for a sequential orchestrator around a custom cell runner"""
    return AblationOrchestrator(
        cell_runner=cell_runner,
        table_renderer=TableRenderer(),
        json_renderer=JsonReportRenderer(),
        series_renderer=SeriesRenderer(),
        max_workers=1,
    )
