#!/usr/bin/env python3
"""
Command-line front door for the region lab.

Subcommands: dataset, train, eval, ablate, gradcheck, plotdata.
Exit codes: 0 success, 1 usage, 2 runtime failure, 3 acceptance-check failure.
"""

import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

import pipeline
from boxgeom import Box
from experiment_config import ConfigError, ExperimentConfig, config_hash, load_config, save_config
from heads import (KeypointTarget, MaskTarget, box_loss, cls_loss, keypoint_loss, mask_loss_sigmoid,
                   mask_loss_softmax)
from orchestrator import (AXES, MIN_SEEDS, create_production_orchestrator, load_report, load_splits,
                          report_from_dict)
from postproc import DetectionResult, serialize_detections, write_detections
from report_renderer import JsonReportRenderer, SeriesRenderer, TableRenderer, table_from_dict
from roiops import RoiOpSpec, extract_rois
from synthgen import MANIFEST_NAME, DatasetFormatError, InstanceAnnotation, write_dataset
from tensorlab import (GradCheckReport, Tensor, check_gradients, conv2d, deconv2d, linear, log_softmax,
                       relu, sigmoid, smooth_l1, softmax, softplus, upsample_bilinear2x)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_ACCEPTANCE = 3
DEFAULT_OUT = "runs"

GRADCHECK_SCOPES = ("ops", "losses", "end2end")
GRADCHECK_TOLERANCE = 1e-6
# deep graphs accumulate more rounding than single ops
END2END_TOLERANCE = 1e-4
END2END_FRACTION = 0.01


class UsageError(Exception):
    """Bad invocation: maps to exit code 1"""


class HarnessArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class GradCheckCase:
    name: str
    report: GradCheckReport
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.report.passed(self.tolerance)


def _load(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _out_dir(args) -> str:
    out = args.out or DEFAULT_OUT
    os.makedirs(out, exist_ok=True)
    return out


def _seeds(args, config: ExperimentConfig) -> List[int]:
    return list(args.seed) if args.seed else list(config.seeds)


def cmd_dataset(args) -> int:
    """Write the train and eval splits; refuses to overwrite without --force"""
    config = _load(args)
    dataset = config.dataset
    root = args.out or dataset.path
    splits = (("train", dataset.train_count, 0), ("eval", dataset.eval_count, dataset.train_count))
    for split, _, _ in splits:
        if os.path.exists(os.path.join(root, split, MANIFEST_NAME)) and not args.force:
            raise UsageError(f"{os.path.join(root, split)} already holds a dataset, pass --force to overwrite")
    for split, count, start in splits:
        digest = write_dataset(os.path.join(root, split), dataset.scene, count, start)
        print(f"{split}: {count} scenes from index {start}, sha256 {digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load(args)
    seeds = list(args.seed) if args.seed else [config.seeds[0]]
    if args.resume and len(seeds) != 1:
        raise UsageError("--resume continues exactly one run, pass a single --seed")
    out = _out_dir(args)
    save_config(config, os.path.join(out, f"{config_hash(config)}_config.ini"))
    train_scenes, _ = load_splits(config)
    for seed in seeds:
        checkpoint = pipeline.train(config, train_scenes, seed, out, resume_from=args.resume)
        print(checkpoint)
    return EXIT_OK


def ground_truth_detections(annotations: Sequence[InstanceAnnotation]) -> List[DetectionResult]:
    """Annotations restated as perfect detections, the oracle detector"""
    return [DetectionResult(box=a.box, class_id=a.class_id, score=1.0, mask=a.mask,
                            keypoints=[(x, y, 1.0) for x, y, _ in a.keypoints] or None)
            for a in annotations]


def cmd_eval(args) -> int:
    """Evaluate a checkpoint on the eval split; writes detections and the metric report"""
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    model, iteration = pipeline.load_model(args.checkpoint)
    config = _load(args) if args.config else model.config
    _, eval_scenes = load_splits(config)
    out = _out_dir(args)
    prefix = f"{config_hash(model.config)}_seed{model.seed}"

    detections, records = [], []
    for scene in eval_scenes:
        if args.ground_truth:
            dets = ground_truth_detections(scene.annotations)
        else:
            dets = [det for det, _ in pipeline.infer(model, scene.image, scene.annotations)]
        detections.append(dets)
        records.extend(serialize_detections(scene.index, dets))
    write_detections(os.path.join(out, f"{prefix}_detections.json"), records)

    report = pipeline.evaluate_detections(detections, [s.annotations for s in eval_scenes], model.config)
    report["iteration"] = iteration
    title = f"eval {prefix}"
    with open(os.path.join(out, f"{prefix}_eval.json"), "w", encoding="utf-8") as f:
        f.write(JsonReportRenderer().render(report, title))
    print(TableRenderer().render(table_from_dict(report), title), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.axis not in AXES:
        raise UsageError(f"unknown axis {args.axis!r}, expected one of {sorted(AXES)}")
    config = _load(args)
    seeds = _seeds(args, config)
    if len(seeds) < MIN_SEEDS:
        raise UsageError(f"ablations need at least {MIN_SEEDS} seeds, got {len(seeds)}")
    out = _out_dir(args)
    orchestrator = create_production_orchestrator()
    report = orchestrator.run_ablation(args.axis, config, seeds, out)
    orchestrator.save_report(report, out, config_hash(config))
    print(orchestrator.table_renderer.render(orchestrator.summary_table(report), f"ablation {args.axis}"), end="")

    hard_failures = []
    for name, check in report.checks.items():
        status = "PASS" if check["passed"] else ("FAIL" if check["hard"] else "WARN")
        print(f"{status} {name}: {check['detail']}")
        if not check["passed"]:
            if check["hard"]:
                hard_failures.append(name)
            else:
                logger.warning(f"Check {name} outside tolerance: {check['detail']}")
    if hard_failures:
        logger.error(f"Acceptance checks failed: {', '.join(hard_failures)}")
        return EXIT_ACCEPTANCE
    return EXIT_OK


def _weighted_sum(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    weights = rng.uniform(-0.1, 0.1, size=shape)
    return lambda out: (out * weights).sum()


def _away_from(values: np.ndarray, points: Sequence[float], margin: float = 0.05) -> np.ndarray:
    """Push values off the switching points of relu / smooth-L1"""
    for p in points:
        close = np.abs(values - p) < margin
        values = np.where(close, p + margin * np.where(values >= p, 1.0, -1.0), values)
    return values


def _cases(name: str, graph: Callable[[], Tensor], tensors: Dict[str, Tensor],
           tolerance: float = GRADCHECK_TOLERANCE) -> List[GradCheckCase]:
    return [GradCheckCase(f"{name}[{label}]", check_gradients(graph, tensor), tolerance)
            for label, tensor in tensors.items()]


def op_gradchecks(rng: np.random.Generator) -> List[GradCheckCase]:
    """Every differentiable op, including the three RoI operators"""
    def leaf(*shape, values=None):
        data = rng.normal(size=shape) if values is None else values
        return Tensor(data, requires_grad=True)

    cases = []
    x, w, b = leaf(2, 5, 5), leaf(3, 2, 3, 3), leaf(3)
    head = _weighted_sum(rng, (3, 5, 5))
    cases += _cases("conv2d", lambda: head(conv2d(x, w, b, stride=1, pad=1)), {"x": x, "weight": w, "bias": b})
    x2, w2 = leaf(2, 5, 5), leaf(2, 2, 3, 3)
    head2 = _weighted_sum(rng, (2, 2, 2))
    cases += _cases("conv2d_stride2", lambda: head2(conv2d(x2, w2, stride=2)), {"x": x2, "weight": w2})
    xd, wd, bd = leaf(2, 3, 3), leaf(2, 3, 2, 2), leaf(3)
    head3 = _weighted_sum(rng, (3, 6, 6))
    cases += _cases("deconv2d", lambda: head3(deconv2d(xd, wd, bd)), {"x": xd, "weight": wd, "bias": bd})
    xl, wl, bl = leaf(4, 5), leaf(5, 3), leaf(3)
    head4 = _weighted_sum(rng, (4, 3))
    cases += _cases("linear", lambda: head4(linear(xl, wl, bl)), {"x": xl, "weight": wl, "bias": bl})

    vec = _weighted_sum(rng, (3, 4))
    xr = leaf(values=_away_from(rng.normal(size=(3, 4)), (0.0,)))
    cases += _cases("relu", lambda: vec(relu(xr)), {"x": xr})
    xs = leaf(3, 4)
    cases += _cases("sigmoid", lambda: vec(sigmoid(xs)), {"x": xs})
    cases += _cases("softplus", lambda: vec(softplus(xs)), {"x": xs})
    cases += _cases("softmax", lambda: vec(softmax(xs, axis=0)), {"x": xs})
    cases += _cases("log_softmax", lambda: vec(log_softmax(xs, axis=1)), {"x": xs})
    xh = leaf(values=_away_from(rng.normal(scale=1.5, size=(3, 4)), (-1.0, 1.0)))
    cases += _cases("smooth_l1", lambda: vec(smooth_l1(xh)), {"x": xh})
    xu = leaf(2, 3, 4)
    head5 = _weighted_sum(rng, (2, 6, 8))
    cases += _cases("upsample_bilinear2x", lambda: head5(upsample_bilinear2x(xu)), {"x": xu})

    feature = leaf(2, 8, 8)
    rois = [Box(3.3, 5.1, 40.7, 52.9), Box(10.2, 12.5, 60.0, 44.3)]
    head6 = _weighted_sum(rng, (2, 2, 3, 3))
    for kind, aggregation in (("align", "average"), ("align", "max"), ("pool", "max"), ("warp", "average"),
                              ("warp", "max")):
        spec = RoiOpSpec(kind=kind, output_h=3, output_w=3, sampling_points=2, aggregation=aggregation,
                         feature_stride=8.0)
        cases += _cases(f"roi_{kind}_{aggregation}",
                        lambda spec=spec: head6(extract_rois(feature, rois, spec)), {"feature": feature})
    return cases


def loss_gradchecks(rng: np.random.Generator) -> List[GradCheckCase]:
    """The five losses, each with respect to its logits"""
    m, k = 6, 3
    grid = (rng.uniform(size=(m, m)) > 0.5).astype(np.float64)
    cases = []
    sig = Tensor(rng.normal(size=(k, m, m)), requires_grad=True)
    cases += _cases("mask_loss_sigmoid", lambda: mask_loss_sigmoid(sig, MaskTarget(grid, 1)), {"logits": sig})
    soft = Tensor(rng.normal(size=(k + 1, m, m)), requires_grad=True)
    cases += _cases("mask_loss_softmax", lambda: mask_loss_softmax(soft, MaskTarget(grid, 1)), {"logits": soft})
    cls = Tensor(rng.normal(size=(4, k + 1)), requires_grad=True)
    labels = np.array([0, 1, 3, 2])
    cases += _cases("cls_loss", lambda: cls_loss(cls, labels), {"logits": cls})
    deltas = Tensor(_away_from(rng.normal(scale=1.5, size=(k, 4)), (-1.0, 1.0)), requires_grad=True)
    cases += _cases("box_loss", lambda: box_loss(deltas, np.zeros(4), 2), {"deltas": deltas})
    heat = Tensor(rng.normal(size=(3, 8, 8)), requires_grad=True)
    target = KeypointTarget(np.array([5, 17, 63]), np.array([True, False, True]))
    cases += _cases("keypoint_loss", lambda: keypoint_loss(heat, target), {"logits": heat})
    return cases


def end2end_gradchecks(config: ExperimentConfig, seed: int, rng: np.random.Generator,
                       fraction: float = END2END_FRACTION) -> List[GradCheckCase]:
    """Total training loss of one scene against a sampled fraction of every parameter's coordinates"""
    scenes, _ = load_splits(config)
    scene = scenes[0]
    model = pipeline.RegionModel(config, seed)

    def graph():
        return pipeline.image_losses(model, scene.image, scene.annotations, np.random.default_rng([seed, 0])).total

    cases = []
    for param in model.parameters():
        count = max(1, int(math.ceil(fraction * param.size)))
        flat = rng.choice(param.size, size=count, replace=False)
        indices = [tuple(int(i) for i in np.unravel_index(f, param.shape)) for f in sorted(flat)]
        cases.append(GradCheckCase(f"end2end[{param.name}]",
                                   check_gradients(graph, param, indices=indices), END2END_TOLERANCE))
    return cases


def run_gradchecks(scope: str, config: ExperimentConfig, seed: int = 0) -> List[GradCheckCase]:
    if scope not in GRADCHECK_SCOPES:
        raise UsageError(f"unknown gradcheck scope {scope!r}, expected one of {GRADCHECK_SCOPES}")
    rng = np.random.default_rng([seed, 31])
    if scope == "ops":
        return op_gradchecks(rng)
    if scope == "losses":
        return loss_gradchecks(rng)
    return end2end_gradchecks(config, seed, rng)


def gradcheck_table(cases: Sequence[GradCheckCase]) -> Dict:
    rows = []
    for case in cases:
        report = case.report
        rows.append([case.name, "pass" if case.passed else "FAIL", f"{report.max_rel_error:.3e}",
                     str(report.worst_index) if report.worst_index is not None else "-",
                     report.checked, len(report.excluded)])
    return {"columns": ["check", "status", "max_rel_error", "worst_coordinate", "checked", "kinks"], "rows": rows}


def cmd_gradcheck(args) -> int:
    config = _load(args)
    seed = args.seed[0] if args.seed else 0
    cases = run_gradchecks(args.scope, config, seed)
    print(TableRenderer().render(gradcheck_table(cases), f"gradcheck {args.scope}"), end="")
    failed = [c for c in cases if not c.passed]
    for case in failed:
        logger.error(f"{case.name}: rel. error {case.report.max_rel_error:.3e} at {case.report.worst_index}")
    return EXIT_ACCEPTANCE if failed else EXIT_OK


def loss_curve_series(metrics_file: str) -> Dict:
    with open(metrics_file, "r", newline="", encoding="utf-8") as f:
        rows = [[int(r["iteration"]), float(r["loss"]), float(r["lr"])] for r in csv.DictReader(f)]
    return {"columns": ["iteration", "loss", "lr"], "rows": rows}


def cmd_plotdata(args) -> int:
    """Loss curves from metrics CSVs and AP-vs-IoU series from ablation reports"""
    out = _out_dir(args)
    renderer = SeriesRenderer()
    metrics_files = list(args.metrics or [])
    if not metrics_files and not args.report:
        config = _load(args)
        metrics_files = [pipeline.metrics_path(out, config, seed) for seed in _seeds(args, config)]
    written = []
    for metrics_file in metrics_files:
        stem = os.path.basename(metrics_file)
        stem = stem[:-len("_metrics.csv")] if stem.endswith("_metrics.csv") else os.path.splitext(stem)[0]
        path = os.path.join(out, f"{stem}_loss.csv")
        with open(path, "w", encoding="utf-8") as f:
            f.write(renderer.render(loss_curve_series(metrics_file), f"loss {stem}"))
        written.append(path)
    if args.report:
        report = report_from_dict(load_report(args.report))
        orchestrator = create_production_orchestrator()
        series = orchestrator.ap_threshold_series(report)
        for variant in report.variants:
            rows = [row[1:] for row in series["rows"] if row[0] == variant]
            path = os.path.join(out, f"{report.config_hashes[variant]}_{report.axis}_ap_vs_iou.csv")
            with open(path, "w", encoding="utf-8") as f:
                f.write(renderer.render({"columns": ["iou_threshold", "median_AP"], "rows": rows},
                                        f"{report.axis} {variant} AP vs IoU threshold"))
            written.append(path)
    for path in written:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = HarnessArgumentParser(prog="harness", description="Mask-head region lab")
    common = HarnessArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config (defaults when omitted)")
    common.add_argument("--seed", type=int, action="append", help="seed; repeat for several")
    common.add_argument("--out", help=f"output directory (default {DEFAULT_OUT})")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    dataset = sub.add_parser("dataset", parents=[common], help="generate the synthetic dataset")
    dataset.set_defaults(handler=cmd_dataset)

    train = sub.add_parser("train", parents=[common], help="train one run per seed")
    train.add_argument("--resume", help="checkpoint to continue from")
    train.set_defaults(handler=cmd_train)

    evaluate = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", help="checkpoint file")
    evaluate.add_argument("--ground-truth", action="store_true", help="score the annotations themselves")
    evaluate.set_defaults(handler=cmd_eval)

    ablate = sub.add_parser("ablate", parents=[common], help="run one ablation axis")
    ablate.add_argument("--axis", required=True, help=f"one of {', '.join(sorted(AXES))}")
    ablate.set_defaults(handler=cmd_ablate)

    gradcheck = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    gradcheck.add_argument("--scope", default="ops", help=f"one of {', '.join(GRADCHECK_SCOPES)}")
    gradcheck.set_defaults(handler=cmd_gradcheck)

    plotdata = sub.add_parser("plotdata", parents=[common], help="emit plot-ready series files")
    plotdata.add_argument("--metrics", action="append", help="training metrics CSV; repeat for several")
    plotdata.add_argument("--report", help="ablation report JSON")
    plotdata.set_defaults(handler=cmd_plotdata)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one subcommand and map its outcome to an exit code"""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"harness: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s - %(levelname)s - %(message)s')
    try:
        return args.handler(args)
    except (UsageError, ConfigError) as e:
        logger.error(f"Usage error: {str(e)}")
        return EXIT_USAGE
    except pipeline.DivergenceError as e:
        logger.error(f"Training diverged: {str(e)}; state dumped to {e.dump_path}")
        return EXIT_RUNTIME
    except (DatasetFormatError, pipeline.CheckpointMismatchError, OSError, ValueError, RuntimeError) as e:
        logger.error(f"Run failed: {str(e)}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
