import json
import os

import pytest

from experiment_config import ExperimentConfig
from interfaces import CellRunner
from orchestrator import (AXES, TrainEvalCellRunner, create_orchestrator_with_runner, load_report,
                          load_splits, mask_branch_parameter_counts, report_from_dict)
from synthgen import DatasetFormatError, SceneSpec, write_dataset


class ScriptedCellRunner(CellRunner):
    """Returns metrics from a table keyed by (axis value, seed); raises for the listed failures"""

    def __init__(self, key, values, failures=()):
        self.key = key
        self.values = values
        self.failures = set(failures)
        self.calls = []

    def run_cell(self, config, seed, out_dir):
        section, name = self.key.split(".")
        value = getattr(getattr(config, section), name)
        self.calls.append((value, seed))
        if (value, seed) in self.failures:
            raise RuntimeError(f"cell {value}/{seed} blew up")
        ap = self.values[value] + 0.01 * seed
        return {"mask_AP": ap, "mask_AP50": ap + 0.1, "mask_AP75": ap - 0.1, "box_AP": 0.5,
                "AP@0.50": ap + 0.1, "AP@0.75": ap - 0.1}


def test_axes_cover_the_ablation_table():
    assert set(AXES) == {"roiop", "maskloss", "branch", "agnostic", "keypoint_roiop", "multitask", "sampling",
                         "stride"}
    assert [label for label, _ in AXES["roiop"].variants][:3] == ["align-avg", "align-max", "pool-max"]


def test_variant_configs_differ_only_in_the_axis_field():
    orchestrator = create_orchestrator_with_runner(ScriptedCellRunner("roi.operator", {}))
    configs = orchestrator.variant_configs(AXES["roiop"], ExperimentConfig())
    assert list(configs) == ["align-avg", "align-max", "pool-max", "warp-max", "warp-avg"]
    assert all(cfg.backbone.stride == 16 and cfg.proposals.kind == "oracle" for cfg in configs.values())
    assert [cfg.roi.operator for cfg in configs.values()] == list(configs)
    keypoints = orchestrator.variant_configs(AXES["keypoint_roiop"], ExperimentConfig())
    assert all(cfg.heads.tasks == "box_mask_keypoint" for cfg in keypoints.values())


def test_maskloss_ablation_report(tmp_path):
    runner = ScriptedCellRunner("heads.mask_variant", {"sigmoid_per_class": 0.5, "softmax_multinomial": 0.3})
    orchestrator = create_orchestrator_with_runner(runner)
    report = orchestrator.run_ablation("maskloss", ExperimentConfig(), [0, 1, 2], str(tmp_path))
    assert report.variants == ["sigmoid", "softmax"]
    assert len(runner.calls) == 6
    delta = report.deltas["softmax"]["mask_AP"]
    assert delta["median"] == pytest.approx(-0.2)
    assert (delta["positive"], delta["negative"], delta["zero"]) == (0, 3, 0)
    assert report.deltas["softmax"]["box_AP"]["zero"] == 3
    assert report.checks["sigmoid_beats_softmax"]["passed"] is True
    assert report.failed_cells == []


def test_failed_cells_are_excluded_from_deltas(tmp_path):
    runner = ScriptedCellRunner("heads.mask_variant", {"sigmoid_per_class": 0.3, "softmax_multinomial": 0.5},
                                failures=[("softmax_multinomial", 1)])
    orchestrator = create_orchestrator_with_runner(runner)
    report = orchestrator.run_ablation("maskloss", ExperimentConfig(), [0, 1, 2, 3], str(tmp_path))
    assert report.failed_cells == [("softmax", 1)]
    assert report.cells["softmax"][1] is None
    assert len(report.deltas["softmax"]["mask_AP"]["per_seed"]) == 3
    assert report.checks["sigmoid_beats_softmax"]["passed"] is False


def test_branch_and_agnostic_checks(tmp_path):
    branch_runner = ScriptedCellRunner("heads.branch_kind", {"fcn": 0.4, "mlp": 0.35})
    report = create_orchestrator_with_runner(branch_runner).run_ablation(
        "branch", ExperimentConfig(), [0, 1, 2], str(tmp_path))
    assert report.checks["fcn_not_worse"]["passed"]
    assert report.checks["fcn_fewer_parameters"]["passed"]

    agnostic_runner = ScriptedCellRunner("heads.mask_variant", {"sigmoid_per_class": 0.4, "class_agnostic": 0.3})
    report = create_orchestrator_with_runner(agnostic_runner).run_ablation(
        "agnostic", ExperimentConfig(), [0, 1, 2], str(tmp_path))
    check = report.checks["agnostic_near_parity"]
    assert check["passed"] is False and check["hard"] is False


def test_mask_branch_parameter_counts():
    counts = mask_branch_parameter_counts(ExperimentConfig())
    assert 0 < counts["fcn"] < counts["mlp"]


def test_run_ablation_argument_checks(tmp_path):
    orchestrator = create_orchestrator_with_runner(ScriptedCellRunner("roi.operator", {}))
    with pytest.raises(ValueError):
        orchestrator.run_ablation("maskloss", ExperimentConfig(), [0, 1], str(tmp_path))
    with pytest.raises(ValueError):
        orchestrator.run_ablation("colour", ExperimentConfig(), [0, 1, 2], str(tmp_path))


def test_save_and_reload_report(tmp_path):
    runner = ScriptedCellRunner("heads.mask_variant", {"sigmoid_per_class": 0.5, "softmax_multinomial": 0.3})
    orchestrator = create_orchestrator_with_runner(runner)
    report = orchestrator.run_ablation("maskloss", ExperimentConfig(), [0, 1, 2], str(tmp_path))
    paths = orchestrator.save_report(report, str(tmp_path), "abc123")
    assert os.path.basename(paths["json"]) == "abc123_ablation_maskloss.json"
    with open(paths["table"], encoding="utf-8") as f:
        table = f.read()
    assert "sigmoid" in table and "-20.0 (0+/3-)" in table
    with open(paths["series"], encoding="utf-8") as f:
        assert f.readline().startswith("# ablation maskloss")
    with open(paths["json"], encoding="utf-8") as f:
        assert json.load(f)["title"] == "ablation maskloss"
    restored = report_from_dict(load_report(paths["json"]))
    assert restored.cells == report.cells
    assert restored.config_hashes == report.config_hashes
    series = orchestrator.ap_threshold_series(restored)
    assert [row[:2] for row in series["rows"]] == [["sigmoid", 0.5], ["sigmoid", 0.75], ["softmax", 0.5],
                                                    ["softmax", 0.75]]


def test_load_splits_reads_or_generates(tiny_config):
    train, held_out = load_splits(tiny_config)
    assert [s.index for s in train] == [0, 1] and [s.index for s in held_out] == [2, 3]
    scene = tiny_config.dataset.scene
    write_dataset(os.path.join(tiny_config.dataset.path, "train"), scene, 2)
    write_dataset(os.path.join(tiny_config.dataset.path, "eval"), scene, 2, start=2)
    train_disk, eval_disk = load_splits(tiny_config)
    assert [s.index for s in eval_disk] == [2, 3]
    other = SceneSpec(image_h=32, image_w=32, min_size=8.0, max_size=16.0, seed=9)
    write_dataset(os.path.join(tiny_config.dataset.path, "eval"), other, 2, start=2)
    with pytest.raises(DatasetFormatError):
        load_splits(tiny_config)


def test_train_eval_cell_runner(tiny_config, tmp_path):
    metrics = TrainEvalCellRunner().run_cell(tiny_config, 0, str(tmp_path))
    assert 0.0 <= metrics["mask_AP"] <= 1.0
    assert "AP@0.50" in metrics and "AP@0.95" in metrics
