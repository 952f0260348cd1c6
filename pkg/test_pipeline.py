import csv
import os

import numpy as np
import pytest

from boxgeom import Box
from experiment_config import BackboneConfig, with_overrides
from pipeline import (Backbone, CheckpointMismatchError, DivergenceError, OracleProposalSource, RegionModel,
                      checkpoint_path, evaluate_model, image_losses, infer, load_model, metrics_path, scale_scene,
                      train)
from synthgen import generate_scenes
from tensorlab import Tensor, backward, load_snapshot


@pytest.fixture
def scenes(tiny_config):
    return generate_scenes(tiny_config.dataset.scene, 2)


def test_backbone_output_stride(tiny_config):
    backbone = Backbone(tiny_config.backbone, np.random.default_rng(0))
    features = backbone(Tensor(np.zeros((3, 32, 32))))
    assert features.shape == (4, 4, 4)
    with pytest.raises(ValueError):
        backbone(Tensor(np.zeros((3, 30, 32))))


def test_backbone_stage_is_a_stride_two_conv():
    config = BackboneConfig(stride=4, widths=(2, 3), activation="identity")
    backbone = Backbone(config, np.random.default_rng(3))
    image = np.random.default_rng(4).normal(size=(3, 8, 8))
    expected = image
    for weight, bias in backbone.stages:
        w, b = weight.value.data, bias.value.data
        xp = np.pad(expected, ((0, 0), (1, 1), (1, 1)))
        size = expected.shape[1] // 2
        out = np.zeros((w.shape[0], size, size))
        for r in range(size):
            for q in range(size):
                window = xp[:, 2 * r:2 * r + 3, 2 * q:2 * q + 3]
                out[:, r, q] = np.einsum("ocij,cij->o", w, window) + b
        expected = out
    np.testing.assert_allclose(backbone(Tensor(image)).data, expected, atol=1e-12)


def test_oracle_proposals_include_ground_truth_only_for_training(tiny_config, scenes):
    annotations = scenes[0].annotations
    training = OracleProposalSource(tiny_config.proposals).propose((32, 32), annotations, np.random.default_rng(1))
    assert training[0] == annotations[0].box
    assert all(p.x2 <= 32 and p.y2 <= 32 for p in training)
    inference = OracleProposalSource(tiny_config.proposals, include_ground_truth=False)
    boxes = inference.propose((32, 32), annotations, np.random.default_rng(1))
    assert len(boxes) <= len(training) - len(annotations)


def test_image_losses_are_finite_and_reach_every_head(tiny_config, scenes):
    model = RegionModel(tiny_config, seed=0)
    scene = scenes[0]
    step = image_losses(model, scene.image, scene.annotations, np.random.default_rng([0, 0]))
    assert np.isfinite(step.total.item())
    assert step.num_pos >= 1
    assert step.components["cls"] > 0.0 and step.components["mask"] > 0.0
    params = model.parameters()
    backward(step.total, params)
    assert any(np.any(p.grad != 0.0) for p in model.mask_branch.parameters())
    assert any(np.any(p.grad != 0.0) for p in model.backbone.parameters())


def test_rpn_variant_produces_rpn_losses(tiny_config, scenes):
    config = with_overrides(tiny_config, {"proposals.kind": "rpn", "proposals.anchor_scales": (8.0, 16.0)})
    model = RegionModel(config, seed=0)
    assert model.rpn is not None
    scene = scenes[0]
    step = image_losses(model, scene.image, scene.annotations, np.random.default_rng([0, 0]))
    assert np.isfinite(step.total.item())
    assert step.components["rpn_objectness"] > 0.0


def test_keypoint_head_variant(tiny_config, scenes):
    config = with_overrides(tiny_config, {"heads.tasks": "box_mask_keypoint"})
    model = RegionModel(config, seed=0)
    scene = scenes[0]
    step = image_losses(model, scene.image, scene.annotations, np.random.default_rng([0, 0]))
    assert np.isfinite(step.components["keypoint"])
    for det, _ in infer(model, scene.image, scene.annotations):
        assert len(det.keypoints) == 3


def test_training_is_deterministic_and_resumable(tiny_config, scenes, tmp_path):
    first = train(tiny_config, scenes, 0, str(tmp_path / "a"))
    second = train(tiny_config, scenes, 0, str(tmp_path / "b"))
    midway = checkpoint_path(str(tmp_path / "a"), tiny_config, 0, 2)
    assert os.path.exists(midway)
    resumed = train(tiny_config, scenes, 0, str(tmp_path / "c"), resume_from=midway)
    reference, meta = load_snapshot(first)
    assert meta["iteration"] == 3
    for other in (second, resumed):
        tensors, _ = load_snapshot(other)
        assert set(tensors) == set(reference)
        for name, array in reference.items():
            assert np.array_equal(tensors[name], array), name
    with open(metrics_path(str(tmp_path / "a"), tiny_config, 0), newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["iteration"]) for r in rows] == [0, 1, 2]
    assert all(np.isfinite(float(r["loss"])) for r in rows)


def test_resume_rejects_a_different_config(tiny_config, scenes, tmp_path):
    checkpoint = train(tiny_config, scenes, 0, str(tmp_path))
    other = with_overrides(tiny_config, {"roi.operator": "pool-max"})
    with pytest.raises(CheckpointMismatchError):
        train(other, scenes, 0, str(tmp_path / "other"), resume_from=checkpoint)
    wider = with_overrides(tiny_config, {"heads.conv_width": 6})
    with pytest.raises(CheckpointMismatchError):
        load_model(checkpoint, wider)


def test_divergence_dumps_state(tiny_config, scenes, tmp_path):
    config = with_overrides(tiny_config, {"schedule.divergence_threshold": 1e-9})
    with pytest.raises(DivergenceError) as info:
        train(config, scenes, 0, str(tmp_path))
    assert info.value.dump_path is not None
    assert os.path.exists(info.value.dump_path)


def test_inference_and_evaluation_after_training(tiny_config, scenes, tmp_path):
    model, iteration = load_model(train(tiny_config, scenes, 1, str(tmp_path)))
    assert iteration == 3 and model.seed == 1
    for det, pasted in infer(model, scenes[0].image, scenes[0].annotations):
        assert pasted.grid.shape == (32, 32)
        assert det.mask is pasted.grid
        assert 1 <= det.class_id <= 3
    report = evaluate_model(model, scenes)
    for key in ("mask_AP", "mask_AP50", "mask_AP75", "box_AP"):
        assert 0.0 <= report[key] <= 1.0


def test_scale_scene_keeps_annotations_consistent(scenes):
    scene = scenes[0]
    image, annotations = scale_scene(scene.image, scene.annotations, 64)
    assert image.shape == (3, 64, 64)
    for ann in annotations:
        assert ann.mask.shape == (64, 64)
        rows = np.flatnonzero(ann.mask.any(axis=1))
        cols = np.flatnonzero(ann.mask.any(axis=0))
        assert ann.box == Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
