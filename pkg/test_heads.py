import math

import numpy as np
import pytest

from boxgeom import Box
from heads import (BoxHead, FcnMaskBranch, HeadConfig, KeypointHead, KeypointTarget, MaskTarget, MlpMaskBranch,
                   box_loss, cls_loss, create_mask_branch, keypoint_loss, make_keypoint_target, make_mask_target,
                   mask_loss, mask_loss_sigmoid, mask_loss_softmax, total_loss)
from tensorlab import ShapeError, Tensor, backward


def small_config(**overrides) -> HeadConfig:
    values = dict(num_classes=3, mask_resolution=14, conv_width=4, mask_convs=2, keypoint_convs=2,
                  mlp_hidden=16, box_hidden=16)
    values.update(overrides)
    return HeadConfig(**values)


def test_head_config_validation():
    with pytest.raises(ValueError):
        HeadConfig(mask_resolution=13)
    with pytest.raises(ValueError):
        HeadConfig(mask_variant="softmax")
    with pytest.raises(ValueError):
        HeadConfig(tasks="mask")
    with pytest.raises(ValueError):
        HeadConfig(tasks="box_keypoint", keypoint_resolution=6)
    assert HeadConfig(tasks="box").mask_enabled is False
    assert HeadConfig(mask_variant="softmax_multinomial", num_classes=3).mask_channels == 4
    assert HeadConfig(mask_variant="class_agnostic").mask_channels == 1


def test_sigmoid_mask_loss_at_zero_logits_is_ln2():
    grid = np.zeros((4, 4))
    grid[:2] = 1.0
    loss = mask_loss_sigmoid(Tensor(np.zeros((3, 4, 4))), MaskTarget(grid, 1))
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_softmax_mask_loss_at_zero_logits_is_log_of_channel_count():
    grid = np.eye(4)
    loss = mask_loss_softmax(Tensor(np.zeros((4, 4, 4))), MaskTarget(grid, 2))
    assert loss.item() == pytest.approx(math.log(4.0), abs=1e-12)


def test_sigmoid_mask_loss_only_touches_the_target_channel():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(3, 5, 5)), requires_grad=True)
    target = MaskTarget((rng.uniform(size=(5, 5)) > 0.5).astype(float), 1)
    backward(mask_loss_sigmoid(logits, target))
    assert np.all(logits.grad[0] == 0.0) and np.all(logits.grad[2] == 0.0)
    assert np.any(logits.grad[1] != 0.0)


def test_softmax_mask_loss_couples_every_channel():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=(4, 5, 5)), requires_grad=True)
    target = MaskTarget((rng.uniform(size=(5, 5)) > 0.5).astype(float), 1)
    backward(mask_loss_softmax(logits, target))
    for channel in range(4):
        assert np.any(logits.grad[channel] != 0.0)


def test_gradient_coupling_over_random_instances():
    rng = np.random.default_rng(5)
    coupled = 0
    for _ in range(1000):
        target = MaskTarget((rng.uniform(size=(4, 4)) > 0.5).astype(float), int(rng.integers(0, 2)))
        logits = Tensor(rng.normal(scale=2.0, size=(2, 4, 4)), requires_grad=True)
        backward(mask_loss_sigmoid(logits, target))
        assert np.all(logits.grad[1 - target.class_index] == 0.0)
        logits = Tensor(rng.normal(scale=2.0, size=(3, 4, 4)), requires_grad=True)
        backward(mask_loss_softmax(logits, target))
        coupled += all(np.any(logits.grad[c] != 0.0) for c in range(3))
    assert coupled >= 990


def test_sigmoid_mask_loss_ignores_extra_class_channels():
    rng = np.random.default_rng(6)
    base = rng.normal(size=(2, 5, 5))
    target = MaskTarget((rng.uniform(size=(5, 5)) > 0.5).astype(float), 1)
    small = Tensor(base.copy(), requires_grad=True)
    small_loss = mask_loss_sigmoid(small, target)
    backward(small_loss)
    wide = Tensor(np.concatenate([base, rng.normal(size=(4, 5, 5))]), requires_grad=True)
    wide_loss = mask_loss_sigmoid(wide, target)
    backward(wide_loss)
    assert wide_loss.item() == small_loss.item()
    assert np.array_equal(wide.grad[:2], small.grad)
    assert not wide.grad[2:].any()


@pytest.mark.parametrize("axis,cut,keep_low", [(1, 7, True), (1, 3, False), (0, 5, True), (0, 9, False)])
def test_mask_target_reapplication_is_stable_on_half_planes(axis, cut, keep_low):
    gt = np.zeros((12, 12))
    index = [slice(None), slice(None)]
    index[axis] = slice(0, cut) if keep_low else slice(cut, None)
    gt[tuple(index)] = 1.0
    rng = np.random.default_rng(cut)
    for _ in range(10):
        x1, y1 = rng.uniform(0.0, 5.0, size=2)
        w, h = rng.uniform(2.0, 7.0, size=2)
        first = make_mask_target(Box(x1, y1, x1 + w, y1 + h), gt, 6)
        again = make_mask_target(Box(0, 0, 6, 6), first.grid, 6)
        assert np.array_equal(again.grid, first.grid)


def test_mask_loss_dispatch_and_range_checks():
    grid = np.ones((2, 2))
    agnostic = mask_loss(Tensor(np.zeros((1, 2, 2))), MaskTarget(grid, 2), "class_agnostic")
    assert agnostic.item() == pytest.approx(math.log(2.0))
    with pytest.raises(ValueError):
        mask_loss_sigmoid(Tensor(np.zeros((3, 2, 2))), MaskTarget(grid, 3))
    with pytest.raises(ShapeError):
        mask_loss_sigmoid(Tensor(np.zeros((3, 4, 4))), MaskTarget(grid, 0))


def test_cls_and_box_loss_examples():
    assert cls_loss(Tensor(np.zeros(4)), 2).item() == pytest.approx(math.log(4.0), abs=1e-12)
    rows = cls_loss(Tensor(np.zeros((3, 4))), [0, 1, 3])
    assert rows.item() == pytest.approx(math.log(4.0), abs=1e-12)
    deltas = Tensor(np.zeros((3, 4)))
    assert box_loss(deltas, [1.0, 0.0, 0.0, 0.0], 2).item() == 0.5
    assert box_loss(deltas, [0.5, 0.0, 0.0, -2.0], 1).item() == pytest.approx(0.125 + 1.5)
    with pytest.raises(ValueError):
        box_loss(deltas, [0.0] * 4, 0)
    with pytest.raises(ValueError):
        cls_loss(Tensor(np.zeros(4)), 4)


def test_total_loss_is_an_unweighted_sum():
    assert total_loss(Tensor(1.0), Tensor(2.0), None, Tensor(0.5)).item() == 3.5
    assert total_loss(Tensor(1.25)).item() == 1.25


def test_mask_target_crops_and_thresholds():
    gt = np.zeros((4, 4))
    gt[:2, :2] = 1.0
    target = make_mask_target(Box(0, 0, 4, 4), gt, 2, class_index=1)
    assert target.grid.tolist() == [[1.0, 0.0], [0.0, 0.0]]
    assert not target.degenerate and target.class_index == 1
    degenerate = make_mask_target(Box(1, 1, 1, 3), gt, 2)
    assert degenerate.degenerate and not degenerate.grid.any()


def test_keypoint_target_cell_index():
    roi = Box(0, 0, 56, 56)
    target = make_keypoint_target(roi, [(28.0, 28.0, True), (70.0, 10.0, True), (5.0, 5.0, False)], 56)
    assert target.indices[0] == 28 * 56 + 28
    assert target.visible.tolist() == [True, False, False]
    edge = make_keypoint_target(roi, [(56.0, 56.0, True)], 56)
    assert edge.indices[0] == 55 * 56 + 55


def test_keypoint_loss_uniform_logits_and_invisible_types():
    target = KeypointTarget(np.array([5, 0]), np.array([True, False]))
    loss = keypoint_loss(Tensor(np.zeros((2, 4, 4))), target)
    assert loss.item() == pytest.approx(math.log(16.0), abs=1e-12)
    hidden = KeypointTarget(np.array([0, 0]), np.array([False, False]))
    assert keypoint_loss(Tensor(np.ones((2, 4, 4))), hidden).item() == 0.0
    with pytest.raises(ShapeError):
        keypoint_loss(Tensor(np.zeros((3, 4, 4))), target)


def test_mask_branch_shapes():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(5, 7, 7)))
    for kind, cls in (("fcn", FcnMaskBranch), ("mlp", MlpMaskBranch)):
        branch = create_mask_branch(small_config(branch_kind=kind), 5, rng)
        assert isinstance(branch, cls)
        assert branch(x).shape == (3, 14, 14)
    with pytest.raises(ShapeError):
        create_mask_branch(small_config(), 5, rng)(Tensor(np.zeros((5, 6, 6))))


def test_fcn_branch_has_fewer_parameters_than_mlp():
    rng = np.random.default_rng(3)
    fcn = create_mask_branch(HeadConfig(branch_kind="fcn"), 8, rng)
    mlp = create_mask_branch(HeadConfig(branch_kind="mlp"), 8, rng)
    assert fcn.parameter_count() < mlp.parameter_count()


def test_box_and_keypoint_head_shapes():
    rng = np.random.default_rng(4)
    config = small_config(tasks="box_mask_keypoint", keypoint_count=2, keypoint_resolution=28)
    cls_logits, deltas = BoxHead(config, 5, rng)(Tensor(rng.normal(size=(2, 5, 7, 7))))
    assert cls_logits.shape == (2, 4) and deltas.shape == (2, 3, 4)
    heatmaps = KeypointHead(config, 5, rng)(Tensor(rng.normal(size=(5, 7, 7))))
    assert heatmaps.shape == (2, 28, 28)
