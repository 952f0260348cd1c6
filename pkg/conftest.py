import pytest

from experiment_config import ExperimentConfig, with_overrides

TINY_OVERRIDES = {
    "dataset.image_h": 32,
    "dataset.image_w": 32,
    "dataset.min_size": 8.0,
    "dataset.max_size": 16.0,
    "dataset.max_instances": 2,
    "dataset.train_count": 2,
    "dataset.eval_count": 2,
    "backbone.stride": 8,
    "backbone.widths": (4, 4, 4),
    "heads.conv_width": 4,
    "heads.mask_convs": 1,
    "heads.keypoint_convs": 1,
    "heads.mlp_hidden": 8,
    "heads.box_hidden": 8,
    "heads.box_pool_size": 3,
    "heads.mask_resolution": 4,
    "heads.keypoint_resolution": 8,
    "schedule.iterations": 3,
    "schedule.drop_points": (),
    "schedule.checkpoint_interval": 2,
    "schedule.log_interval": 1,
    "schedule.rois_per_image": 8,
    "proposals.oracle_copies": 2,
    "proposals.oracle_random_boxes": 4,
}


@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    """A config small enough to train for a few iterations inside a unit test"""
    overrides = dict(TINY_OVERRIDES)
    overrides["dataset.path"] = str(tmp_path / "data")
    return with_overrides(ExperimentConfig(name="tiny", seeds=(0, 1, 2)), overrides)
