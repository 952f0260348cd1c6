import pytest

from experiment_config import (BackboneConfig, ConfigError, ExperimentConfig, RoiSettings, TrainSchedule,
                               config_diff, config_hash, load_config, parse_config, save_config, thread_count,
                               with_overrides)


def test_ini_round_trip(tmp_path):
    cfg = with_overrides(ExperimentConfig(name="sweep", seeds=(3, 4, 5)), {
        "roi.operator": "pool-max",
        "schedule.drop_points": (),
        "dataset.noise": 0.125,
        "heads.tasks": "box_mask_keypoint",
        "eval.iou_thresholds": (0.5, 0.75),
    })
    path = str(tmp_path / "sweep.ini")
    save_config(cfg, path)
    loaded = load_config(path)
    assert loaded == cfg
    assert config_hash(loaded) == config_hash(cfg)
    assert loaded.schedule.drop_points == ()
    assert loaded.seeds == (3, 4, 5)


def test_missing_sections_and_keys_keep_defaults():
    assert parse_config("") == ExperimentConfig()
    cfg = parse_config("[roi]\noperator = warp-avg\n")
    assert cfg.roi.operator == "warp-avg"
    assert cfg.roi.sampling_points == RoiSettings().sampling_points


@pytest.mark.parametrize("text", [
    "[roi]\nfoo = 1\n",
    "[bogus]\nkey = 1\n",
    "[experiment]\ncolour = red\n",
    "[schedule]\niterations = many\n",
    "[backbone]\nstride = 5\n",
    "no section header\n",
])
def test_bad_config_text_raises_config_error(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.ini"))


def test_hash_is_stable_and_sensitive():
    assert config_hash(ExperimentConfig()) == config_hash(ExperimentConfig())
    assert len(config_hash(ExperimentConfig())) == 12
    changed = with_overrides(ExperimentConfig(), {"roi.sampling_points": 3})
    assert config_hash(changed) != config_hash(ExperimentConfig())


def test_overrides_and_diff():
    base = ExperimentConfig()
    variant = with_overrides(base, {"roi.operator": "pool-max"})
    assert config_diff(base, variant) == {"roi.operator": ("align-avg", "pool-max")}
    assert config_diff(base, base) == {}
    with pytest.raises(ConfigError):
        with_overrides(base, {"roi.nonexistent": 1})
    with pytest.raises(ConfigError):
        with_overrides(base, {"operator": "pool-max"})
    with pytest.raises(ConfigError):
        with_overrides(base, {"roi.sampling_points": 0})


def test_schedule_learning_rate():
    schedule = TrainSchedule(iterations=100, lr=0.1, drop_points=(50,), warmup_iterations=10, warmup_factor=0.5)
    assert schedule.lr_at(0) == pytest.approx(0.05)
    assert schedule.lr_at(5) == pytest.approx(0.075)
    assert schedule.lr_at(10) == pytest.approx(0.1)
    assert schedule.lr_at(50) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        TrainSchedule(iterations=10, drop_points=(10,))


def test_backbone_and_roi_settings():
    backbone = BackboneConfig(stride=16)
    assert backbone.num_stages == 4 and backbone.out_channels == 32
    with pytest.raises(ValueError):
        BackboneConfig(stride=32, widths=(8, 8))
    spec = RoiSettings(operator="warp-max").spec(7, 16)
    assert (spec.kind, spec.aggregation, spec.feature_stride) == ("warp", "max", 16.0)
    keypoint = RoiSettings(keypoint_operator="pool").keypoint_spec(7, 8)
    assert (keypoint.kind, keypoint.aggregation) == ("pool", "max")


def test_thread_count(monkeypatch):
    monkeypatch.setenv("REGIONLAB_THREADS", "4")
    assert thread_count() == 4
    monkeypatch.setenv("REGIONLAB_THREADS", "0")
    assert thread_count() == 1
    monkeypatch.setenv("REGIONLAB_THREADS", "lots")
    assert thread_count() == 1
    monkeypatch.delenv("REGIONLAB_THREADS")
    assert thread_count() == 1
