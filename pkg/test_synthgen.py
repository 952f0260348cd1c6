import json
import os

import numpy as np
import pytest

from boxgeom import Box
from synthgen import (BLOB_NAME, MANIFEST_NAME, MIN_VISIBLE_AREA, DatasetFormatError, SceneSpec, generate_scene,
                      generate_scenes, read_dataset, regenerate_digest, shape_area, tight_box, write_dataset)

SMALL = SceneSpec(image_h=32, image_w=40, min_size=8.0, max_size=16.0, seed=5)


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(max_size=200.0)
    with pytest.raises(ValueError):
        SceneSpec(min_instances=3, max_instances=2)
    with pytest.raises(ValueError):
        SceneSpec(overlap_bias=1.5)


def test_generation_is_a_pure_function_of_seed_and_index():
    image_a, anns_a = generate_scene(SMALL, 3)
    image_b, anns_b = generate_scene(SMALL, 3)
    assert np.array_equal(image_a, image_b)
    assert [(a.class_id, a.box, a.depth) for a in anns_a] == [(b.class_id, b.box, b.depth) for b in anns_b]
    image_c, _ = generate_scene(SMALL, 4)
    assert not np.array_equal(image_a, image_c)


def test_annotations_are_consistent():
    for scene in generate_scenes(SceneSpec(image_h=48, image_w=48, min_size=8.0, max_size=24.0,
                                           max_instances=4, overlap_bias=0.7, seed=1), 12):
        assert scene.image.shape == (3, 48, 48)
        depths = [a.depth for a in scene.annotations]
        assert depths == sorted(depths)
        for ann in scene.annotations:
            assert 1 <= ann.class_id <= 3
            assert ann.area >= MIN_VISIBLE_AREA
            assert ann.box == tight_box(ann.mask)
            assert len(ann.keypoints) == 3


def test_tight_box_and_shape_area():
    mask = np.zeros((6, 6), dtype=bool)
    mask[2:4, 1:5] = True
    assert tight_box(mask) == Box(1.0, 2.0, 5.0, 4.0)
    assert shape_area(2, 4.0) == 16.0
    assert shape_area(3, 4.0) == 8.0


def test_dataset_write_and_read(tmp_path):
    path = str(tmp_path / "train")
    digest = write_dataset(path, SMALL, 4, start=2)
    spec, scenes = read_dataset(path)
    assert spec == SMALL
    assert [s.index for s in scenes] == [2, 3, 4, 5]
    for scene in scenes:
        image, annotations = generate_scene(SMALL, scene.index)
        assert np.array_equal(scene.image, image)
        assert len(scene.annotations) == len(annotations)
        for got, want in zip(scene.annotations, annotations):
            assert got.box == want.box and got.keypoints == want.keypoints
            assert np.array_equal(got.mask, want.mask)
    assert regenerate_digest(path) == digest


def test_corrupted_blob_is_detected(tmp_path):
    path = str(tmp_path / "data")
    write_dataset(path, SMALL, 2)
    blob_path = os.path.join(path, BLOB_NAME)
    with open(blob_path, "rb") as f:
        blob = bytearray(f.read())
    blob[100] ^= 0xFF
    with open(blob_path, "wb") as f:
        f.write(bytes(blob))
    with pytest.raises(DatasetFormatError):
        read_dataset(path)
    with open(blob_path, "wb") as f:
        f.write(bytes(blob[:50]))
    with pytest.raises(DatasetFormatError):
        read_dataset(path)


def test_missing_or_foreign_manifest(tmp_path):
    with pytest.raises(DatasetFormatError):
        read_dataset(str(tmp_path))
    path = str(tmp_path / "data")
    write_dataset(path, SMALL, 1)
    manifest_path = os.path.join(path, MANIFEST_NAME)
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    manifest["format_version"] = 42
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f)
    with pytest.raises(DatasetFormatError):
        read_dataset(path)
