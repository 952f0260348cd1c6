import json

import numpy as np
import pytest

from boxgeom import Box
from postproc import (DetectionResult, decode_detections, decode_keypoints, paste_mask, read_detections,
                      select_detections, select_mask, serialize_detections, write_detections)


def test_detection_result_validation():
    with pytest.raises(ValueError):
        DetectionResult(box=Box(0, 0, 1, 1), class_id=0, score=0.5)
    with pytest.raises(ValueError):
        DetectionResult(box=Box(0, 0, 1, 1), class_id=1, score=1.5)


def test_paste_mask_resizes_into_the_box():
    pasted = paste_mask(np.array([[1.0, 0.0], [0.0, 0.0]]), Box(0, 0, 4, 4), 6, 6)
    expected = np.zeros((6, 6), dtype=bool)
    expected[:2, :2] = True
    assert np.array_equal(pasted.grid, expected)
    assert pasted.area == 4


def test_paste_mask_clips_to_the_image_and_handles_empty_boxes():
    pasted = paste_mask(np.ones((4, 4)), Box(-2.0, 3.0, 3.0, 9.0), 6, 5)
    assert pasted.grid.shape == (6, 5)
    assert pasted.grid[3:, :3].all()
    assert pasted.area == 9
    assert paste_mask(np.ones((4, 4)), Box(2, 2, 2, 5), 6, 6).area == 0


def test_select_mask_picks_the_predicted_class_channel():
    logits = np.stack([np.full((2, 2), float(k)) for k in range(3)])
    assert np.all(select_mask(logits, 2) == 1.0)
    assert np.all(select_mask(logits[:1], 3) == 0.0)
    assert np.all(select_mask(logits, 3, class_agnostic=True) == 0.0)
    with pytest.raises(ValueError):
        select_mask(logits, 4)
    with pytest.raises(ValueError):
        select_mask(logits, 0)


def test_decode_detections_with_zero_deltas_returns_clipped_proposals():
    proposals = [Box(-4, 2, 10, 12), Box(20, 20, 40, 30)]
    probs = np.array([[0.1, 0.6, 0.3], [0.5, 0.2, 0.3]])
    scored = decode_detections(proposals, probs, np.zeros((2, 2, 4)), image_h=32, image_w=32)
    assert len(scored) == 4
    box, class_id, score = scored[0]
    assert class_id == 1 and score == 0.6
    assert box.as_array() == pytest.approx([0.0, 2.0, 10.0, 12.0])
    assert decode_detections([], probs, np.zeros((0, 2, 4)), 32, 32) == []


def test_select_detections_runs_nms_per_class():
    box = Box(0, 0, 10, 10)
    shifted = Box(1, 0, 11, 10)
    scored = [(box, 1, 0.9), (shifted, 1, 0.8), (shifted, 2, 0.7), (Box(50, 50, 60, 60), 1, 0.01)]
    dets = select_detections(scored, nms_threshold=0.5, score_threshold=0.05)
    assert [(d.class_id, d.score) for d in dets] == [(1, 0.9), (2, 0.7)]
    assert len(select_detections(scored, top_k=1)) == 1
    with pytest.raises(ValueError):
        select_detections(scored, top_k=0)


def test_decode_keypoints_maps_argmax_cell_centres():
    heatmaps = np.zeros((1, 4, 4))
    heatmaps[0, 1, 2] = 30.0
    (x, y, confidence), = decode_keypoints(heatmaps, Box(0, 0, 8, 8))
    assert (x, y) == (5.0, 3.0)
    assert confidence == pytest.approx(1.0)


def test_detections_write_and_read(tmp_path):
    mask = np.zeros((5, 6), dtype=bool)
    mask[1:3, 2:5] = True
    dets = [DetectionResult(box=Box(2, 1, 5, 3), class_id=2, score=0.75, mask=mask,
                            keypoints=[(3.0, 2.0, 0.5)]),
            DetectionResult(box=Box(0, 0, 1, 1), class_id=1, score=0.25)]
    records = serialize_detections(7, dets)
    assert records[0]["image"] == 7 and records[0]["mask"]["size"] == [5, 6]
    assert "mask" not in records[1]
    path = str(tmp_path / "dets.json")
    write_detections(path, records)
    back = read_detections(path)
    assert [d.class_id for d in back] == [2, 1]
    assert np.array_equal(back[0].mask, mask)
    assert back[0].keypoints == [(3.0, 2.0, 0.5)]


def test_read_detections_rejects_unknown_format(tmp_path):
    path = tmp_path / "dets.json"
    path.write_text(json.dumps({"format_version": 99, "detections": []}))
    with pytest.raises(ValueError):
        read_detections(str(path))
