import math

import numpy as np
import pytest

from boxgeom import (Box, BoxError, decode_box, decode_boxes, encode_box, encode_boxes, generate_anchors, iou,
                     iou_matrix, match_and_sample, nms)
from synthgen import InstanceAnnotation


def annotation(box: Box, class_id: int = 1) -> InstanceAnnotation:
    return InstanceAnnotation(class_id=class_id, box=box, mask=np.zeros((4, 4), dtype=bool))


def random_box(rng) -> Box:
    x1, y1 = rng.uniform(0, 50, size=2)
    w, h = rng.uniform(1, 40, size=2)
    return Box(x1, y1, x1 + w, y1 + h)


def test_box_rejects_inverted_or_nonfinite_corners():
    with pytest.raises(BoxError):
        Box(5.0, 0.0, 1.0, 2.0)
    with pytest.raises(BoxError):
        Box(0.0, 0.0, float("nan"), 1.0)
    assert Box(0.25, 0.5, 1.75, 2.125).as_array().tolist() == [0.25, 0.5, 1.75, 2.125]


def test_iou_examples():
    a = Box(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, Box(5, 5, 6, 6)) == 0.0
    assert iou(a, Box(1, 1, 3, 3)) == pytest.approx(1.0 / 7.0, abs=1e-15)
    assert iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0.0


def test_iou_symmetric_and_similarity_invariant():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = random_box(rng), random_box(rng)
        assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-15)
        s, t = rng.uniform(0.5, 3.0), rng.uniform(-10, 10, size=2)
        moved = [Box(s * x.x1 + t[0], s * x.y1 + t[1], s * x.x2 + t[0], s * x.y2 + t[1]) for x in (a, b)]
        assert iou(*moved) == pytest.approx(iou(a, b), abs=1e-9)


def test_iou_matrix_agrees_with_scalar_iou():
    rng = np.random.default_rng(1)
    boxes_a = [random_box(rng) for _ in range(5)]
    boxes_b = [random_box(rng) for _ in range(4)]
    matrix = iou_matrix(np.stack([b.as_array() for b in boxes_a]), np.stack([b.as_array() for b in boxes_b]))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            assert matrix[i, j] == pytest.approx(iou(a, b), abs=1e-12)


def test_nms_single_and_duplicate():
    assert nms([], 0.5) == []
    assert nms([(Box(0, 0, 4, 4), 0.3)], 0.5) == [0]
    box = Box(0, 0, 10, 10)
    assert nms([(box, 0.8), (box, 0.9)], 0.5) == [1]


def test_nms_traces_greedy_selection():
    a, b, c = Box(0, 0, 10, 1), Box(2.5, 0, 12.5, 1), Box(-20 / 3, 0, 10 / 3, 1)
    assert iou(a, b) == pytest.approx(0.6)
    assert iou(a, c) == pytest.approx(0.2)
    assert iou(b, c) < 0.5
    assert nms([(a, 0.9), (b, 0.8), (c, 0.7)], 0.5) == [0, 2]


def test_nms_ties_prefer_lower_index_and_output_is_antichain():
    box = Box(0, 0, 4, 4)
    assert nms([(box, 0.5), (box, 0.5)], 0.5) == [0]
    rng = np.random.default_rng(2)
    scored = [(random_box(rng), float(rng.uniform())) for _ in range(30)]
    keep = nms(scored, 0.4)
    for i in keep:
        for j in keep:
            if i != j:
                assert iou(scored[i][0], scored[j][0]) <= 0.4


def test_nms_rejects_bad_threshold():
    with pytest.raises(BoxError):
        nms([(Box(0, 0, 1, 1), 1.0)], 1.5)


def test_generate_anchors_single_cell():
    anchors = generate_anchors(1, 1, 16.0, [16.0], [1.0])
    assert len(anchors) == 1
    assert anchors.boxes[0] == Box(0.0, 0.0, 16.0, 16.0)


def test_generate_anchors_area_and_count():
    anchors = generate_anchors(2, 2, 8.0, [16.0, 32.0], [0.5, 1.0, 2.0])
    assert len(anchors) == 24 and anchors.per_cell == 6
    wide = anchors.boxes[2]
    assert wide.width * wide.height == pytest.approx(16.0 ** 2, abs=1e-9)
    assert wide.width / wide.height == pytest.approx(2.0)
    # cell (0, 1) is centred at (12, 4)
    assert anchors.boxes[6].center == pytest.approx((12.0, 4.0))


def test_generate_anchors_rejects_nonpositive_scale():
    with pytest.raises(BoxError):
        generate_anchors(1, 1, 16.0, [0.0], [1.0])
    with pytest.raises(BoxError):
        generate_anchors(1, 1, 16.0, [16.0], [-1.0])


def test_encode_examples():
    anchor = Box(0, 0, 10, 10)
    assert encode_box(anchor, anchor).tolist() == [0.0, 0.0, 0.0, 0.0]
    delta = encode_box(Box(0, 0, 10, 20), anchor)
    assert delta == pytest.approx([0.0, 0.5, 0.0, math.log(2.0)], abs=1e-15)
    with pytest.raises(BoxError):
        encode_box(Box(1, 1, 1, 5), anchor)


def test_decode_inverts_encode():
    rng = np.random.default_rng(4)
    for weights in ((1.0, 1.0, 1.0, 1.0), (10.0, 10.0, 5.0, 5.0)):
        for _ in range(50):
            target, anchor = random_box(rng), random_box(rng)
            back = decode_box(encode_box(target, anchor, weights), anchor, weights)
            assert back.as_array() == pytest.approx(target.as_array(), abs=1e-9)


def test_decode_clamps_log_scale():
    anchors = np.array([[0.0, 0.0, 10.0, 10.0]])
    out = decode_boxes(np.array([[0.0, 0.0, 50.0, 50.0]]), anchors, max_log_scale=math.log(4.0))
    assert out[0] == pytest.approx([-15.0, -15.0, 25.0, 25.0])
    assert encode_boxes(anchors, anchors).shape == (1, 4)


def test_match_single_identical_proposal_is_positive():
    gt = Box(10, 10, 30, 30)
    samples = match_and_sample([gt], [annotation(gt, class_id=2)], 8, 0.25, np.random.default_rng(0))
    assert len(samples) == 1
    sample = samples[0]
    assert sample.label == 2 and sample.matched_gt == 0 and sample.is_positive
    assert sample.regression_target.tolist() == [0.0, 0.0, 0.0, 0.0]


def test_match_just_below_threshold_is_negative():
    gt = Box(0, 0, 100, 1)
    proposal = Box(0, 0, 49, 1)
    assert iou(proposal, gt) == pytest.approx(0.49)
    samples = match_and_sample([proposal], [annotation(gt)], 4, 0.25, np.random.default_rng(0))
    assert [s.label for s in samples] == [0]
    assert samples[0].regression_target is None and samples[0].matched_gt is None


def test_match_respects_quota():
    gt = Box(0, 0, 20, 20)
    positives = [Box(0, 0, 20, 20 + 0.1 * i) for i in range(30)]
    negatives = [Box(40 + i, 40, 50 + i, 50) for i in range(70)]
    samples = match_and_sample(positives + negatives, [annotation(gt)], 64, 0.25, np.random.default_rng(7))
    assert len(samples) == 64
    assert sum(s.is_positive for s in samples) == 16
    assert sum(not s.is_positive for s in samples) == 48


def test_match_fills_shortfall_with_negatives():
    gt = Box(0, 0, 20, 20)
    proposals = [gt] + [Box(40 + i, 40, 50 + i, 50) for i in range(20)]
    samples = match_and_sample(proposals, [annotation(gt)], 16, 0.25, np.random.default_rng(3))
    assert len(samples) == 16
    assert sum(s.is_positive for s in samples) == 1


def test_match_edge_cases():
    assert match_and_sample([], [annotation(Box(0, 0, 1, 1))], 4, 0.25, np.random.default_rng(0)) == []
    with pytest.raises(BoxError):
        match_and_sample([Box(0, 0, 1, 1)], [], 0, 0.25, np.random.default_rng(0))
    samples = match_and_sample([Box(0, 0, 1, 1)], [], 4, 0.25, np.random.default_rng(0))
    assert [s.label for s in samples] == [0]
