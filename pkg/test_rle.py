import numpy as np
import pytest

import rle


def test_encode_examples():
    assert rle.encode(np.array([0, 0, 1, 1, 1, 0])) == [2, 3, 1]
    assert rle.encode(np.array([1, 1, 0])) == [0, 2, 1]
    assert rle.encode(np.zeros((2, 2))) == [4]
    assert rle.encode(np.zeros(0)) == []


def test_decode_restores_row_major_grid():
    mask = np.array([[0, 1, 1], [1, 0, 0]], dtype=bool)
    assert rle.encode(mask) == [1, 3, 2]
    assert np.array_equal(rle.decode([1, 3, 2], (2, 3)), mask)


def test_decode_rejects_inconsistent_runs():
    with pytest.raises(ValueError):
        rle.decode([1, 2], (2, 2))
    with pytest.raises(ValueError):
        rle.decode([5, -1], (2, 2))


def test_json_payload():
    mask = np.eye(3, dtype=bool)
    payload = rle.to_json(mask)
    assert payload == {"size": [3, 3], "counts": [0, 1, 3, 1, 3, 1]}
    assert np.array_equal(rle.from_json(payload), mask)


def test_runs_follow_row_major_order():
    mask = np.array([[1, 1, 0], [0, 0, 0]], dtype=bool)
    assert rle.encode(mask) == [0, 2, 4]
    assert np.array_equal(rle.decode([0, 2, 4], (2, 3)), mask)
