"""
Run-length coding for binary masks.

Runs are taken over the row-major flattening and always start with a (possibly
empty) run of zeros, so [0,0,1,1,1,0] encodes as [2, 3, 1].
"""

from typing import Dict, List, Sequence, Tuple

import numpy as np


def encode(mask: np.ndarray) -> List[int]:
    flat = np.asarray(mask).astype(bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def decode(runs: Sequence[int], shape: Tuple[int, int]) -> np.ndarray:
    total = int(np.prod(shape))
    if any(r < 0 for r in runs) or sum(runs) != total:
        raise ValueError(f"run lengths sum to {sum(runs)}, expected {total} for shape {tuple(shape)}")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    return np.repeat(values, np.asarray(runs, dtype=np.int64)).reshape(shape)


def to_json(mask: np.ndarray) -> Dict:
    mask = np.asarray(mask)
    return {"size": list(mask.shape), "counts": encode(mask)}


def from_json(payload: Dict) -> np.ndarray:
    return decode(payload["counts"], tuple(payload["size"]))
