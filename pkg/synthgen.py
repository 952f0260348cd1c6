"""
Deterministic synthetic scenes of overlapping circles, squares and triangles,
with exact masks, tight boxes and three keypoints per instance, plus the
manifest + binary blob dataset format.
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

import rle
from boxgeom import Box

logger = logging.getLogger(__name__)

SHAPE_CLASSES = ("circle", "square", "triangle")
MIN_VISIBLE_AREA = 16
DATASET_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "scenes.bin"


class DatasetFormatError(ValueError):
    """Raised when an on-disk dataset does not match its manifest"""


@dataclass(frozen=True)
class SceneSpec:
    image_h: int = 96
    image_w: int = 96
    min_instances: int = 1
    max_instances: int = 3
    min_size: float = 16.0
    max_size: float = 40.0
    overlap_bias: float = 0.0
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.image_h < 1 or self.image_w < 1:
            raise ValueError(f"image extents must be positive, got {self.image_h}x{self.image_w}")
        if self.min_instances < 1 or self.max_instances < self.min_instances:
            raise ValueError(f"instance count range invalid: [{self.min_instances}, {self.max_instances}]")
        if self.min_size <= 0 or self.max_size < self.min_size:
            raise ValueError(f"size range invalid: [{self.min_size}, {self.max_size}]")
        if self.max_size > min(self.image_h, self.image_w):
            raise ValueError(f"max_size {self.max_size} does not fit a {self.image_h}x{self.image_w} image")
        if not 0.0 <= self.overlap_bias <= 1.0:
            raise ValueError(f"overlap_bias must be in [0,1], got {self.overlap_bias}")
        if self.noise < 0:
            raise ValueError(f"noise amplitude must be >= 0, got {self.noise}")

    @property
    def num_classes(self) -> int:
        return len(SHAPE_CLASSES)


@dataclass
class InstanceAnnotation:
    class_id: int
    box: Box
    mask: np.ndarray = field(repr=False)
    keypoints: List[Tuple[float, float, bool]] = field(default_factory=list)
    depth: int = 0

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass
class Scene:
    index: int
    image: np.ndarray = field(repr=False)
    annotations: List[InstanceAnnotation] = field(default_factory=list)


def tight_box(mask: np.ndarray) -> Box:
    """Half-open pixel box of a nonempty mask"""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def shape_area(class_id: int, size: float) -> float:
    if class_id == 1:
        return np.pi * (size / 2.0) ** 2
    if class_id == 2:
        return size * size
    return size * size / 2.0


def _rasterize(class_id: int, cx: float, cy: float, size: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    half = size / 2.0
    if class_id == 1:
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half ** 2
    if class_id == 2:
        return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    # upward triangle: apex (cx, cy-half), base from (cx-half, cy+half) to (cx+half, cy+half)
    rel_y = ys - (cy - half)
    return (rel_y >= 0) & (ys <= cy + half) & (np.abs(xs - cx) <= rel_y / 2.0)


def _shape_keypoints(class_id: int, cx: float, cy: float, size: float) -> List[Tuple[float, float]]:
    half = size / 2.0
    if class_id == 1:
        return [(cx, cy), (cx - half, cy), (cx + half, cy)]
    if class_id == 2:
        return [(cx, cy), (cx - half, cy - half), (cx + half, cy + half)]
    return [(cx, cy + size / 6.0), (cx, cy - half), (cx - half, cy + half)]


def _covers(mask: np.ndarray, x: float, y: float) -> bool:
    h, w = mask.shape
    col = min(int(np.floor(x)), w - 1)
    row = min(int(np.floor(y)), h - 1)
    return bool(mask[row, col])


def generate_scene(spec: SceneSpec, index: int) -> Tuple[np.ndarray, List[InstanceAnnotation]]:
    """Image [3,H,W] and annotations; a pure function of (spec.seed, index)"""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.image_h, spec.image_w
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    image = spec.noise * rng.standard_normal((3, h, w))

    count = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    placed = []
    for i in range(count):
        class_id = int(rng.integers(1, spec.num_classes + 1))
        size = float(rng.uniform(spec.min_size, spec.max_size))
        half = size / 2.0
        if placed and rng.random() < spec.overlap_bias:
            _, px, py, psize = placed[-1]
            cx = px + rng.uniform(-psize / 3.0, psize / 3.0)
            cy = py + rng.uniform(-psize / 3.0, psize / 3.0)
        else:
            cx = rng.uniform(half, w - half)
            cy = rng.uniform(half, h - half)
        cx = float(np.clip(cx, half, w - half))
        cy = float(np.clip(cy, half, h - half))
        color = rng.uniform(0.2, 1.0, size=3)
        placed.append((class_id, cx, cy, size))
        raw = _rasterize(class_id, cx, cy, size, xs, ys)
        image[:, raw] = color[:, None]

    raw_masks = [_rasterize(c, cx, cy, s, xs, ys) for c, cx, cy, s in placed]
    annotations = []
    covered_later = np.zeros((h, w), dtype=bool)
    for depth in range(count - 1, -1, -1):
        class_id, cx, cy, size = placed[depth]
        visible = raw_masks[depth] & ~covered_later
        keypoints = []
        for x, y in _shape_keypoints(class_id, cx, cy, size):
            inside = 0.0 <= x < w and 0.0 <= y < h
            keypoints.append((x, y, inside and not _covers(covered_later, x, y)))
        covered_later = covered_later | raw_masks[depth]
        if np.count_nonzero(visible) < MIN_VISIBLE_AREA:
            logger.debug(f"Scene {index}: dropped occluded instance at depth {depth}")
            continue
        annotations.append(InstanceAnnotation(class_id=class_id, box=tight_box(visible), mask=visible,
                                              keypoints=keypoints, depth=depth))
    annotations.sort(key=lambda a: a.depth)
    return image, annotations


def generate_scenes(spec: SceneSpec, count: int, start: int = 0) -> List[Scene]:
    scenes = []
    for index in range(start, start + count):
        image, annotations = generate_scene(spec, index)
        scenes.append(Scene(index, image, annotations))
    return scenes


def _pack_scene(scene: Scene) -> bytes:
    c, h, w = scene.image.shape
    parts = [struct.pack("<qIIII", scene.index, c, h, w, len(scene.annotations)),
             np.ascontiguousarray(scene.image, dtype="<f8").tobytes()]
    for ann in scene.annotations:
        parts.append(struct.pack("<iI4d", ann.class_id, ann.depth, ann.box.x1, ann.box.y1, ann.box.x2, ann.box.y2))
        parts.append(struct.pack("<I", len(ann.keypoints)))
        for x, y, visible in ann.keypoints:
            parts.append(struct.pack("<2dB", x, y, int(bool(visible))))
        runs = rle.encode(ann.mask)
        parts.append(struct.pack("<I", len(runs)))
        parts.append(np.asarray(runs, dtype="<u4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes, origin: str):
        self.payload = payload
        self.offset = 0
        self.origin = origin

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise DatasetFormatError(f"{self.origin}: truncated payload at byte {self.offset} (need {size} more)")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_scene(reader: _Reader) -> Scene:
    index, c, h, w, n = reader.unpack("<qIIII")
    image = np.frombuffer(reader.take(8 * c * h * w), dtype="<f8").astype(np.float64).reshape(c, h, w)
    annotations = []
    for _ in range(n):
        class_id, depth, x1, y1, x2, y2 = reader.unpack("<iI4d")
        (num_keypoints,) = reader.unpack("<I")
        keypoints = []
        for _ in range(num_keypoints):
            x, y, visible = reader.unpack("<2dB")
            keypoints.append((x, y, bool(visible)))
        (num_runs,) = reader.unpack("<I")
        runs = np.frombuffer(reader.take(4 * num_runs), dtype="<u4").astype(np.int64)
        try:
            mask = rle.decode(runs.tolist(), (h, w))
        except ValueError as e:
            raise DatasetFormatError(f"{reader.origin}: scene {index}: {e}") from e
        annotations.append(InstanceAnnotation(class_id=class_id, box=Box(x1, y1, x2, y2), mask=mask,
                                              keypoints=keypoints, depth=depth))
    return Scene(index, image, annotations)


def write_dataset(path: str, spec: SceneSpec, count: int, start: int = 0,
                  scenes: Optional[Sequence[Scene]] = None) -> str:
    """Generate (unless given) and write count scenes; returns the blob's SHA-256"""
    os.makedirs(path, exist_ok=True)
    if scenes is None:
        scenes = generate_scenes(spec, count, start)
    if len(scenes) != count:
        raise ValueError(f"write_dataset: {len(scenes)} scenes given for count {count}")
    chunks = [_pack_scene(scene) for scene in scenes]
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()
    offsets, offset = [], 0
    for chunk in chunks:
        offsets.append({"offset": offset, "length": len(chunk)})
        offset += len(chunk)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "spec": asdict(spec),
        "count": count,
        "start": start,
        "blob": {"file": BLOB_NAME, "size": len(blob), "sha256": digest},
        "scenes": offsets,
    }
    with open(os.path.join(path, BLOB_NAME), "wb") as f:
        f.write(blob)
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Wrote {count} scenes to {path} (sha256 {digest[:12]})")
    return digest


def read_manifest(path: str) -> dict:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise DatasetFormatError(f"{manifest_path}: no dataset manifest") from e
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{manifest_path}: manifest is not valid JSON ({e})") from e
    version = manifest.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(f"{manifest_path}: format version {version}, expected {DATASET_FORMAT_VERSION}")
    return manifest


def read_dataset(path: str) -> Tuple[SceneSpec, List[Scene]]:
    manifest = read_manifest(path)
    spec = SceneSpec(**manifest["spec"])
    blob_path = os.path.join(path, manifest["blob"]["file"])
    with open(blob_path, "rb") as f:
        blob = f.read()
    expected = manifest["blob"]["size"]
    if len(blob) < expected:
        raise DatasetFormatError(f"{blob_path}: truncated, {len(blob)} of {expected} bytes")
    if len(blob) != expected or hashlib.sha256(blob).hexdigest() != manifest["blob"]["sha256"]:
        raise DatasetFormatError(f"{blob_path}: payload does not match manifest checksum")
    if manifest["count"] != len(manifest["scenes"]):
        raise DatasetFormatError(f"{path}: manifest count {manifest['count']} but {len(manifest['scenes'])} scene records")
    scenes = []
    for entry in manifest["scenes"]:
        reader = _Reader(blob[entry["offset"]:entry["offset"] + entry["length"]], blob_path)
        scene = _unpack_scene(reader)
        if reader.offset != entry["length"]:
            raise DatasetFormatError(f"{blob_path}: scene {scene.index} has {entry['length'] - reader.offset} trailing bytes")
        scenes.append(scene)
    logger.debug(f"Read {len(scenes)} scenes from {path}")
    return spec, scenes


def regenerate_digest(path: str) -> str:
    """SHA-256 of a blob regenerated from the manifest's spec; equals the stored digest for an intact dataset"""
    manifest = read_manifest(path)
    spec = SceneSpec(**manifest["spec"])
    scenes = generate_scenes(spec, manifest["count"], manifest.get("start", 0))
    return hashlib.sha256(b"".join(_pack_scene(s) for s in scenes)).hexdigest()
