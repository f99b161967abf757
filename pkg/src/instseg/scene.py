"""Scene data model, file formats, voxel downsampling, synthetic scenes.

A scene is a point cloud with per-point superpoint / instance / semantic
labels. Two interchangeable on-disk forms exist:

* JSON: header keys ``version, n_points, n_categories, has_colors,
  has_normals`` plus flat row-major arrays ``positions, colors, normals,
  superpoint_id, instance_id, semantic_label``. Floats keep full precision.
* Binary: magic ``R3DS``, little-endian, the same fields in the same order
  (64-bit floats, 32-bit ints). ``load_scene`` sniffs the magic, so either
  file is accepted wherever a scene path is expected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .config import SynthConfig

SCENE_MAGIC = b"R3DS"
SCENE_VERSION = 1

# base colors keyed by category (cycled); mid grey is reserved for background
_PALETTE = np.array(
    [
        [0.89, 0.29, 0.20], [0.22, 0.49, 0.72], [0.30, 0.69, 0.29], [0.60, 0.31, 0.64],
        [1.00, 0.50, 0.00], [0.65, 0.34, 0.16], [0.97, 0.51, 0.75], [0.40, 0.76, 0.65],
        [0.90, 0.77, 0.19], [0.12, 0.47, 0.42], [0.84, 0.15, 0.42], [0.36, 0.31, 0.77],
        [0.55, 0.63, 0.11], [0.14, 0.72, 0.80], [0.72, 0.45, 0.51], [0.47, 0.21, 0.29],
    ]
)


class ValidationError(ValueError):
    """A scene or file violates a format invariant; names the field."""


@dataclass
class Scene:
    positions: np.ndarray       # (n, 3) float64, meters
    superpoint_id: np.ndarray   # (n,) int32, dense in [0, m)
    instance_id: np.ndarray     # (n,) int32, -1 = background
    semantic_label: np.ndarray  # (n,) int32, -1 = background
    category_count: int
    colors: np.ndarray | None = None   # (n, 3) in [0, 1]
    normals: np.ndarray | None = None  # (n, 3) unit vectors

    @property
    def n_points(self):
        return self.positions.shape[0]

    @property
    def n_superpoints(self):
        return int(self.superpoint_id.max()) + 1 if self.n_points else 0

    def bounds(self):
        """Axis-aligned scene bounds (p_min, p_max), each (3,)."""
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def validate(self):
        n = self.positions.shape[0] if self.positions.ndim == 2 else -1
        if self.positions.ndim != 2 or self.positions.shape[1] != 3 or n < 1:
            raise ValidationError(f"positions: expected (n, 3) with n >= 1, got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("positions: non-finite values")
        for name in ("superpoint_id", "instance_id", "semantic_label"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValidationError(f"{name}: expected ({n},), got {arr.shape}")
        if self.category_count < 1:
            raise ValidationError(f"category_count: must be >= 1, got {self.category_count}")
        sp = self.superpoint_id
        if sp.min() < 0:
            raise ValidationError("superpoint_id: negative id")
        occupied = np.bincount(sp, minlength=int(sp.max()) + 1)
        if np.any(occupied == 0):
            raise ValidationError("superpoint_id: ids must be dense (every id in [0, m) occupied)")
        if self.instance_id.min() < -1:
            raise ValidationError("instance_id: ids must be >= -1")
        if self.semantic_label.min() < -1 or self.semantic_label.max() >= self.category_count:
            raise ValidationError("semantic_label: labels must lie in [-1, category_count)")
        for iid in np.unique(self.instance_id):
            if iid < 0:
                continue
            labels = np.unique(self.semantic_label[self.instance_id == iid])
            if len(labels) != 1:
                raise ValidationError(f"semantic_label: instance {iid} spans labels {labels.tolist()}")
            if labels[0] < 0:
                raise ValidationError(f"semantic_label: instance {iid} has background label")
        if self.colors is not None:
            if self.colors.shape != (n, 3):
                raise ValidationError(f"colors: expected ({n}, 3), got {self.colors.shape}")
            if self.colors.min() < 0.0 or self.colors.max() > 1.0:
                raise ValidationError("colors: values must lie in [0, 1]")
        if self.normals is not None:
            if self.normals.shape != (n, 3):
                raise ValidationError(f"normals: expected ({n}, 3), got {self.normals.shape}")
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-4):
                raise ValidationError("normals: rows must be unit length within 1e-4")
        return self


def _as_scene_arrays(scene):
    scene.positions = np.ascontiguousarray(scene.positions, dtype=np.float64)
    scene.superpoint_id = np.ascontiguousarray(scene.superpoint_id, dtype=np.int32)
    scene.instance_id = np.ascontiguousarray(scene.instance_id, dtype=np.int32)
    scene.semantic_label = np.ascontiguousarray(scene.semantic_label, dtype=np.int32)
    if scene.colors is not None:
        scene.colors = np.ascontiguousarray(scene.colors, dtype=np.float64)
    if scene.normals is not None:
        scene.normals = np.ascontiguousarray(scene.normals, dtype=np.float64)
    return scene


def scene_digest(scene):
    """Content hash, independent of where the scene sits in a dataset."""
    h = hashlib.sha1()
    h.update(np.int64(scene.category_count).tobytes())
    for arr in (scene.positions, scene.superpoint_id, scene.instance_id, scene.semantic_label):
        h.update(np.ascontiguousarray(arr).tobytes())
    for arr in (scene.colors, scene.normals):
        h.update(b"\x00" if arr is None else np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# -- file formats ------------------------------------------------------------


def save_scene(scene, path, fmt="json"):
    scene = _as_scene_arrays(scene).validate()
    if fmt == "json":
        doc = {
            "version": SCENE_VERSION,
            "n_points": scene.n_points,
            "n_categories": scene.category_count,
            "has_colors": scene.colors is not None,
            "has_normals": scene.normals is not None,
            "positions": scene.positions.reshape(-1).tolist(),
        }
        if scene.colors is not None:
            doc["colors"] = scene.colors.reshape(-1).tolist()
        if scene.normals is not None:
            doc["normals"] = scene.normals.reshape(-1).tolist()
        doc["superpoint_id"] = scene.superpoint_id.tolist()
        doc["instance_id"] = scene.instance_id.tolist()
        doc["semantic_label"] = scene.semantic_label.tolist()
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
    elif fmt == "binary":
        parts = [
            SCENE_MAGIC,
            np.array([SCENE_VERSION, scene.n_points, scene.category_count], dtype="<u4").tobytes(),
            np.array([scene.colors is not None, scene.normals is not None], dtype="u1").tobytes(),
            scene.positions.astype("<f8").tobytes(),
        ]
        if scene.colors is not None:
            parts.append(scene.colors.astype("<f8").tobytes())
        if scene.normals is not None:
            parts.append(scene.normals.astype("<f8").tobytes())
        for arr in (scene.superpoint_id, scene.instance_id, scene.semantic_label):
            parts.append(arr.astype("<i4").tobytes())
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    else:
        raise ValidationError(f"format: unknown scene format {fmt!r}")


def load_scene(path):
    """Load a scene file, sniffing JSON vs binary by the leading magic."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] == SCENE_MAGIC:
        return _load_binary(blob).validate()
    try:
        doc = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"file: neither {SCENE_MAGIC!r} binary nor JSON ({exc})") from exc
    return _load_json(doc).validate()


def _load_json(doc):
    for key in ("version", "n_points", "n_categories", "has_colors", "has_normals"):
        if key not in doc:
            raise ValidationError(f"{key}: missing header field")
    if doc["version"] != SCENE_VERSION:
        raise ValidationError(f"version: unsupported scene version {doc['version']}")
    n = int(doc["n_points"])

    def grab(key, dtype, width=None, expected=True):
        if not expected:
            if key in doc:
                raise ValidationError(f"{key}: present but header flag is false")
            return None
        if key not in doc:
            raise ValidationError(f"{key}: missing array")
        arr = np.asarray(doc[key], dtype=dtype)
        want = n * (width or 1)
        if arr.size != want:
            raise ValidationError(f"{key}: expected {want} values, got {arr.size}")
        return arr.reshape(n, width) if width else arr

    return Scene(
        positions=grab("positions", np.float64, 3),
        colors=grab("colors", np.float64, 3, doc["has_colors"]),
        normals=grab("normals", np.float64, 3, doc["has_normals"]),
        superpoint_id=grab("superpoint_id", np.int32),
        instance_id=grab("instance_id", np.int32),
        semantic_label=grab("semantic_label", np.int32),
        category_count=int(doc["n_categories"]),
    )


def _load_binary(blob):
    off = 4
    header = np.frombuffer(blob, dtype="<u4", count=3, offset=off)
    off += 12
    version, n, n_cat = (int(x) for x in header)
    if version != SCENE_VERSION:
        raise ValidationError(f"version: unsupported scene version {version}")
    flags = np.frombuffer(blob, dtype="u1", count=2, offset=off)
    off += 2

    def take(dtype, count, width):
        nonlocal off
        try:
            arr = np.frombuffer(blob, dtype=dtype, count=count * width, offset=off)
        except ValueError as exc:
            raise ValidationError(f"file: truncated binary scene ({exc})") from exc
        off += arr.nbytes
        return arr.reshape(count, width).copy() if width > 1 else arr.copy()

    positions = take("<f8", n, 3)
    colors = take("<f8", n, 3) if flags[0] else None
    normals = take("<f8", n, 3) if flags[1] else None
    sp = take("<i4", n, 1)
    inst = take("<i4", n, 1)
    sem = take("<i4", n, 1)
    if off != len(blob):
        raise ValidationError("file: trailing bytes in binary scene")
    return Scene(
        positions=positions,
        colors=colors,
        normals=normals,
        superpoint_id=sp.astype(np.int32),
        instance_id=inst.astype(np.int32),
        semantic_label=sem.astype(np.int32),
        category_count=n_cat,
    )


# -- voxel downsampling -------------------------------------------------------


def voxelize(scene, size):
    """Merge points sharing a voxel of the given edge length.

    Each output point is the centroid of its voxel's members and takes the
    majority superpoint / instance; its semantic label is the majority label
    among the winning instance's members (ties toward the smaller id).
    """
    if size <= 0:
        raise ValidationError(f"size: voxel size must be positive, got {size}")
    keys = np.floor(scene.positions / size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    v = len(uniq)
    positions = np.zeros((v, 3))
    np.add.at(positions, inverse, scene.positions)
    counts = np.bincount(inverse, minlength=v).astype(np.float64)
    positions /= counts[:, None]

    colors = None
    if scene.colors is not None:
        colors = np.zeros((v, 3))
        np.add.at(colors, inverse, scene.colors)
        colors = np.clip(colors / counts[:, None], 0.0, 1.0)
    normals = None
    if scene.normals is not None:
        normals = np.zeros((v, 3))
        np.add.at(normals, inverse, scene.normals)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        fallback = np.array([0.0, 0.0, 1.0])
        normals = np.where(norms > 1e-12, normals / np.maximum(norms, 1e-12), fallback)

    sp = np.zeros(v, dtype=np.int64)
    inst = np.zeros(v, dtype=np.int64)
    sem = np.zeros(v, dtype=np.int64)
    for i in range(v):
        members = np.nonzero(inverse == i)[0]
        sp[i] = _majority(scene.superpoint_id[members])
        inst[i] = _majority(scene.instance_id[members])
        chosen = members[scene.instance_id[members] == inst[i]]
        sem[i] = _majority(scene.semantic_label[chosen])

    # re-index superpoints: merging can drop some ids entirely
    _, sp_dense = np.unique(sp, return_inverse=True)
    out = Scene(
        positions=positions,
        colors=colors,
        normals=normals,
        superpoint_id=sp_dense.astype(np.int32),
        instance_id=inst.astype(np.int32),
        semantic_label=sem.astype(np.int32),
        category_count=scene.category_count,
    )
    return out.validate()


def _majority(values):
    """Most frequent value; ties resolve to the smallest."""
    uniq, counts = np.unique(values, return_counts=True)
    return int(uniq[np.argmax(counts)])


# -- synthetic scenes ---------------------------------------------------------


def synth_scene(cfg: SynthConfig, index):
    """Generate one synthetic scene, deterministic under (cfg.seed, index).

    Instances are axis-aligned boxes with per-scene distinct categories; each
    box is split into ``superpoints_per_box`` slabs along its longest axis and
    every slab receives at least one point. Background points use a coarse
    grid of ``background_cell`` cells as superpoints.
    """
    cfg.validate()
    if index < 0:
        raise ValidationError(f"index: scene index must be >= 0, got {index}")
    rng = np.random.default_rng([cfg.seed, index])
    room = np.array([cfg.room_x, cfg.room_y, cfg.room_z])

    n_boxes = int(rng.integers(cfg.boxes_min, cfg.boxes_max + 1))
    categories = rng.permutation(cfg.category_count)[:n_boxes]
    placed = []  # (center, extent)
    for _ in range(n_boxes):
        extent = rng.uniform(cfg.box_extent_min, cfg.box_extent_max, size=3)
        for _attempt in range(64):
            center = rng.uniform(extent / 2.0, room - extent / 2.0)
            if all(np.any(np.abs(center - c) >= (extent + e) / 2.0) for c, e in placed):
                break
        placed.append((center, extent))

    positions, colors, sp_ids, inst_ids, sem_labels = [], [], [], [], []
    spb = cfg.superpoints_per_box
    for b, (center, extent) in enumerate(placed):
        n_pts = int(rng.integers(cfg.points_per_box_min, cfg.points_per_box_max + 1))
        axis = int(np.argmax(extent))
        lo = center - extent / 2.0
        hi = center + extent / 2.0
        slab = extent[axis] / spb
        per_slab = np.full(spb, n_pts // spb)
        per_slab[: n_pts % spb] += 1  # every slab occupied since n_pts >= spb
        base = _PALETTE[categories[b] % len(_PALETTE)]
        for s in range(spb):
            cnt = int(per_slab[s])
            pts = rng.uniform(lo, hi, size=(cnt, 3))
            pts[:, axis] = rng.uniform(lo[axis] + s * slab, lo[axis] + (s + 1) * slab, size=cnt)
            positions.append(pts)
            colors.append(np.clip(base + rng.normal(0.0, 0.03, size=(cnt, 3)), 0.0, 1.0))
            sp_ids.append(np.full(cnt, b * spb + s))
            inst_ids.append(np.full(cnt, b))
            sem_labels.append(np.full(cnt, categories[b]))

    if cfg.background_points > 0:
        bg = np.empty((cfg.background_points, 3))
        for i in range(cfg.background_points):
            for _attempt in range(100):
                p = rng.uniform(np.zeros(3), room)
                if all(np.any(np.abs(p - c) > e / 2.0) for c, e in placed):
                    break
            bg[i] = p
        cell_keys = np.floor(bg / cfg.background_cell).astype(np.int64)
        _, cell_rank = np.unique(cell_keys, axis=0, return_inverse=True)
        positions.append(bg)
        colors.append(np.clip(0.5 + rng.normal(0.0, 0.03, size=(cfg.background_points, 3)), 0.0, 1.0))
        sp_ids.append(n_boxes * spb + cell_rank)
        inst_ids.append(np.full(cfg.background_points, -1))
        sem_labels.append(np.full(cfg.background_points, -1))

    scene = Scene(
        positions=np.concatenate(positions),
        colors=np.concatenate(colors),
        normals=None,
        superpoint_id=np.concatenate(sp_ids).astype(np.int32),
        instance_id=np.concatenate(inst_ids).astype(np.int32),
        semantic_label=np.concatenate(sem_labels).astype(np.int32),
        category_count=cfg.category_count,
    )
    return _as_scene_arrays(scene).validate()


# -- instance summaries --------------------------------------------------------


@dataclass
class InstanceSummary:
    instance_id: int
    semantic_label: int
    center: np.ndarray        # (3,) mean of member point positions
    superpoints: np.ndarray   # sorted superpoint ids assigned by majority
    point_count: int


def superpoint_instance_assignment(scene):
    """Majority instance per superpoint, (m,) with -1 for none.

    Ties resolve to the smaller instance id, counting background (-1) as the
    smallest candidate.
    """
    m = scene.n_superpoints
    uniq, inst_dense = np.unique(scene.instance_id, return_inverse=True)
    counts = np.zeros((m, len(uniq)), dtype=np.int64)
    np.add.at(counts, (scene.superpoint_id, inst_dense), 1)
    return uniq[np.argmax(counts, axis=1)].astype(np.int64)


def instance_summaries(scene):
    """Per-instance label, centroid, and majority superpoint membership."""
    assignment = superpoint_instance_assignment(scene)
    out = []
    for iid in np.unique(scene.instance_id):
        if iid < 0:
            continue
        members = scene.instance_id == iid
        out.append(
            InstanceSummary(
                instance_id=int(iid),
                semantic_label=int(scene.semantic_label[members][0]),
                center=scene.positions[members].mean(axis=0),
                superpoints=np.nonzero(assignment == iid)[0],
                point_count=int(members.sum()),
            )
        )
    return out
