"""Scene model, formats, voxel grid, synthetic generator."""

import numpy as np
import pytest

from instseg.config import SynthConfig
from instseg.scene import (
    Scene,
    ValidationError,
    instance_summaries,
    load_scene,
    save_scene,
    scene_digest,
    superpoint_instance_assignment,
    synth_scene,
    voxelize,
)


def tiny_scene():
    return Scene(
        positions=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0]]),
        superpoint_id=np.array([0, 0, 1, 2], dtype=np.int32),
        instance_id=np.array([0, 0, 1, -1], dtype=np.int32),
        semantic_label=np.array([2, 2, 0, -1], dtype=np.int32),
        category_count=3,
        colors=np.array([[0.1, 0.2, 0.3]] * 4),
        normals=np.array([[0.0, 0.0, 1.0]] * 4),
    )


# -- validation ---------------------------------------------------------------


def test_validate_accepts_good_scene():
    tiny_scene().validate()


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda s: setattr(s, "superpoint_id", np.array([0, 0, 2, 2], dtype=np.int32)), "superpoint_id"),
        (lambda s: setattr(s, "instance_id", np.array([0, 0, -2, -1], dtype=np.int32)), "instance_id"),
        (lambda s: setattr(s, "semantic_label", np.array([2, 1, 0, -1], dtype=np.int32)), "semantic_label"),
        (lambda s: setattr(s, "semantic_label", np.array([3, 3, 0, -1], dtype=np.int32)), "semantic_label"),
        (lambda s: setattr(s, "colors", np.full((4, 3), 1.5)), "colors"),
        (lambda s: setattr(s, "normals", np.full((4, 3), 0.9)), "normals"),
        (lambda s: setattr(s, "category_count", 0), "category_count"),
    ],
)
def test_validate_names_offending_field(mutate, field):
    s = tiny_scene()
    mutate(s)
    with pytest.raises(ValidationError, match=field):
        s.validate()


# -- round trips ---------------------------------------------------------------


@pytest.mark.parametrize("fmt", ["json", "binary"])
def test_save_load_round_trip_exact(tmp_path, fmt):
    s = tiny_scene()
    s.positions[0, 0] = 1.0 / 3.0  # not representable in short decimal
    path = tmp_path / f"scene.{fmt}"
    save_scene(s, path, fmt=fmt)
    back = load_scene(path)
    np.testing.assert_array_equal(back.positions, s.positions)
    np.testing.assert_array_equal(back.colors, s.colors)
    np.testing.assert_array_equal(back.normals, s.normals)
    np.testing.assert_array_equal(back.superpoint_id, s.superpoint_id)
    np.testing.assert_array_equal(back.instance_id, s.instance_id)
    np.testing.assert_array_equal(back.semantic_label, s.semantic_label)
    assert back.category_count == s.category_count
    assert scene_digest(back) == scene_digest(s)


@pytest.mark.parametrize("fmt", ["json", "binary"])
def test_round_trip_without_optional_channels(tmp_path, fmt):
    s = tiny_scene()
    s.colors = None
    s.normals = None
    path = tmp_path / "scene.dat"
    save_scene(s, path, fmt=fmt)
    back = load_scene(path)
    assert back.colors is None and back.normals is None


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"\x01\x02\x03\x04 not a scene")
    with pytest.raises(ValidationError):
        load_scene(path)


def test_load_rejects_wrong_version(tmp_path):
    s = tiny_scene()
    path = tmp_path / "scene.json"
    save_scene(s, path, fmt="json")
    import json

    doc = json.loads(path.read_text())
    doc["version"] = 9
    path.write_text(json.dumps(doc))
    with pytest.raises(ValidationError, match="version"):
        load_scene(path)


def test_load_rejects_truncated_binary(tmp_path):
    s = tiny_scene()
    path = tmp_path / "scene.bin"
    save_scene(s, path, fmt="binary")
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(ValidationError):
        load_scene(path)


def test_binary_and_json_agree(tmp_path):
    s = synth_scene(SynthConfig(scene_count=1, seed=4), 0)
    save_scene(s, tmp_path / "a.json", fmt="json")
    save_scene(s, tmp_path / "a.bin", fmt="binary")
    a, b = load_scene(tmp_path / "a.json"), load_scene(tmp_path / "a.bin")
    np.testing.assert_array_equal(a.positions, b.positions)
    assert scene_digest(a) == scene_digest(b)


# -- voxelize -------------------------------------------------------------------


def _two_point_scene(gap):
    return Scene(
        positions=np.array([[0.001, 0.001, 0.001], [0.001 + gap, 0.001, 0.001]]),
        superpoint_id=np.array([0, 0], dtype=np.int32),
        instance_id=np.array([-1, -1], dtype=np.int32),
        semantic_label=np.array([-1, -1], dtype=np.int32),
        category_count=1,
    )


def test_voxelize_keeps_distant_points():
    out = voxelize(_two_point_scene(1.0), 0.02)
    assert out.n_points == 2


def test_voxelize_merges_close_points():
    out = voxelize(_two_point_scene(0.001), 0.02)
    assert out.n_points == 1
    np.testing.assert_allclose(out.positions[0], [0.0015, 0.001, 0.001], atol=1e-12)


def test_voxelize_collapses_single_voxel():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.0005, 0.0195, size=(1000, 3))
    s = Scene(
        positions=pts,
        superpoint_id=np.zeros(1000, dtype=np.int32),
        instance_id=np.zeros(1000, dtype=np.int32),
        semantic_label=np.zeros(1000, dtype=np.int32),
        category_count=1,
    )
    out = voxelize(s, 0.02)
    assert out.n_points == 1
    np.testing.assert_allclose(out.positions[0], pts.mean(axis=0), atol=1e-12)


def test_voxelize_idempotent_point_count():
    s = synth_scene(SynthConfig(seed=1), 3)
    once = voxelize(s, 0.05)
    twice = voxelize(once, 0.05)
    assert once.n_points == twice.n_points


def test_voxelize_majority_labels():
    # three points in one voxel: two of instance 1, one of instance 0
    s = Scene(
        positions=np.array([[0.001, 0.0, 0.0], [0.002, 0.0, 0.0], [0.003, 0.0, 0.0], [5.0, 5.0, 5.0]]),
        superpoint_id=np.array([0, 1, 1, 2], dtype=np.int32),
        instance_id=np.array([0, 1, 1, 0], dtype=np.int32),
        semantic_label=np.array([0, 1, 1, 0], dtype=np.int32),
        category_count=2,
    )
    out = voxelize(s, 0.02)
    assert out.n_points == 2
    assert out.instance_id[0] == 1 and out.semantic_label[0] == 1
    assert out.superpoint_id.tolist() == [0, 1]  # re-indexed dense


def test_voxelize_tie_prefers_smaller_instance():
    s = Scene(
        positions=np.array([[0.001, 0.0, 0.0], [0.002, 0.0, 0.0]]),
        superpoint_id=np.array([0, 0], dtype=np.int32),
        instance_id=np.array([1, 0], dtype=np.int32),
        semantic_label=np.array([1, 0], dtype=np.int32),
        category_count=2,
    )
    out = voxelize(s, 0.02)
    assert out.n_points == 1
    assert out.instance_id[0] == 0 and out.semantic_label[0] == 0


def test_voxelize_rejects_bad_size():
    with pytest.raises(ValidationError, match="size"):
        voxelize(tiny_scene(), 0.0)


# -- synthetic scenes ------------------------------------------------------------


def test_synth_deterministic_under_seed_and_index():
    cfg = SynthConfig(seed=9)
    a = synth_scene(cfg, 5)
    b = synth_scene(cfg, 5)
    assert scene_digest(a) == scene_digest(b)
    c = synth_scene(cfg, 6)
    assert scene_digest(a) != scene_digest(c)
    d = synth_scene(SynthConfig(seed=10), 5)
    assert scene_digest(a) != scene_digest(d)


def test_synth_superpoint_count_by_construction():
    cfg = SynthConfig(boxes_min=3, boxes_max=3, superpoints_per_box=4, seed=2)
    s = synth_scene(cfg, 0)
    n_boxes = int(s.instance_id.max()) + 1
    assert n_boxes == 3
    bg_cells = len(np.unique(s.superpoint_id[s.instance_id == -1]))
    assert s.n_superpoints == 3 * 4 + bg_cells


def test_synth_scene_is_valid_and_desk_sized():
    cfg = SynthConfig(seed=0)
    for i in range(4):
        s = synth_scene(cfg, i)
        s.validate()
        assert s.n_points <= 3 * 150 + 100
        cats = np.unique(s.semantic_label[s.instance_id >= 0])
        per_inst = [np.unique(s.semantic_label[s.instance_id == i2]) for i2 in range(int(s.instance_id.max()) + 1)]
        assert len(cats) == len(per_inst)  # distinct category per instance


def test_synth_boxes_have_pure_superpoints():
    s = synth_scene(SynthConfig(seed=3), 1)
    for sp in range(s.n_superpoints):
        owners = np.unique(s.instance_id[s.superpoint_id == sp])
        assert len(owners) == 1


def test_synth_rejects_negative_index():
    with pytest.raises(ValidationError, match="index"):
        synth_scene(SynthConfig(), -1)


# -- summaries --------------------------------------------------------------------


def test_assignment_majority_vote():
    s = tiny_scene()
    assignment = superpoint_instance_assignment(s)
    assert assignment.tolist() == [0, 1, -1]


def test_assignment_tie_prefers_lower_instance():
    s = Scene(
        positions=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]),
        superpoint_id=np.array([0, 0, 0, 0], dtype=np.int32),
        instance_id=np.array([0, 0, 1, 1], dtype=np.int32),
        semantic_label=np.array([0, 0, 1, 1], dtype=np.int32),
        category_count=2,
    )
    assert superpoint_instance_assignment(s).tolist() == [0]


def test_summaries_center_is_member_mean():
    s = tiny_scene()
    summaries = instance_summaries(s)
    assert [x.instance_id for x in summaries] == [0, 1]
    np.testing.assert_allclose(summaries[0].center, [0.5, 0.0, 0.0])
    assert summaries[0].semantic_label == 2
    assert summaries[0].superpoints.tolist() == [0]
    assert summaries[0].point_count == 2


def test_summaries_empty_for_background_only():
    s = Scene(
        positions=np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]),
        superpoint_id=np.array([0, 1], dtype=np.int32),
        instance_id=np.array([-1, -1], dtype=np.int32),
        semantic_label=np.array([-1, -1], dtype=np.int32),
        category_count=1,
    )
    assert instance_summaries(s) == []


def test_majority_superpoint_example():
    # 3 points of instance 0 vs 2 of instance 1 in one superpoint
    s = Scene(
        positions=np.zeros((5, 3)) + np.arange(5)[:, None],
        superpoint_id=np.zeros(5, dtype=np.int32),
        instance_id=np.array([0, 0, 0, 1, 1], dtype=np.int32),
        semantic_label=np.array([0, 0, 0, 1, 1], dtype=np.int32),
        category_count=2,
    )
    assert superpoint_instance_assignment(s).tolist() == [0]
