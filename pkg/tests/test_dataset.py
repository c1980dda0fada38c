import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain, random_clip
from skelgen.dataio import (
    ManifestError,
    MotionClip,
    NormStats,
    StatsError,
    augment_trajectory,
    balance_styles,
    build_style_table,
    compute_norm_stats,
    denormalize_root,
    extract_trajectory,
    label_foot_contacts,
    make_windows,
    normalize_root,
    read_manifest,
    stratified_split,
)
from skelgen.dataio.dataset import LabelingError, ManifestRecord, detect_toes, rotate_ground, trajectory_from_yaw
from skelgen.skeleton import build_topology, rot6d_to_matrix, rot_y


def clip_with_root(root, topo=None):
    topo = topo or build_topology(["r"], [-1], [[0, 0, 0]])
    root = np.asarray(root, float)
    return MotionClip(topo, 30.0, root, np.tile([1.0, 0, 0, 0, 1, 0], (len(root), topo.num_joints, 1)))


# --- normalization ----------------------------------------------------------------------


def test_stats_reproduce_reported_x_range():
    root = np.array([[-3.52, 0.77, -2.91], [3.63, 1.21, 4.01]])
    s = compute_norm_stats([clip_with_root(root)])
    assert np.allclose(s.min, [-3.52, 0.77, -2.91])
    assert np.allclose(s.max, [3.63, 1.21, 4.01])
    assert np.allclose(normalize_root(root, s), [[-1, -1, -1], [1, 1, 1]])


def test_stats_union_over_clips():
    a = clip_with_root([[0, 0.5, 0], [1, 0.5, 1]])
    b = clip_with_root([[0, 0, 0], [1, 1, 1]])
    s = compute_norm_stats([a, b])
    assert s.min[1] == 0.0 and s.max[1] == 1.0


def test_validation_values_may_leave_unit_range():
    s = compute_norm_stats([clip_with_root([[0, 0, 0], [1, 1, 1]])])
    assert normalize_root([2.0, 0.5, -1.0], s)[0] == 3.0


def test_stats_errors():
    with pytest.raises(StatsError):
        compute_norm_stats([])
    with pytest.raises(StatsError):
        compute_norm_stats([clip_with_root([[0, 1, 0], [1, 1, 1]])])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.integers(0, 1000))
def test_normalize_round_trip(p, seed):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-5, 0, 3)
    s = NormStats(lo, lo + rng.uniform(0.1, 5, 3))
    assert np.allclose(denormalize_root(normalize_root(p, s), s), p, atol=1e-9)


# --- trajectories --------------------------------------------------------------------------


def test_trajectory_of_stationary_clip_is_constant(rng):
    c = clip_with_root(np.tile([1.0, 0.9, 2.0], (6, 1)))
    t = extract_trajectory(c)
    assert np.allclose(t.positions, [1.0, 2.0])


def test_trajectory_rotation_is_root_rotation(rng):
    c = random_clip(rng, chain(3), 8)
    t = extract_trajectory(c, 2, 6)
    assert np.allclose(rot6d_to_matrix(t.rotations), rot6d_to_matrix(c.joint_rot[2:6, 0]))
    with pytest.raises(IndexError):
        extract_trajectory(c, 4, 20)


def test_trajectory_from_yaw():
    t = trajectory_from_yaw([0, 1], [0, 0], [0, 90])
    assert np.allclose(rot6d_to_matrix(t.rotations[1]), rot_y(np.pi / 2))


# --- contacts ----------------------------------------------------------------------------


def toe_clip(heights, xs):
    topo = build_topology(["root", "toe"], [-1, 0], [[0, 0, 0], [0, -1, 0]], toe_names=["toe"])
    root = np.stack([np.asarray(xs, float), np.asarray(heights, float) + 1, np.zeros(len(xs))], -1)
    return MotionClip(topo, 30.0, root, np.tile([1.0, 0, 0, 0, 1, 0], (len(xs), 2, 1)))


def test_contact_requires_low_and_slow():
    still = label_foot_contacts(toe_clip([0.01, 0.01, 0.01], [0, 0, 0]))
    assert still[:, 0].all()
    moving = label_foot_contacts(toe_clip([0.01, 0.01, 0.01], [0, 0.1, 0.2]))
    assert not moving.any()
    high = label_foot_contacts(toe_clip([0.2, 0.2, 0.2], [0, 0, 0]))
    assert not high.any()


def test_contact_matches_brute_force_scan(rng):
    h = rng.uniform(0, 0.1, 30)
    x = np.cumsum(rng.uniform(0, 0.02, 30))
    got = label_foot_contacts(toe_clip(h, x))[:, 0]
    for f in range(30):
        g = max(f, 1)
        speed = abs(x[g] - x[g - 1]) if g > 0 else 0.0
        speed = np.hypot(speed, h[g] - h[g - 1])
        assert got[f] == (h[f] < 0.05 and speed < 0.01)


def test_contact_without_toes_errors():
    topo = build_topology(["a", "b"], [-1, 0], [[0, 0, 0], [0, -1, 0]])
    with pytest.raises(LabelingError):
        label_foot_contacts(clip_with_root(np.zeros((3, 3)), topo))


def test_detect_toes_by_name():
    topo = build_topology(["hips", "LeftFoot", "LeftToe", "RightFoot", "RightToe_End"], [-1, 0, 1, 0, 3],
                          np.zeros((5, 3)))
    assert detect_toes(topo) == (2, 4)


# --- windows ----------------------------------------------------------------------------


def test_window_count_and_alignment(rng):
    topo = build_topology(["a", "t"], [-1, 0], [[0, 0, 0], [0, -1, 0]], toe_names=["t"])
    c = random_clip(rng, topo, 30)
    ws = make_windows(c, F=8, F_past=4, stride=3)
    assert len(ws) == (30 - 12) // 3 + 1
    for w in ws:
        assert np.array_equal(w.cur_root[0], c.root_pos[w.start + 4])
        assert np.array_equal(w.past_root, c.root_pos[w.start:w.start + 4])
        assert w.contact.shape == (8, 1)
    assert make_windows(c.replace(root_pos=c.root_pos[:5], joint_rot=c.joint_rot[:5]), 8, 4, 1) == []


def test_balance_styles_equalizes_mass():
    w = balance_styles([0, 0, 0, 1])
    assert np.isclose(w[:3].sum(), w[3])


# --- augmentation ---------------------------------------------------------------------------


def test_augment_off_is_identity(rng):
    t = trajectory_from_yaw(np.linspace(0, 1, 10), np.zeros(10), np.zeros(10))
    out = augment_trajectory(t, rng, 0.0, 0.0)
    assert np.array_equal(out.positions, t.positions)


def test_rotation_preserves_path_length_and_heading_offset(rng):
    t = trajectory_from_yaw(np.linspace(0, 1, 10), np.linspace(0, 2, 10), np.full(10, 30.0))
    p, r = rotate_ground(t.positions, t.rotations, 0.7)
    assert np.allclose(np.linalg.norm(np.diff(p, axis=0), axis=1), np.linalg.norm(np.diff(t.positions, axis=0), axis=1))
    assert np.allclose(rot6d_to_matrix(r), rot_y(0.7 + np.deg2rad(30.0)))


def test_smoothing_reduces_roughness():
    rng = np.random.default_rng(0)
    t = trajectory_from_yaw(rng.normal(size=40), rng.normal(size=40), np.zeros(40))
    s = augment_trajectory(t, rng, p_smooth=1.0, p_rotate=0.0)
    assert np.abs(np.diff(s.positions, 2, axis=0)).mean() < np.abs(np.diff(t.positions, 2, axis=0)).mean()


# --- splits and manifests --------------------------------------------------------------


def test_twenty_clips_two_styles_split_15_3_2():
    labels = ["a"] * 10 + ["b"] * 10
    s = stratified_split(labels, seed=0)
    c = Counter(s)
    assert (c["train"], c["val"], c["test"]) == (15, 3, 2)
    for name in ("train", "val", "test"):
        assert {l for l, x in zip(labels, s) if x == name} == {"a", "b"}
    assert stratified_split(labels, seed=0) == s


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from("abc"), min_size=1, max_size=60), st.integers(0, 100))
def test_split_sizes_follow_fractions(labels, seed):
    s = stratified_split(labels, seed=seed)
    n = len(labels)
    c = Counter(s)
    assert sum(c.values()) == n
    for name, frac in zip(("train", "val", "test"), (0.75, 0.15, 0.10)):
        assert abs(c[name] - frac * n) < 1.0 + 1e-9


def test_manifest(tmp_path):
    m = tmp_path / "m.jsonl"
    m.write_text(
        json.dumps({"path": "x/a.bvh", "style_name": "run", "dataset_name": "d1"}) + "\n\n"
        + json.dumps({"path": "b.bvh", "style_name": "walk", "dataset_name": "d0", "split": "test"}) + "\n"
    )
    recs = read_manifest(m)
    assert recs[0].path == str(tmp_path / "x/a.bvh")
    assert recs[1].split == "test"
    assert build_style_table(recs) == ["d0:walk", "d1:run"]
    (tmp_path / "e.jsonl").write_text("\n")
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "e.jsonl")
    (tmp_path / "bad.jsonl").write_text('{"path": "a"}\n')
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "bad.jsonl")


def test_style_table_offsets_per_dataset():
    recs = [ManifestRecord("p", s, d) for d, s in [("b", "x"), ("a", "y"), ("a", "x"), ("b", "x")]]
    assert build_style_table(recs) == ["a:x", "a:y", "b:x"]
