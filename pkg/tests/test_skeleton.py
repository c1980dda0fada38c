import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from conftest import chain, random_rotations, random_tree, recursive_fk, star
from skelgen.skeleton import (
    DegenerateRotationError,
    RotationValidationError,
    SkeletonConfigError,
    SkeletonTopology,
    TopologyError,
    ancestors,
    build_ancestor_mask,
    build_topology,
    forward_kinematics,
    forward_kinematics_matrices,
    matrix_to_rot6d,
    rot6d_to_matrix,
    rot_y,
)


# --- topology ---------------------------------------------------------------------------


def test_chain_depths_and_ancestors():
    t = chain(3)
    assert t.depth == (0, 1, 2)
    assert ancestors(t, 2) == {0, 1}
    assert ancestors(t, 0) == set()


def test_single_joint_mask_has_root_token_and_joint():
    t = build_topology(["hips"], [-1], [[0, 0, 0]])
    m = build_ancestor_mask(t)
    assert m.shape == (2, 2)
    assert m.all()


def test_mask_chain_is_lower_triangular_on_joint_block():
    m = build_ancestor_mask(chain(4))
    assert np.array_equal(m[1:, 1:], np.tril(np.ones((4, 4), bool)))
    assert m[:, 0].all()
    assert np.array_equal(m[0], [True, True, False, False, False])


def test_mask_star_leaves_do_not_see_each_other():
    m = build_ancestor_mask(star(5))
    for a in range(2, 6):
        for b in range(2, 6):
            assert m[a, b] == (a == b)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000))
def test_mask_matches_ancestor_sets(n, seed):
    t = random_tree(np.random.default_rng(seed), n)
    m = build_ancestor_mask(t)
    for j in range(n):
        allowed = {0, j + 1} | {a + 1 for a in ancestors(t, j)}
        assert set(np.flatnonzero(m[j + 1])) == allowed


def test_cycle_and_forward_reference_rejected():
    with pytest.raises(TopologyError):
        build_topology(["a", "b"], [-1, 1], np.zeros((2, 3)))
    with pytest.raises(TopologyError):
        build_topology(["a", "b", "c"], [-1, 2, 0], np.zeros((3, 3)))
    with pytest.raises(TopologyError):
        build_topology(["a", "b"], [-1, -1], np.zeros((2, 3)))


def test_unknown_toe_rejected():
    with pytest.raises(SkeletonConfigError):
        build_topology(["a", "b"], [-1, 0], np.zeros((2, 3)), toe_names=["toe"])


def test_topology_dict_round_trip(rng):
    t = random_tree(rng, 6)
    assert SkeletonTopology.from_dict(t.to_dict()) == t


# --- 6D rotations -------------------------------------------------------------------------


def test_identity_6d():
    assert np.allclose(matrix_to_rot6d(np.eye(3)), [1, 0, 0, 0, 1, 0])
    assert np.allclose(rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3))


def test_six_d_round_trip_against_axis_angle(rng):
    rv = rng.normal(size=(1000, 3))
    R = Rotation.from_rotvec(rv).as_matrix()
    back = rot6d_to_matrix(matrix_to_rot6d(R))
    assert np.abs(back - R).max() < 1e-6
    assert np.allclose(Rotation.from_matrix(back).as_rotvec(), Rotation.from_matrix(R).as_rotvec(), atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6))
def test_decoded_matrix_is_a_rotation(v):
    v = np.asarray(v)
    try:
        R = rot6d_to_matrix(v)
    except DegenerateRotationError:
        return
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.isclose(np.linalg.det(R), 1.0)


def test_gram_schmidt_scale_invariance():
    v = np.array([2.0, 0, 0, 0.5, 3.0, 0])
    assert np.allclose(rot6d_to_matrix(v), np.eye(3))


def test_degenerate_6d_rejected():
    with pytest.raises(DegenerateRotationError):
        rot6d_to_matrix(np.zeros(6))
    with pytest.raises(DegenerateRotationError):
        rot6d_to_matrix([1, 0, 0, 2, 0, 0])


def test_non_rotation_rejected():
    with pytest.raises(RotationValidationError):
        matrix_to_rot6d(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(RotationValidationError):
        matrix_to_rot6d(2 * np.eye(3))


# --- forward kinematics ---------------------------------------------------------------


def test_fk_rest_pose_is_cumulative_offsets():
    t = chain(3)
    pos = forward_kinematics(t, np.zeros((1, 3)), np.tile([1.0, 0, 0, 0, 1, 0], (1, 3, 1)))
    assert np.allclose(pos[0], [[0, 0, 0], [0, -0.3, 0], [0, -0.6, 0]])


def test_fk_root_yaw_rotates_child():
    t = build_topology(["a", "b"], [-1, 0], [[0, 0, 0], [0, 0, 1]])
    R = np.stack([rot_y(np.pi / 2), np.eye(3)])[None]
    pos, _ = forward_kinematics_matrices(t, np.zeros((1, 3)), R)
    assert np.allclose(pos[0, 1], [1, 0, 0])


def test_fk_matches_recursive_oracle_on_random_trees(rng):
    for _ in range(20):
        t = random_tree(rng, 8)
        R = random_rotations(rng, (5, 8))
        root = rng.normal(size=(5, 3))
        got = forward_kinematics(t, root, matrix_to_rot6d(R))
        assert np.abs(got - recursive_fk(t, root, R)).max() < 1e-6


def test_fk_translation_equivariance(rng):
    t = random_tree(rng, 6)
    R6 = matrix_to_rot6d(random_rotations(rng, (3, 6)))
    root = rng.normal(size=(3, 3))
    d = np.array([1.0, -2.0, 0.5])
    assert np.allclose(forward_kinematics(t, root + d, R6), forward_kinematics(t, root, R6) + d)
