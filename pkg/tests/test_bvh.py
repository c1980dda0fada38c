import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import random_rotations, random_tree
from skelgen.dataio.bvh import BVHExportError, BVHParseError, is_dfs_ordered, parse_bvh, write_bvh
from skelgen.dataio.clip import MotionClip
from skelgen.skeleton import SkeletonConfigError, build_topology, forward_kinematics, matrix_to_rot6d, rot6d_to_matrix

HAND_BVH = """HIERARCHY
ROOT Hips
{
  OFFSET 0.0 0.0 0.0
  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
  JOINT Knee
  {
    OFFSET 0.0 -40.0 0.0
    CHANNELS 3 Zrotation Xrotation Yrotation
    End Site
    {
      OFFSET 0.0 -45.0 10.0
    }
  }
}
MOTION
Frames: 2
Frame Time: 0.0333333
1.0 90.0 2.0 0.0 0.0 0.0 0.0 0.0 0.0
3.0 91.0 4.0 90.0 0.0 0.0 0.0 0.0 0.0
"""


def test_hand_fixture():
    topo, clip = parse_bvh(HAND_BVH, scale=0.01, toe_names=["Knee_End"])
    assert topo.joint_names == ("Hips", "Knee", "Knee_End")
    assert topo.parent_index == (-1, 0, 1)
    assert topo.toe_joint_ids == (2,)
    assert np.allclose(topo.rest_offsets[2], [0, -0.45, 0.1])
    assert np.isclose(clip.frame_rate, 1 / 0.0333333)
    assert np.allclose(clip.root_pos, [[0.01, 0.9, 0.02], [0.03, 0.91, 0.04]])
    pos = forward_kinematics(topo, clip.root_pos, clip.joint_rot)
    # frame 0 at rest: knee straight below the hips
    assert np.allclose(pos[0, 1], [0.01, 0.5, 0.02])
    # frame 1: hips rolled +90 deg about z, so the knee offset (0, -0.4, 0) maps to (+0.4, 0, 0)
    assert np.allclose(pos[1, 1], [0.43, 0.91, 0.04])


def test_euler_channel_order_matches_intrinsic_rotation():
    angles = [30.0, -20.0, 45.0]
    text = f"""HIERARCHY
ROOT r
{{
  OFFSET 0 0 0
  CHANNELS 3 Yrotation Xrotation Zrotation
}}
MOTION
Frames: 1
Frame Time: 0.1
{angles[0]} {angles[1]} {angles[2]}
"""
    _, clip = parse_bvh(text)
    expected = Rotation.from_euler("YXZ", angles, degrees=True).as_matrix()
    assert np.allclose(rot6d_to_matrix(clip.joint_rot[0, 0]), expected)


def test_zero_channel_single_joint():
    text = "HIERARCHY\nROOT a\n{\n OFFSET 0 0 0\n}\nMOTION\nFrames: 2\nFrame Time: 0.5\n\n\n"
    topo, clip = parse_bvh(text)
    assert topo.num_joints == 1
    assert clip.num_frames == 2
    assert np.all(clip.root_pos == 0)
    assert np.allclose(clip.joint_rot, [1, 0, 0, 0, 1, 0])


@pytest.mark.parametrize(
    "bad, line",
    [
        (HAND_BVH.replace("Frames: 2", "Frames: 3"), None),
        (HAND_BVH.replace("CHANNELS 3 Zrotation", "CHANNELS 4 Zrotation"), 9),
        (HAND_BVH.replace("OFFSET 0.0 -40.0 0.0", "OFFSET 0.0 x 0.0"), 8),
        (HAND_BVH.replace("ROOT Hips", "JOINT Hips"), 2),
    ],
)
def test_malformed_reports_line(bad, line):
    with pytest.raises(BVHParseError) as err:
        parse_bvh(bad)
    if line is not None:
        assert err.value.line == line


def test_unknown_toe_name():
    with pytest.raises(SkeletonConfigError):
        parse_bvh(HAND_BVH, toe_names=["LeftToe"])


def test_writer_identity_clip_has_zero_rotations():
    topo = build_topology(["a", "b", "c"], [-1, 0, 1], [[0, 0, 0], [0, 1, 0], [0, 1, 0]])
    clip = MotionClip(topo, 30.0, np.tile([1.0, 2.0, 3.0], (2, 1)), np.tile([1.0, 0, 0, 0, 1, 0], (2, 3, 1)))
    text = write_bvh(topo, clip).decode()
    rows = text.split("Frame Time:")[1].splitlines()[1:]
    vals = [list(map(float, r.split())) for r in rows]
    assert vals[0][:3] == [1.0, 2.0, 3.0]
    assert all(v == 0.0 for v in vals[0][3:])
    assert "-0.000000" not in text


def test_round_trip_preserves_fk(rng):
    for _ in range(5):
        topo = random_tree(rng, 5, toe_last=False)
        if not is_dfs_ordered(topo):
            continue
        n_frames = 7
        R = random_rotations(rng, (n_frames, 5))
        leaves = [j for j in range(5) if topo.is_leaf(j)]
        R[:, leaves] = np.eye(3)  # End Sites carry no rotation
        clip = MotionClip(topo, 60.0, rng.normal(size=(n_frames, 3)), matrix_to_rot6d(R))
        t2, c2 = parse_bvh(write_bvh(topo, clip))
        assert t2.parent_index == topo.parent_index
        p1 = forward_kinematics(topo, clip.root_pos, clip.joint_rot)
        p2 = forward_kinematics(t2, c2.root_pos, c2.joint_rot)
        assert np.abs(p1 - p2).max() < 1e-4
        assert np.isclose(c2.frame_rate, 60.0, rtol=1e-6)


def test_writer_rejects_empty_and_non_finite(rng):
    topo = build_topology(["a", "b"], [-1, 0], [[0, 0, 0], [0, 1, 0]])
    empty = MotionClip(topo, 30.0, np.zeros((0, 3)), np.zeros((0, 2, 6)))
    with pytest.raises(BVHExportError):
        write_bvh(topo, empty)
    bad = MotionClip(topo, 30.0, np.full((1, 3), np.nan), np.tile([1.0, 0, 0, 0, 1, 0], (1, 2, 1)))
    with pytest.raises(BVHExportError):
        write_bvh(topo, bad)


def test_writer_is_deterministic(rng):
    topo = random_tree(rng, 4, toe_last=False)
    clip = MotionClip(topo, 30.0, rng.normal(size=(3, 3)), matrix_to_rot6d(random_rotations(rng, (3, 4))))
    if is_dfs_ordered(topo):
        assert write_bvh(topo, clip) == write_bvh(topo, clip)
