"""Skeleton topology, ancestor masks, 6D rotations and forward kinematics.

Rotation matrices follow the column-vector convention: a point ``p`` is
rotated as ``R @ p``. A 6D rotation stores the first two columns of ``R``
(column 0 then column 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class TopologyError(ValueError):
    """Raised for malformed joint hierarchies."""


class SkeletonConfigError(ValueError):
    """Raised when a skeleton is configured with unknown joint names."""


class DegenerateRotationError(ValueError):
    """Raised when a 6D vector cannot be decoded into a rotation."""


class RotationValidationError(ValueError):
    """Raised when a matrix is not a proper rotation."""


_DEGENERATE_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class SkeletonTopology:
    joint_names: tuple[str, ...]
    parent_index: tuple[int, ...]
    rest_offsets: np.ndarray
    toe_joint_ids: tuple[int, ...] = ()
    _depth: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        offsets = np.array(self.rest_offsets, dtype=np.float64).reshape(-1, 3)
        offsets.setflags(write=False)
        object.__setattr__(self, "rest_offsets", offsets)
        _validate(self.joint_names, self.parent_index, offsets, self.toe_joint_ids)
        depth = []
        for p in self.parent_index:
            depth.append(0 if p < 0 else depth[p] + 1)
        object.__setattr__(self, "_depth", tuple(depth))

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def depth(self) -> tuple[int, ...]:
        """Topological depth of each joint (root = 0)."""
        return self._depth

    def children(self, j: int) -> list[int]:
        return [k for k, p in enumerate(self.parent_index) if p == j]

    def is_leaf(self, j: int) -> bool:
        return j not in self.parent_index

    def signature(self) -> tuple:
        """Hashable description of the hierarchy (names and parents only)."""
        return (self.joint_names, self.parent_index)

    def __eq__(self, other):
        if not isinstance(other, SkeletonTopology):
            return NotImplemented
        return (
            self.signature() == other.signature()
            and self.toe_joint_ids == other.toe_joint_ids
            and np.array_equal(self.rest_offsets, other.rest_offsets)
        )

    def __hash__(self):
        return hash((self.signature(), self.toe_joint_ids, self.rest_offsets.tobytes()))

    def to_dict(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "parent_index": list(self.parent_index),
            "rest_offsets": self.rest_offsets.tolist(),
            "toe_joint_ids": list(self.toe_joint_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonTopology":
        return cls(
            tuple(d["joint_names"]),
            tuple(int(p) for p in d["parent_index"]),
            np.asarray(d["rest_offsets"], dtype=np.float64),
            tuple(int(t) for t in d.get("toe_joint_ids", ())),
        )

    def with_toes(self, toe_ids: Sequence[int]) -> "SkeletonTopology":
        return SkeletonTopology(self.joint_names, self.parent_index, self.rest_offsets, tuple(toe_ids))


def _validate(names, parents, offsets, toes):
    n = len(names)
    if n < 1:
        raise TopologyError("a skeleton needs at least one joint")
    if len(parents) != n or offsets.shape[0] != n:
        raise TopologyError(
            f"length mismatch: {n} names, {len(parents)} parents, {offsets.shape[0]} offsets"
        )
    if len(set(names)) != n:
        raise TopologyError("joint names must be unique")
    if parents[0] != -1:
        raise TopologyError("joint 0 must be the root (parent -1)")
    for j in range(1, n):
        p = parents[j]
        if p == -1:
            raise TopologyError(f"joint {j} ({names[j]!r}) is a second root")
        if not 0 <= p < j:
            raise TopologyError(
                f"joint {j} ({names[j]!r}) references parent {p}; parents must precede children"
            )
    for t in toes:
        if not 0 <= t < n:
            raise TopologyError(f"toe joint index {t} out of range")
        if t in parents:
            raise TopologyError(f"toe joint {names[t]!r} is not a leaf")


def build_topology(
    names: Sequence[str],
    parents: Sequence[int],
    offsets,
    toe_names: Sequence[str] = (),
) -> SkeletonTopology:
    """Validate a joint hierarchy and resolve toe joints by exact name."""
    names = tuple(str(n) for n in names)
    parents = tuple(int(p) for p in parents)
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.ndim != 2 or offsets.shape[1] != 3:
        raise TopologyError(f"offsets must be (J, 3), got {offsets.shape}")
    lookup = {n: i for i, n in enumerate(names)}
    toe_ids = []
    for t in toe_names:
        if t not in lookup:
            raise SkeletonConfigError(f"unknown toe joint name {t!r}")
        toe_ids.append(lookup[t])
    return SkeletonTopology(names, parents, offsets, tuple(toe_ids))


def ancestors(topology: SkeletonTopology, j: int) -> set[int]:
    """Strict ancestors of joint ``j``."""
    if not 0 <= j < topology.num_joints:
        raise IndexError(f"joint index {j} out of range for {topology.num_joints} joints")
    out = set()
    p = topology.parent_index[j]
    while p >= 0:
        out.add(p)
        p = topology.parent_index[p]
    return out


def build_ancestor_mask(topology: SkeletonTopology) -> np.ndarray:
    """Boolean (J+1, J+1) attention mask over (root-position token, joints...).

    Entry ``[q, k]`` is True when query token ``q`` may attend to key token
    ``k``. Joint tokens see themselves, their ancestors and the root-position
    token; the root-position token sees itself and the root joint.
    """
    n = topology.num_joints
    mask = np.zeros((n + 1, n + 1), dtype=bool)
    mask[0, 0] = True
    mask[0, 1] = True
    for j in range(n):
        q = j + 1
        mask[q, 0] = True
        mask[q, q] = True
        for a in ancestors(topology, j):
            mask[q, a + 1] = True
    return mask


# --- 6D rotations -----------------------------------------------------------


def rot6d_to_matrix(v) -> np.ndarray:
    """Decode 6D rotations (..., 6) into rotation matrices (..., 3, 3) via Gram-Schmidt."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 6:
        raise ValueError(f"expected trailing dimension 6, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DegenerateRotationError("non-finite 6D rotation")
    a, b = v[..., :3], v[..., 3:]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < _DEGENERATE_EPS):
        raise DegenerateRotationError("first 6D column is (near) zero")
    c1 = a / na
    b_perp = b - np.sum(c1 * b, axis=-1, keepdims=True) * c1
    nb = np.linalg.norm(b_perp, axis=-1, keepdims=True)
    if np.any(nb < _DEGENERATE_EPS * np.maximum(1.0, np.linalg.norm(b, axis=-1, keepdims=True))):
        raise DegenerateRotationError("second 6D column is parallel to the first")
    c2 = b_perp / nb
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=-1)


def matrix_to_rot6d(R, atol: float = 1e-4) -> np.ndarray:
    """Encode rotation matrices (..., 3, 3) as their first two columns (..., 6)."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise RotationValidationError(f"expected (..., 3, 3), got {R.shape}")
    eye = np.eye(3)
    if not np.all(np.isfinite(R)):
        raise RotationValidationError("non-finite matrix")
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max(initial=0.0)
    if ortho > atol or np.any(np.abs(np.linalg.det(R) - 1.0) > atol):
        raise RotationValidationError("matrix is not a proper rotation")
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rot_y(theta) -> np.ndarray:
    """Rotation(s) about the vertical +Y axis by ``theta`` radians."""
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(theta), np.ones_like(theta)
    return np.stack(
        [np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2
    )


def rot_z(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(theta), np.ones_like(theta)
    return np.stack(
        [np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2
    )


IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


# --- forward kinematics ------------------------------------------------------


def forward_kinematics_matrices(topology: SkeletonTopology, root_pos, local_rot):
    """FK from local rotation matrices.

    Args:
        root_pos: (F, 3) root positions.
        local_rot: (F, J, 3, 3) local rotation matrices.

    Returns:
        Global positions (F, J, 3) and global rotations (F, J, 3, 3).
    """
    root_pos = np.asarray(root_pos, dtype=np.float64)
    local_rot = np.asarray(local_rot, dtype=np.float64)
    n = topology.num_joints
    if root_pos.ndim != 2 or root_pos.shape[1] != 3:
        raise ValueError(f"root_pos must be (F, 3), got {root_pos.shape}")
    if local_rot.shape != (root_pos.shape[0], n, 3, 3):
        raise ValueError(
            f"rotations shape {local_rot.shape} does not match ({root_pos.shape[0]}, {n}, 3, 3)"
        )
    pos = np.empty((root_pos.shape[0], n, 3))
    rot = np.empty_like(local_rot)
    offsets = topology.rest_offsets
    for j, p in enumerate(topology.parent_index):
        if p < 0:
            pos[:, j] = root_pos
            rot[:, j] = local_rot[:, j]
        else:
            pos[:, j] = pos[:, p] + np.einsum("fab,b->fa", rot[:, p], offsets[j])
            rot[:, j] = rot[:, p] @ local_rot[:, j]
    return pos, rot


def forward_kinematics(topology: SkeletonTopology, root_pos, joint_rot) -> np.ndarray:
    """Global joint positions (F, J, 3) from root positions (F, 3) and 6D rotations (F, J, 6)."""
    joint_rot = np.asarray(joint_rot, dtype=np.float64)
    if joint_rot.ndim != 3 or joint_rot.shape[-1] != 6:
        raise ValueError(f"joint_rot must be (F, J, 6), got {joint_rot.shape}")
    pos, _ = forward_kinematics_matrices(topology, root_pos, rot6d_to_matrix(joint_rot))
    return pos
