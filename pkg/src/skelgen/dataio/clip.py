"""Core motion containers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from skelgen.skeleton import SkeletonTopology, rot6d_to_matrix


class StatsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MotionClip:
    """A motion sequence on one skeleton.

    ``root_pos`` is (F, 3) and ``joint_rot`` is (F, J, 6). Whether positions are
    in meters or in normalized space depends on the caller; clips loaded from
    disk are in meters.
    """

    topology: SkeletonTopology
    frame_rate: float
    root_pos: np.ndarray
    joint_rot: np.ndarray
    style_id: int = -1
    dataset_id: int = 0
    name: str = ""

    def __post_init__(self):
        rp = np.asarray(self.root_pos, dtype=np.float64)
        jr = np.asarray(self.joint_rot, dtype=np.float64)
        object.__setattr__(self, "root_pos", rp)
        object.__setattr__(self, "joint_rot", jr)
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        if rp.ndim != 2 or rp.shape[1] != 3:
            raise ValueError(f"root_pos must be (F, 3), got {rp.shape}")
        if jr.shape != (rp.shape[0], self.topology.num_joints, 6):
            raise ValueError(
                f"joint_rot shape {jr.shape} does not match ({rp.shape[0]}, "
                f"{self.topology.num_joints}, 6)"
            )

    @property
    def num_frames(self) -> int:
        return self.root_pos.shape[0]

    def validate(self) -> None:
        """Full check: at least two frames and decodable rotations."""
        if self.num_frames < 2:
            raise ValueError("a clip needs at least two frames")
        rot6d_to_matrix(self.joint_rot)

    def replace(self, **kw) -> "MotionClip":
        d = dict(
            topology=self.topology,
            frame_rate=self.frame_rate,
            root_pos=self.root_pos,
            joint_rot=self.joint_rot,
            style_id=self.style_id,
            dataset_id=self.dataset_id,
            name=self.name,
        )
        d.update(kw)
        return MotionClip(**d)


@dataclass(frozen=True)
class NormStats:
    """Per-axis min/max of root positions (meters) over a training split."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(hi <= lo):
            raise StatsError(f"degenerate normalization range: min={lo}, max={hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def identity(cls) -> "NormStats":
        """Stats for which normalization is the identity map."""
        return cls(-np.ones(3), np.ones(3))

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["min"]), np.asarray(d["max"]))


@dataclass(frozen=True)
class TrajectorySignal:
    """Ground-plane positions (F, 2) as (x, z) and root rotations (F, 6)."""

    positions: np.ndarray
    rotations: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        r = np.asarray(self.rotations, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 2 or r.shape != (p.shape[0], 6):
            raise ValueError(f"bad trajectory shapes {p.shape} / {r.shape}")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "rotations", r)

    def __len__(self):
        return self.positions.shape[0]

    def slice(self, start: int, stop: int) -> "TrajectorySignal":
        return TrajectorySignal(self.positions[start:stop], self.rotations[start:stop])


@dataclass(frozen=True)
class MotionWindow:
    """One training sample. Root positions are normalized."""

    past_root: np.ndarray  # (F', 3)
    past_rot: np.ndarray  # (F', J, 6)
    cur_root: np.ndarray  # (F, 3)
    cur_rot: np.ndarray  # (F, J, 6)
    trajectory: TrajectorySignal
    style_id: int
    contact: np.ndarray  # (F, n_toes) bool
    start: int = 0
    clip_index: int = -1
    extra: dict = field(default_factory=dict)
