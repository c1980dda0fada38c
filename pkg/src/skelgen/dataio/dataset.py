"""Normalization, trajectories, contacts, windowing, balancing and augmentation."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from skelgen.dataio.clip import MotionClip, MotionWindow, NormStats, StatsError, TrajectorySignal
from skelgen.skeleton import (
    SkeletonTopology,
    forward_kinematics,
    matrix_to_rot6d,
    rot6d_to_matrix,
    rot_y,
)

CONTACT_HEIGHT = 0.05
CONTACT_SPEED = 0.01


class LabelingError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# --- normalization -----------------------------------------------------------


def compute_norm_stats(clips: Sequence[MotionClip]) -> NormStats:
    if not clips:
        raise StatsError("need at least one clip")
    allp = np.concatenate([c.root_pos for c in clips], axis=0)
    return NormStats(allp.min(axis=0), allp.max(axis=0))


def normalize_root(p, stats: NormStats):
    p = np.asarray(p, dtype=np.float64)
    return 2.0 * (p - stats.min) / (stats.max - stats.min) - 1.0


def denormalize_root(p_hat, stats: NormStats):
    p_hat = np.asarray(p_hat, dtype=np.float64)
    return (p_hat + 1.0) * 0.5 * (stats.max - stats.min) + stats.min


def normalize_clip(clip: MotionClip, stats: NormStats) -> MotionClip:
    return clip.replace(root_pos=normalize_root(clip.root_pos, stats))


def denormalize_clip(clip: MotionClip, stats: NormStats) -> MotionClip:
    return clip.replace(root_pos=denormalize_root(clip.root_pos, stats))


# --- trajectories and contacts ----------------------------------------------


def extract_trajectory(clip: MotionClip, start: int = 0, stop: int | None = None) -> TrajectorySignal:
    """Ground-plane root path and root rotations over ``[start, stop)``.

    Works in whatever space the clip's root positions are in.
    """
    stop = clip.num_frames if stop is None else stop
    if not 0 <= start < stop <= clip.num_frames:
        raise IndexError(f"span [{start}, {stop}) outside clip of {clip.num_frames} frames")
    return TrajectorySignal(
        clip.root_pos[start:stop][:, [0, 2]], clip.joint_rot[start:stop, 0]
    )


def trajectory_from_yaw(x, z, yaw_deg) -> TrajectorySignal:
    """Trajectory from a ground path (meters) and heading angles (degrees)."""
    pos = np.stack([np.asarray(x, float), np.asarray(z, float)], axis=-1)
    rot = matrix_to_rot6d(rot_y(np.deg2rad(np.asarray(yaw_deg, float))))
    return TrajectorySignal(pos, rot)


def label_foot_contacts(
    clip: MotionClip,
    topology: SkeletonTopology | None = None,
    height: float = CONTACT_HEIGHT,
    speed: float = CONTACT_SPEED,
) -> np.ndarray:
    """(F, n_toes) contact flags: toe below ``height`` and moving slower than ``speed`` m/frame.

    The clip must be in meters. The first frame reuses the speed of the second.
    """
    topology = topology or clip.topology
    if not topology.toe_joint_ids:
        raise LabelingError("no toe joints configured for this skeleton")
    pos = forward_kinematics(topology, clip.root_pos, clip.joint_rot)[:, list(topology.toe_joint_ids)]
    vel = np.zeros(pos.shape[:2])
    if clip.num_frames > 1:
        vel[1:] = np.linalg.norm(np.diff(pos, axis=0), axis=-1)
        vel[0] = vel[1]
    return (pos[..., 1] < height) & (vel < speed)


def detect_toes(topology: SkeletonTopology) -> tuple[int, ...]:
    """Guess toe joints: leaves whose name (or parent's) mentions a toe, else a foot."""
    names = [n.lower() for n in topology.joint_names]
    leaves = [j for j in range(topology.num_joints) if topology.is_leaf(j) and j > 0]
    for key in ("toe", "foot"):
        hits = [
            j
            for j in leaves
            if key in names[j] or key in names[topology.parent_index[j]]
        ]
        if hits:
            return tuple(hits)
    return ()


# --- windows -----------------------------------------------------------------


def make_windows(
    clip: MotionClip,
    F: int,
    F_past: int,
    stride: int,
    stats: NormStats | None = None,
    contacts: np.ndarray | None = None,
    clip_index: int = -1,
) -> list[MotionWindow]:
    """Slide a (F_past + F)-frame window over a clip in meters.

    Root positions are normalized with ``stats`` (identity when None). Contacts
    are labeled from the clip unless given.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    total = F + F_past
    if clip.num_frames < total:
        return []
    if contacts is None:
        contacts = label_foot_contacts(clip)
    root = normalize_root(clip.root_pos, stats) if stats is not None else clip.root_pos
    norm = clip.replace(root_pos=root)
    out = []
    for s in range(0, clip.num_frames - total + 1, stride):
        c = s + F_past
        out.append(
            MotionWindow(
                past_root=root[s:c],
                past_rot=clip.joint_rot[s:c],
                cur_root=root[c : c + F],
                cur_rot=clip.joint_rot[c : c + F],
                trajectory=extract_trajectory(norm, c, c + F),
                style_id=clip.style_id,
                contact=contacts[c : c + F],
                start=s,
                clip_index=clip_index,
            )
        )
    return out


def window_starts(n_frames: int, F: int, F_past: int, stride: int) -> np.ndarray:
    return np.arange(0, max(n_frames - (F + F_past) + 1, 0), stride)


def balance_styles(style_ids: Sequence[int]) -> np.ndarray:
    """Sampling weights proportional to the inverse frequency of each sample's style."""
    style_ids = [w.style_id if isinstance(w, MotionWindow) else int(w) for w in style_ids]
    if not style_ids:
        raise ValueError("need at least one window")
    counts = Counter(style_ids)
    w = np.array([1.0 / counts[s] for s in style_ids])
    return w / w.sum()


# --- augmentation --------------------------------------------------------------


def augment_trajectory(
    traj: TrajectorySignal,
    rng: np.random.Generator,
    p_smooth: float = 0.5,
    p_rotate: float = 0.5,
    sigma: float = 2.0,
) -> TrajectorySignal:
    """Randomly Gaussian-smooth the path and/or yaw-rotate the whole trajectory."""
    for p in (p_smooth, p_rotate):
        if not 0.0 <= p <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
    pos, rot = traj.positions, traj.rotations
    if rng.random() < p_smooth:
        pos = gaussian_filter1d(pos, sigma, axis=0, mode="reflect")
    if rng.random() < p_rotate:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        pos, rot = rotate_ground(pos, rot, theta)
    return TrajectorySignal(pos, rot)


def rotate_ground(pos_xz, rot6d, theta: float):
    """Rotate (x, z) rows and 6D root rotations about the vertical axis."""
    Ry = rot_y(theta)
    xyz = np.stack([pos_xz[:, 0], np.zeros(len(pos_xz)), pos_xz[:, 1]], axis=-1)
    xyz = xyz @ Ry.T
    R = Ry @ rot6d_to_matrix(rot6d)
    return xyz[:, [0, 2]], matrix_to_rot6d(R)


# --- splits and manifests ------------------------------------------------------


SPLIT_FRACTIONS = (0.75, 0.15, 0.10)
SPLIT_NAMES = ("train", "val", "test")


def _largest_remainder(total: int, weights: Sequence[float], caps: Sequence[int]) -> list[int]:
    weights = np.asarray(weights, float)
    ideal = total * weights / weights.sum() if weights.sum() > 0 else np.zeros(len(weights))
    alloc = np.minimum(np.floor(ideal).astype(int), caps)
    rem = ideal - alloc
    while alloc.sum() < total:
        open_ = [i for i in range(len(alloc)) if alloc[i] < caps[i]]
        if not open_:
            break
        # ties go to the group with more spare items, then lowest index
        i = max(open_, key=lambda k: (rem[k], caps[k] - alloc[k], -k))
        alloc[i] += 1
        rem[i] = -np.inf if rem[i] < 1 else rem[i] - 1
    return alloc.tolist()


def stratified_split(
    style_labels: Sequence, seed: int = 0, fractions=SPLIT_FRACTIONS
) -> list[str]:
    """Assign each item to train/val/test, preserving the style mix.

    Global split sizes follow ``fractions`` (largest remainder); each small
    split is then apportioned across styles in proportion to their size.
    """
    n = len(style_labels)
    if n == 0:
        raise ValueError("nothing to split")
    totals = _largest_remainder(n, fractions, [n] * len(fractions))
    styles = sorted(set(style_labels), key=str)
    rng = np.random.default_rng(seed)
    members = {s: [i for i, l in enumerate(style_labels) if l == s] for s in styles}
    for s in styles:
        members[s] = [members[s][k] for k in rng.permutation(len(members[s]))]
    remaining = {s: len(members[s]) for s in styles}
    quotas = {s: [0] * len(fractions) for s in styles}
    # smallest splits first so every style gets a seat where feasible
    for k in sorted(range(1, len(fractions)), key=lambda k: totals[k]):
        sizes = [len(members[s]) for s in styles]
        caps = [remaining[s] - 1 if remaining[s] > 1 else 0 for s in styles]
        if sum(caps) < totals[k]:
            caps = [remaining[s] for s in styles]
        alloc = _largest_remainder(totals[k], sizes, caps)
        for s, a in zip(styles, alloc):
            quotas[s][k] = a
            remaining[s] -= a
    out = [""] * n
    for s in styles:
        quotas[s][0] = remaining[s]
        idx = iter(members[s])
        for k in (1, 2, 0):
            for _ in range(quotas[s][k]):
                out[next(idx)] = SPLIT_NAMES[k]
    return out


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    style_name: str
    dataset_name: str
    split: str | None = None


def read_manifest(path) -> list[ManifestRecord]:
    """Read a JSON-lines manifest with fields path, style_name, dataset_name[, split]."""
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        missing = {"path", "style_name", "dataset_name"} - set(d)
        if missing:
            raise ManifestError(f"{path}:{lineno}: missing fields {sorted(missing)}")
        clip_path = Path(d["path"])
        if not clip_path.is_absolute():
            clip_path = path.parent / clip_path
        split = d.get("split")
        if split is not None and split not in SPLIT_NAMES:
            raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
        records.append(ManifestRecord(str(clip_path), d["style_name"], d["dataset_name"], split))
    if not records:
        raise ManifestError(f"{path}: manifest is empty")
    return records


def build_style_table(records: Sequence[ManifestRecord]) -> list[str]:
    """Global style names ``dataset:style``, grouped by dataset so ids are offset per dataset."""
    datasets = sorted({r.dataset_name for r in records})
    table = []
    for ds in datasets:
        table.extend(f"{ds}:{s}" for s in sorted({r.style_name for r in records if r.dataset_name == ds}))
    return table
