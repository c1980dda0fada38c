"""Evaluation metrics: Frechet distance over classifier features, diversity,
foot penetration and sliding, and trajectory error.

All clip-based metrics expect clips in meters with the ground at y = 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from skelgen.dataio.clip import MotionClip, NormStats, TrajectorySignal
from skelgen.dataio.dataset import denormalize_root
from skelgen.skeleton import SkeletonTopology, forward_kinematics, rot6d_to_matrix

PENETRATION_EPS = 0.005
SLIDE_HEIGHT = 0.01


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_features(cls, feats) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise MetricsError("features must be a non-empty (N, D) array")
        mu = feats.mean(axis=0)
        if feats.shape[0] < 2:
            sigma = np.zeros((feats.shape[1], feats.shape[1]))
        else:
            sigma = np.atleast_2d(np.cov(feats, rowvar=False))
        return cls(mu, sigma)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats, eps: float = 0.0) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the product root is taken as the trace of
    (S_a^(1/2) S_b S_a^(1/2))^(1/2), a symmetric PSD matrix with the same
    eigenvalues, so it can be computed with ``eigh`` and negative round-off
    eigenvalues clamped to zero.
    """
    mu_a, mu_b = np.atleast_1d(a.mu), np.atleast_1d(b.mu)
    sa, sb = np.atleast_2d(a.sigma), np.atleast_2d(b.sigma)
    if mu_a.shape != mu_b.shape or sa.shape != sb.shape or sa.shape[0] != mu_a.shape[0]:
        raise MetricsError("feature dimensions do not match")
    root_a = _psd_sqrt(sa)
    m = root_a @ sb @ root_a
    w = np.linalg.eigvalsh((m + m.T) / 2)
    tr_covmean = np.sqrt(np.clip(w, max(eps, 0.0), None)).sum()
    diff = mu_a - mu_b
    d = diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_covmean
    return float(max(d, 0.0))  # round-off can push identical sets just below zero


# --- classifier ----------------------------------------------------------------------


class MotionClassifier(nn.Module):
    """Temporal-conv classifier over global joint positions; features are the pooled activations."""

    def __init__(self, num_joints: int, num_classes: int, hidden: int = 64, feature_dim: int = 64):
        super().__init__()
        self.num_joints = num_joints
        self.num_classes = num_classes
        self.hidden = hidden
        self.feature_dim = feature_dim
        c_in = num_joints * 3
        self.blocks = nn.Sequential(
            nn.Conv1d(c_in, hidden, 5, padding=2), nn.ReLU(),
            nn.Conv1d(hidden, hidden, 5, padding=2), nn.ReLU(),
            nn.Conv1d(hidden, feature_dim, 5, padding=2), nn.ReLU(),
        )
        self.head = nn.Linear(feature_dim, num_classes)

    @staticmethod
    def prepare(positions) -> torch.Tensor:
        """(B, F, J, 3) global positions -> (B, 3J, F), ground-plane origin at frame 0's root."""
        p = torch.as_tensor(np.asarray(positions), dtype=torch.float32)
        offset = p[:, :1, :1, :].clone()
        offset[..., 1] = 0.0
        p = p - offset
        return p.flatten(2).transpose(1, 2)

    def features(self, positions) -> torch.Tensor:
        return self.blocks(self.prepare(positions)).mean(dim=-1)

    def forward(self, positions):
        return self.head(self.features(positions))

    def config(self) -> dict:
        return {
            "num_joints": self.num_joints,
            "num_classes": self.num_classes,
            "hidden": self.hidden,
            "feature_dim": self.feature_dim,
        }


def train_fid_classifier(
    positions,
    labels,
    hidden: int = 64,
    feature_dim: int = 64,
    epochs: int = 200,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> MotionClassifier:
    """Fit a style classifier on (N, F, J, 3) position windows."""
    positions = np.asarray(positions, dtype=np.float32)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise MetricsError("classifier training needs at least two style classes")
    remap = {c: i for i, c in enumerate(classes)}
    y = torch.as_tensor([remap[c] for c in labels], dtype=torch.long)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        clf = MotionClassifier(positions.shape[2], len(classes), hidden, feature_dim)
    clf.classes = classes
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    x = MotionClassifier.prepare(positions)
    gen = torch.Generator().manual_seed(seed)
    n = len(y)
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, batch_size):
            idx = perm[i : i + batch_size]
            logits = clf.head(clf.blocks(x[idx]).mean(-1))
            loss = F.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return clf.eval()


@torch.no_grad()
def classifier_features(clf: MotionClassifier, positions) -> np.ndarray:
    return clf.features(positions).double().numpy()


def fid_from_positions(clf: MotionClassifier, generated, reference) -> float:
    a = FeatureStats.from_features(classifier_features(clf, generated))
    b = FeatureStats.from_features(classifier_features(clf, reference))
    return frechet_distance(a, b)


def position_windows(clips: Sequence[MotionClip], F: int, stride: int | None = None) -> np.ndarray:
    """Non-overlapping (by default) F-frame windows of global positions from clips in meters."""
    stride = stride or F
    out = []
    for c in clips:
        pos = clip_positions(c)
        for s in range(0, c.num_frames - F + 1, stride):
            out.append(pos[s : s + F])
    if not out:
        raise MetricsError(f"no clip has {F} frames")
    return np.stack(out)


# --- diversity ---------------------------------------------------------------------------


def clip_positions(clip: MotionClip) -> np.ndarray:
    return forward_kinematics(clip.topology, clip.root_pos, clip.joint_rot)


def _as_positions(x) -> np.ndarray:
    return clip_positions(x) if isinstance(x, MotionClip) else np.asarray(x, dtype=np.float64)


def diversity_intra(motions) -> float:
    """Per-joint variance over time (summed over xyz), averaged over joints and motions."""
    if isinstance(motions, MotionClip) or (isinstance(motions, np.ndarray) and motions.ndim == 3):
        motions = [motions]
    vals = []
    for m in motions:
        p = _as_positions(m)
        vals.append(p.var(axis=0).sum(axis=-1).mean())
    return float(np.mean(vals))


def diversity_inter(motions) -> float:
    """Variance across motions of each joint's time-mean position, averaged over joints."""
    ps = [_as_positions(m) for m in motions]
    if len(ps) < 2:
        raise MetricsError("inter-motion diversity needs at least two motions")
    if len({p.shape[1] for p in ps}) != 1:
        raise MetricsError("motions must share a skeleton")
    means = np.stack([p.mean(axis=0) for p in ps])  # (M, J, 3)
    return float(means.var(axis=0).sum(axis=-1).mean())


# --- foot metrics ----------------------------------------------------------------------


def _toe_positions(clip, topology):
    topology = topology or clip.topology
    toes = list(topology.toe_joint_ids)
    if not toes:
        raise MetricsError("no toe joints configured")
    return forward_kinematics(topology, clip.root_pos, clip.joint_rot)[:, toes]


def penetration_from_heights(toe_heights, eps: float = PENETRATION_EPS) -> np.ndarray:
    """Percent of frames per toe with height strictly below -eps. ``toe_heights`` is (F, n_toes)."""
    h = np.asarray(toe_heights, dtype=np.float64)
    return 100.0 * (h < -eps).sum(axis=0) / h.shape[0]


def foot_penetration(clip: MotionClip, topology: SkeletonTopology | None = None, eps: float = PENETRATION_EPS):
    return penetration_from_heights(_toe_positions(clip, topology)[..., 1], eps)


def sliding_from_positions(toe_pos, height: float = SLIDE_HEIGHT) -> float:
    """Horizontal toe travel on frames where the toe is below ``height``, averaged over toes.

    ``toe_pos`` is (F, n_toes, 3); frame f contributes |p[f] - p[f-1]| in xz.
    """
    p = np.asarray(toe_pos, dtype=np.float64)
    step = np.linalg.norm(np.diff(p[..., [0, 2]], axis=0), axis=-1)  # (F-1, n_toes)
    low = p[1:, :, 1] < height
    return float((step * low).sum(axis=0).mean())


def foot_sliding(clip: MotionClip, topology: SkeletonTopology | None = None, height: float = SLIDE_HEIGHT) -> float:
    return sliding_from_positions(_toe_positions(clip, topology), height)


# --- trajectory ----------------------------------------------------------------------


def geodesic_angle_deg(R1, R2) -> np.ndarray:
    tr = np.einsum("...ij,...ij->...", R1, R2)  # trace(R1^T R2)
    return np.rad2deg(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))


def trajectory_error(clip: MotionClip, traj: TrajectorySignal, stats: NormStats | None = None):
    """(mean xz distance in meters, mean root orientation error in degrees).

    ``traj`` positions are denormalized with ``stats`` when given.
    """
    if len(traj) != clip.num_frames:
        raise MetricsError(f"trajectory has {len(traj)} frames, clip has {clip.num_frames}")
    tp = traj.positions
    if stats is not None:
        xyz = np.zeros((len(traj), 3))
        xyz[:, 0], xyz[:, 2] = tp[:, 0], tp[:, 1]
        tp = denormalize_root(xyz, stats)[:, [0, 2]]
    pos_err = np.linalg.norm(clip.root_pos[:, [0, 2]] - tp, axis=-1).mean()
    rot_err = geodesic_angle_deg(rot6d_to_matrix(clip.joint_rot[:, 0]), rot6d_to_matrix(traj.rotations)).mean()
    return float(pos_err), float(rot_err)


# --- report ---------------------------------------------------------------------------


def evaluate_clips(
    generated: Sequence[MotionClip],
    reference: Sequence[MotionClip] | None = None,
    classifier: MotionClassifier | None = None,
    window: int | None = None,
    penetration_eps: float = PENETRATION_EPS,
    slide_height: float = SLIDE_HEIGHT,
) -> list[dict]:
    """Rows of {metric, scope, value}. FID is included when a reference set and classifier are given."""
    if not generated:
        raise MetricsError("no generated clips")
    topo = generated[0].topology
    rows = []
    pen = np.mean([foot_penetration(c, eps=penetration_eps) for c in generated], axis=0)
    for t, v in zip(topo.toe_joint_ids, pen):
        rows.append({"metric": "foot_penetration_pct", "scope": topo.joint_names[t], "value": float(v)})
    rows.append({"metric": "foot_penetration_pct", "scope": "aggregate", "value": float(np.mean(pen))})
    rows.append({
        "metric": "foot_sliding_m", "scope": "aggregate",
        "value": float(np.mean([foot_sliding(c, height=slide_height) for c in generated])),
    })
    rows.append({"metric": "diversity_intra", "scope": "aggregate", "value": diversity_intra(generated)})
    if len(generated) > 1:
        rows.append({"metric": "diversity_inter", "scope": "aggregate", "value": diversity_inter(generated)})
    if reference is not None and classifier is not None:
        w = window or min(c.num_frames for c in list(generated) + list(reference))
        fid = fid_from_positions(classifier, position_windows(generated, w), position_windows(reference, w))
        rows.append({"metric": "fid", "scope": "aggregate", "value": fid})
    return rows
