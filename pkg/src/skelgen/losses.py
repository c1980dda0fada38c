"""Training losses.

Rotation/position tensors use a frame axis at -3: rotations are (..., F, J, 6),
global positions (..., F, J, 3). Position-based losses denormalize root
positions first when ``stats`` is given so they are measured in meters.
"""

from __future__ import annotations

import torch

from skelgen.dataio.clip import NormStats
from skelgen.skeleton import SkeletonTopology
from skelgen.torch_ops import forward_kinematics


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_frames(x):
    if x.shape[-3] < 2:
        raise ValueError("velocity losses need at least two frames")


def denormalize_root(p: torch.Tensor, stats: NormStats | None) -> torch.Tensor:
    if stats is None:
        return p
    lo = torch.as_tensor(stats.min, dtype=p.dtype, device=p.device)
    hi = torch.as_tensor(stats.max, dtype=p.dtype, device=p.device)
    return (p + 1.0) * 0.5 * (hi - lo) + lo


def diffusion_loss(x0_hat: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
    _check_same(x0_hat, x0)
    return ((x0_hat - x0) ** 2).mean()


def angular_velocity_loss(rot_hat: torch.Tensor, rot: torch.Tensor) -> torch.Tensor:
    """MSE between frame differences of the 6D rotation features."""
    _check_same(rot_hat, rot)
    _check_frames(rot)
    d_hat = rot_hat[..., 1:, :, :] - rot_hat[..., :-1, :, :]
    d = rot[..., 1:, :, :] - rot[..., :-1, :, :]
    return ((d_hat - d) ** 2).mean()


def global_positions(root, rot, topology, stats=None):
    return forward_kinematics(topology, denormalize_root(root, stats), rot)


def global_position_loss(root_hat, rot_hat, root, rot, topology: SkeletonTopology, stats=None):
    p_hat = global_positions(root_hat, rot_hat, topology, stats)
    p = global_positions(root, rot, topology, stats)
    return ((p_hat - p) ** 2).mean()


def global_velocity_loss(root_hat, rot_hat, root, rot, topology: SkeletonTopology, stats=None):
    _check_frames(rot)
    p_hat = global_positions(root_hat, rot_hat, topology, stats)
    p = global_positions(root, rot, topology, stats)
    v_hat = p_hat[..., 1:, :, :] - p_hat[..., :-1, :, :]
    v = p[..., 1:, :, :] - p[..., :-1, :, :]
    return ((v_hat - v) ** 2).mean()


def foot_contact_loss(root_hat, rot_hat, contact, topology: SkeletonTopology, stats=None):
    """Mean toe speed (m/frame) over (frame, toe) pairs flagged as in contact.

    ``contact`` is (..., F, n_toes); frame f's velocity is p[f] - p[f-1], so the
    first frame's flag is unused.
    """
    toes = list(topology.toe_joint_ids)
    if not toes or root_hat.shape[-2] < 2:
        return root_hat.new_zeros(())
    p = global_positions(root_hat, rot_hat, topology, stats)[..., toes, :]
    speed = torch.linalg.vector_norm(p[..., 1:, :, :] - p[..., :-1, :, :], dim=-1)
    mask = torch.as_tensor(contact, device=speed.device)[..., 1:, :].bool()
    n = mask.sum()
    if n == 0:
        return root_hat.new_zeros(())
    return (speed * mask).sum() / n
