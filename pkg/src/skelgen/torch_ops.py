"""Differentiable kinematics and encodings used by the network and the losses."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from skelgen.skeleton import SkeletonTopology


def rot6d_to_matrix(v: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Gram-Schmidt decode (..., 6) -> (..., 3, 3).

    Unlike the numpy version this never raises: network outputs can be
    degenerate early in training, so norms are clamped by ``eps``.
    """
    a, b = v[..., :3], v[..., 3:]
    c1 = F.normalize(a, dim=-1, eps=eps)
    c2 = F.normalize(b - (c1 * b).sum(-1, keepdim=True) * c1, dim=-1, eps=eps)
    c3 = torch.cross(c1, c2, dim=-1)
    return torch.stack([c1, c2, c3], dim=-1)


def forward_kinematics(
    topology: SkeletonTopology, root_pos: torch.Tensor, joint_rot: torch.Tensor
) -> torch.Tensor:
    """Global positions (..., F, J, 3) from root positions (..., F, 3) and 6D rotations (..., F, J, 6)."""
    R = rot6d_to_matrix(joint_rot)
    offsets = torch.tensor(topology.rest_offsets, dtype=root_pos.dtype, device=root_pos.device)
    pos: list[torch.Tensor] = []
    glob: list[torch.Tensor] = []
    for j, p in enumerate(topology.parent_index):
        if p < 0:
            pos.append(root_pos)
            glob.append(R[..., j, :, :])
        else:
            pos.append(pos[p] + glob[p] @ offsets[j])
            glob.append(glob[p] @ R[..., j, :, :])
    return torch.stack(pos, dim=-2)


def sinusoidal_encoding(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Transformer-style sin/cos features for (possibly fractional) positions."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64, device=positions.device) / half
    )
    args = positions.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb
