"""Skeleton-agnostic UNet denoiser.

Features live on a (frame x joint-token) grid with layout (B, C, T, N), where
N = J + 1: token 0 carries the root position, tokens 1..J carry joint
rotations. Temporal convolutions are (3, 1) kernels, i.e. 1D along frames with
weights shared across tokens, so the same weights serve any J without padding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from skelgen.skeleton import SkeletonTopology, build_ancestor_mask
from skelgen.torch_ops import sinusoidal_encoding


class ModelConfigError(ValueError):
    pass


@dataclass
class DenoiserConfig:
    base_channels: int = 64
    n_levels: int = 3
    heads: int = 4
    groupnorm_groups: int = 8
    style_count: int = 1
    style_embed_dim: int = 128
    time_embed_dim: int = 128
    traj_embed_dim: int = 128
    F: int = 56
    F_past: int = 8
    ff_mult: int = 2
    max_depth: int = 64
    positional_encoding: bool = True
    merged_attention: bool = False

    def __post_init__(self):
        if self.n_levels < 2:
            raise ModelConfigError("need at least two levels")
        m = 2 ** (self.n_levels - 1)
        if (self.F + self.F_past) % m or self.F % m:
            raise ModelConfigError(
                f"F ({self.F}) and F + F_past ({self.F + self.F_past}) must be divisible by {m}"
            )
        c = self.base_channels
        if c % self.groupnorm_groups or c % self.heads:
            raise ModelConfigError("base_channels must be divisible by groupnorm_groups and heads")
        if self.style_count < 1:
            raise ModelConfigError("style_count must be >= 1")

    @property
    def null_style_id(self) -> int:
        return self.style_count

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def pack_motion(root: torch.Tensor, rot: torch.Tensor) -> torch.Tensor:
    """(B, F, 3) + (B, F, J, 6) -> (B, F, 3 + 6J)."""
    return torch.cat([root, rot.flatten(-2)], dim=-1)


def unpack_motion(x: torch.Tensor, num_joints: int):
    return x[..., :3], x[..., 3:].unflatten(-1, (num_joints, 6))


class FiLM(nn.Module):
    """GroupNorm followed by (1 + gamma) * h + beta, gamma/beta from the condition vector."""

    def __init__(self, channels: int, cond_dim: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels, affine=False)
        self.proj = nn.Linear(cond_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x, cond):
        gamma, beta = self.proj(cond)[:, :, None, None].chunk(2, dim=1)
        return (1 + gamma) * self.norm(x) + beta


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, cond_dim: int, groups: int):
        super().__init__()
        self.film = FiLM(c_in, cond_dim, groups)
        self.conv1 = nn.Conv2d(c_in, c_out, (3, 1), padding=(1, 0))
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, (3, 1), padding=(1, 0))
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, cond):
        h = self.conv1(F.silu(self.film(x, cond)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    """Multi-head attention; positional terms are added to query/key inputs only."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.o = nn.Linear(dim, dim)
        self.last_key_rows = 0

    def forward(self, x, kv=None, q_pos=None, k_pos=None, mask=None):
        kv = x if kv is None else kv
        q = self.q(x if q_pos is None else x + q_pos)
        k = self.k(kv if k_pos is None else kv + k_pos)
        v = self.v(kv)
        h = self.heads
        q, k, v = (z.unflatten(-1, (h, -1)).transpose(-2, -3) for z in (q, k, v))
        logits = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
        if mask is not None:
            logits = logits.masked_fill(~mask, float("-inf"))
        out = logits.softmax(dim=-1) @ v
        self.last_key_rows = kv.shape[-2]
        return self.o(out.transpose(-2, -3).flatten(-2))


class AttentionStack(nn.Module):
    """FiLM -> temporal attention -> joint attention -> trajectory cross-attention -> feed-forward."""

    def __init__(self, dim: int, cfg: DenoiserConfig, cond_dim: int):
        super().__init__()
        self.merged = cfg.merged_attention
        self.film = FiLM(dim, cond_dim, cfg.groupnorm_groups)
        self.film_out = nn.Conv2d(dim, dim, 1)
        self.ln_t = nn.LayerNorm(dim)
        self.ln_j = nn.LayerNorm(dim)
        if self.merged:
            self.merged_attn = Attention(dim, cfg.heads)
        else:
            self.temporal_attn = Attention(dim, cfg.heads)
            self.joint_attn = Attention(dim, cfg.heads)
        self.ln_x = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, cfg.heads, kv_dim=cfg.traj_embed_dim)
        self.ln_f = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, cfg.ff_mult * dim), nn.SiLU(), nn.Linear(cfg.ff_mult * dim, dim)
        )
        self.joint_pos = nn.Linear(cfg.base_channels, dim, bias=False)

    def forward(self, x, cond, ctx):
        x = x + self.film_out(F.silu(self.film(x, cond)))
        h = x.permute(0, 2, 3, 1)  # (B, T, N, C)
        B, T, N, C = h.shape
        fpe = ctx.frame_pe(T, C, h.dtype)  # (T, C) or None
        jpe = self.joint_pos(ctx.joint_enc.to(h.dtype)) if ctx.joint_enc is not None else None
        if self.merged:
            pe = None
            if fpe is not None:
                pe = (fpe[:, None, :] + jpe[None, :, :]).reshape(T * N, C)
            mask = ctx.mask.repeat(T, T)
            flat = h.reshape(B, T * N, C)
            flat = flat + self.merged_attn(self.ln_t(flat), q_pos=pe, k_pos=pe, mask=mask)
            h = flat.reshape(B, T, N, C)
        else:
            ht = h.transpose(1, 2)  # (B, N, T, C)
            ht = ht + self.temporal_attn(self.ln_t(ht), q_pos=fpe, k_pos=fpe)
            h = ht.transpose(1, 2)
            h = h + self.joint_attn(self.ln_j(h), q_pos=jpe, k_pos=jpe, mask=ctx.mask)
        flat = h.reshape(B, T * N, C)
        q_pos = None if fpe is None else fpe[:, None, :].expand(T, N, C).reshape(T * N, C)
        flat = flat + self.cross_attn(self.ln_x(flat), kv=ctx.traj, q_pos=q_pos, k_pos=ctx.traj_pe)
        flat = flat + self.ff(self.ln_f(flat))
        return flat.reshape(B, T, N, C).permute(0, 3, 1, 2)


class _Context:
    """Per-call quantities shared by every attention stack."""

    def __init__(self, mask, joint_enc, frame_pos, traj, traj_pe, use_pe):
        self.mask = mask
        self.joint_enc = joint_enc
        self.frame_pos = frame_pos
        self.traj = traj
        self.traj_pe = traj_pe
        self.use_pe = use_pe
        self._cache = {}

    def frame_pe(self, T: int, C: int, dtype):
        if not self.use_pe:
            return None
        key = (T, C, dtype)
        if key not in self._cache:
            stride = len(self.frame_pos) // T
            self._cache[key] = sinusoidal_encoding(self.frame_pos[::stride], C).to(dtype)
        return self._cache[key]


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.base_channels
        cond_dim = cfg.time_embed_dim + cfg.style_embed_dim
        self.root_in = nn.Linear(3, C)
        self.joint_in = nn.Linear(6, C)
        self.flag_embed = nn.Embedding(2, C)
        self.depth_embed = nn.Embedding(cfg.max_depth + 2, C)
        self.style_embed = nn.Embedding(cfg.style_count + 1, cfg.style_embed_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
            nn.SiLU(),
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
        )
        self.traj_in = nn.Sequential(
            nn.Linear(8, cfg.traj_embed_dim), nn.SiLU(), nn.Linear(cfg.traj_embed_dim, cfg.traj_embed_dim)
        )
        chans = [C * 2**l for l in range(cfg.n_levels)]
        self.enc_blocks = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = C
        for l, ch in enumerate(chans):
            self.enc_blocks.append(ResBlock(prev, ch, cond_dim, cfg.groupnorm_groups))
            self.enc_attn.append(AttentionStack(ch, cfg, cond_dim) if l > 0 else nn.Identity())
            if l < cfg.n_levels - 1:
                self.down.append(nn.Conv2d(ch, ch, (3, 1), stride=(2, 1), padding=(1, 0)))
            prev = ch
        self.dec_blocks = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        self.up = nn.ModuleList()
        for l in reversed(range(cfg.n_levels)):
            ch = chans[l]
            self.dec_blocks.append(ResBlock(prev + ch, ch, cond_dim, cfg.groupnorm_groups))
            self.dec_attn.append(AttentionStack(ch, cfg, cond_dim) if l > 0 else nn.Identity())
            if l > 0:
                self.up.append(nn.Conv2d(ch, ch, (3, 1), padding=(1, 0)))
            prev = ch
        self.out_norm = nn.GroupNorm(cfg.groupnorm_groups, C)
        self.root_out = nn.Linear(C, 3)
        self.joint_out = nn.Linear(C, 6)
        self._topology_cache: dict = {}
        self.level_lengths: list[int] = []

    # -- helpers ---------------------------------------------------------------

    def topology_tensors(self, topology: SkeletonTopology):
        """(ancestor mask (N, N) bool, depth index (N,) long) for a skeleton, cached."""
        key = topology.signature()
        if key not in self._topology_cache:
            mask = torch.from_numpy(build_ancestor_mask(topology))
            depth = np.minimum(np.asarray(topology.depth) + 1, self.cfg.max_depth + 1)
            depth = torch.from_numpy(np.concatenate([[0], depth])).long()
            self._topology_cache[key] = (mask, depth)
        return self._topology_cache[key]

    def style_vector(self, style) -> torch.Tensor:
        """Embedding rows for integer ids; float inputs are taken as embeddings already."""
        if style.dtype in (torch.int32, torch.int64):
            if ((style < 0) | (style > self.cfg.style_count)).any():
                raise ModelConfigError("unknown style id")
            return self.style_embed(style)
        return style

    def joint_encoding(self, depth: torch.Tensor) -> torch.Tensor:
        n = depth.shape[0]
        idx = sinusoidal_encoding(torch.arange(n), self.cfg.base_channels).to(self.depth_embed.weight.dtype)
        return self.depth_embed(depth) + idx

    # -- forward ---------------------------------------------------------------

    def forward(self, cur_root, cur_rot, past_root, past_rot, t, style, traj_pos, traj_rot, topology):
        """Predict clean current frames.

        Args:
            cur_root, cur_rot: noisy current frames (B, F, 3) and (B, F, J, 6).
            past_root, past_rot: clean past frames (B, F', 3) and (B, F', J, 6),
                or None to generate without context.
            t: (B,) diffusion steps.
            style: (B,) style ids or (B, style_embed_dim) embeddings.
            traj_pos, traj_rot: (B, F, 2) and (B, F, 6).

        Returns:
            x0 estimates for root positions (B, F, 3) and rotations (B, F, J, 6).
        """
        cfg = self.cfg
        B, Fc, J, _ = cur_rot.shape
        if J != topology.num_joints:
            raise ModelConfigError(f"rotations have {J} joints, topology has {topology.num_joints}")
        if traj_pos.shape[1] != Fc or traj_rot.shape[1] != Fc:
            raise ModelConfigError("trajectory length must equal the number of current frames")
        has_past = past_root is not None and past_root.shape[1] > 0
        Fp = past_root.shape[1] if has_past else 0
        m = 2 ** (cfg.n_levels - 1)
        if (Fp + Fc) % m:
            raise ModelConfigError(f"sequence length {Fp + Fc} not divisible by {m}")
        if has_past:
            root = torch.cat([past_root, cur_root], dim=1)
            rot = torch.cat([past_rot, cur_rot], dim=1)
        else:
            root, rot = cur_root, cur_rot
        T = Fp + Fc
        dtype = cur_root.dtype

        mask, depth = self.topology_tensors(topology)
        flags = torch.cat([torch.zeros(Fp, dtype=torch.long), torch.ones(Fc, dtype=torch.long)])
        x = torch.cat([self.root_in(root)[:, :, None], self.joint_in(rot)], dim=2)  # (B, T, N, C)
        x = x + self.flag_embed(flags)[None, :, None]
        joint_enc = None
        if cfg.positional_encoding:
            joint_enc = self.joint_encoding(depth)
            x = x + joint_enc[None, None]
        x = x.permute(0, 3, 1, 2)

        t_emb = self.time_mlp(sinusoidal_encoding(t, cfg.time_embed_dim).to(dtype))
        cond = torch.cat([t_emb, self.style_vector(style).to(dtype)], dim=-1)

        # absolute frame positions: current frame i sits at F_past + i even without past frames
        frame_pos = torch.arange(T, dtype=torch.float64) + (cfg.F_past - Fp)
        traj = self.traj_in(torch.cat([traj_pos, traj_rot], dim=-1))
        traj_pe = None
        if cfg.positional_encoding:
            traj_pe = sinusoidal_encoding(
                torch.arange(Fc, dtype=torch.float64) + cfg.F_past, cfg.traj_embed_dim
            ).to(dtype)
        ctx = _Context(mask, joint_enc, frame_pos, traj, traj_pe, cfg.positional_encoding)

        skips = []
        self.level_lengths = []
        for l in range(cfg.n_levels):
            x = self.enc_blocks[l](x, cond)
            if l > 0:
                x = self.enc_attn[l](x, cond, ctx)
            self.level_lengths.append(x.shape[2])
            skips.append(x)
            if l < cfg.n_levels - 1:
                x = self.down[l](x)
        for i, l in enumerate(reversed(range(cfg.n_levels))):
            x = self.dec_blocks[i](torch.cat([x, skips[l]], dim=1), cond)
            if l > 0:
                x = self.dec_attn[i](x, cond, ctx)
                x = F.interpolate(x, scale_factor=(2, 1), mode="nearest")
                x = self.up[i](x)
        x = F.silu(self.out_norm(x)).permute(0, 2, 3, 1)[:, Fp:]  # (B, F, N, C)
        return self.root_out(x[:, :, 0]), self.joint_out(x[:, :, 1:])

    def joint_attention_modules(self) -> list[Attention]:
        mods = [m for m in self.enc_attn if isinstance(m, AttentionStack)]
        mods += [m for m in self.dec_attn if isinstance(m, AttentionStack)]
        return [m.merged_attn if m.merged else m.joint_attn for m in mods]
