"""Inference: windowed DDIM sampling, autoregressive chaining, style blending, export."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from skelgen.checkpoint import Checkpoint
from skelgen.dataio.bvh import read_bvh, write_bvh
from skelgen.dataio.clip import MotionClip, NormStats, TrajectorySignal
from skelgen.dataio.dataset import (
    denormalize_root,
    extract_trajectory,
    normalize_root,
    trajectory_from_yaw,
)
from skelgen.diffusion import DiffusionSchedule, ddim_sample_loop, make_schedule
from skelgen.model import Denoiser, pack_motion, unpack_motion
from skelgen.skeleton import SkeletonTopology
from skelgen.training import load_model


class GenerationError(ValueError):
    pass


def blend_styles(table: torch.Tensor, weights: Mapping[int, float], tol: float = 1e-6) -> torch.Tensor:
    """Convex combination of style embedding rows."""
    if not weights:
        raise GenerationError("no style weights given")
    n = table.shape[0]
    total = 0.0
    out = torch.zeros_like(table[0])
    for sid, w in sorted(weights.items()):
        if not 0 <= sid < n:
            raise GenerationError(f"unknown style id {sid}")
        if w < 0:
            raise GenerationError("style weights must be nonnegative")
        out = out + w * table[sid]
        total += w
    if abs(total - 1.0) > tol:
        raise GenerationError(f"style weights sum to {total}, expected 1")
    return out


@dataclass
class GenerationRequest:
    """Styles are one weight map for every chunk or one per chunk. Trajectory is in meters."""

    styles: list[dict[int, float]]
    trajectory: TrajectorySignal
    seed_motion: MotionClip | None = None
    cfg_scale: float = 2.5
    seed: int = 0
    skeleton: str | None = None


@dataclass
class GeneratedMotion:
    clip: MotionClip  # meters
    windows: list[dict] = field(default_factory=list)  # normalized past / output per window
    timings: list[float] = field(default_factory=list)


class MotionGenerator:
    """A loaded checkpoint ready for sampling."""

    def __init__(
        self,
        model: Denoiser,
        stats: NormStats,
        topologies: Mapping[str, SkeletonTopology],
        style_table: Sequence[str],
        schedule: DiffusionSchedule,
        infer_steps: int = 4,
        frame_rate: float = 30.0,
    ):
        self.model = model.eval()
        self.stats = stats
        self.topologies = dict(topologies)
        self.style_table = list(style_table)
        self.schedule = schedule
        self.infer_steps = infer_steps
        self.frame_rate = frame_rate

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, kind: str | None = None, train_steps: int | None = None,
                        infer_steps: int | None = None):
        rc = ckpt.run_config or {}
        kind = kind or rc.get("diffusion.kind", "cosine")
        train_steps = train_steps or rc.get("diffusion.train_steps", 50)
        infer_steps = infer_steps or rc.get("diffusion.infer_steps", 4)
        return cls(
            load_model(ckpt),
            NormStats.from_dict(ckpt.norm_stats),
            {k: SkeletonTopology.from_dict(v) for k, v in ckpt.topologies.items()},
            ckpt.style_table,
            make_schedule(kind, train_steps),
            infer_steps,
            rc.get("data.frame_rate", 30.0),
        )

    @property
    def F(self):
        return self.model.cfg.F

    @property
    def F_past(self):
        return self.model.cfg.F_past

    def topology(self, name: str | None) -> tuple[str, SkeletonTopology]:
        if name is None:
            if len(self.topologies) != 1:
                raise GenerationError(f"request must name a skeleton, one of {sorted(self.topologies)}")
            name = next(iter(self.topologies))
        if name not in self.topologies:
            raise GenerationError(f"unknown skeleton {name!r}; known: {sorted(self.topologies)}")
        return name, self.topologies[name]

    def style_id(self, name: str) -> int:
        if name in self.style_table:
            return self.style_table.index(name)
        hits = [i for i, s in enumerate(self.style_table) if s.split(":", 1)[-1] == name]
        if len(hits) != 1:
            raise GenerationError(f"unknown or ambiguous style {name!r}")
        return hits[0]

    def style_embedding(self, weights: Mapping[int, float]) -> torch.Tensor:
        return blend_styles(self.model.style_embed.weight.detach(), weights)

    # -- sampling --------------------------------------------------------------

    @torch.no_grad()
    def sample_window(
        self,
        topology: SkeletonTopology,
        style_emb: torch.Tensor,
        traj: TrajectorySignal,
        past: tuple[np.ndarray, np.ndarray] | None,
        guidance_scale: float,
        generator: torch.Generator,
    ) -> tuple[np.ndarray, np.ndarray]:
        """One F-frame window in normalized root space.

        ``traj`` positions and ``past`` root positions are normalized.
        """
        model = self.model
        F, J = self.F, topology.num_joints
        if len(traj) != F:
            raise GenerationError(f"trajectory chunk must have {F} frames, got {len(traj)}")
        dtype = next(model.parameters()).dtype
        tp = torch.as_tensor(traj.positions, dtype=dtype)[None]
        tr = torch.as_tensor(traj.rotations, dtype=dtype)[None]
        if past is not None:
            pr_root = torch.as_tensor(past[0], dtype=dtype)[None]
            pr_rot = torch.as_tensor(past[1], dtype=dtype)[None]
            if pr_root.shape[1] != self.F_past:
                raise GenerationError(f"past context must have {self.F_past} frames")
        else:
            pr_root = pr_rot = None
        cond = style_emb.to(dtype)[None]
        null = model.style_embed.weight[model.cfg.null_style_id].detach().to(dtype)[None]

        def denoise(x, t, style):
            root, rot = unpack_motion(x, J)
            tt = torch.full((x.shape[0],), t, dtype=torch.long)
            r0, q0 = model(root, rot, pr_root, pr_rot, tt, style, tp, tr, topology)
            return pack_motion(r0, q0)

        x0 = ddim_sample_loop(
            denoise,
            cond,
            self.schedule,
            self.infer_steps,
            (1, F, 3 + 6 * J),
            generator=generator,
            guidance_scale=guidance_scale,
            uncond_condition=null,
            dtype=dtype,
        )
        root, rot = unpack_motion(x0[0], J)
        return root.double().numpy(), rot.double().numpy()

    def normalize_trajectory(self, traj: TrajectorySignal) -> TrajectorySignal:
        xyz = np.zeros((len(traj), 3))
        xyz[:, 0], xyz[:, 2] = traj.positions[:, 0], traj.positions[:, 1]
        n = normalize_root(xyz, self.stats)
        return TrajectorySignal(n[:, [0, 2]], traj.rotations)

    def generate_window(self, topology, style_emb, traj_chunk, past=None, guidance_scale=2.5, seed=0):
        """Single window from a trajectory chunk in meters; past is a meters clip or None."""
        gen = torch.Generator().manual_seed(seed)
        past_n = None
        if past is not None:
            past_n = (normalize_root(past.root_pos[-self.F_past:], self.stats), past.joint_rot[-self.F_past:])
        root, rot = self.sample_window(
            topology, style_emb, self.normalize_trajectory(traj_chunk), past_n, guidance_scale, gen
        )
        return denormalize_root(root, self.stats), rot

    def generate(self, request: GenerationRequest) -> GeneratedMotion:
        """Autoregressive generation over the whole request trajectory."""
        name, topology = self.topology(request.skeleton)
        F, Fp = self.F, self.F_past
        n = len(request.trajectory)
        if n == 0 or n % F:
            raise GenerationError(f"trajectory length {n} is not a positive multiple of F={F}")
        chunks = n // F
        if len(request.styles) not in (1, chunks):
            raise GenerationError(f"need 1 or {chunks} style maps, got {len(request.styles)}")
        traj = self.normalize_trajectory(request.trajectory)
        gen = torch.Generator().manual_seed(request.seed)
        past = None
        if request.seed_motion is not None:
            seed = request.seed_motion
            if seed.topology.signature() != topology.signature():
                raise GenerationError("seed motion skeleton does not match the requested skeleton")
            if seed.num_frames < Fp:
                raise GenerationError(f"seed motion needs at least {Fp} frames")
            if Fp > 0:
                past = (normalize_root(seed.root_pos[-Fp:], self.stats), seed.joint_rot[-Fp:].copy())
        roots, rots, windows, timings = [], [], [], []
        for k in range(chunks):
            weights = request.styles[k if len(request.styles) > 1 else 0]
            emb = self.style_embedding(weights)
            t0 = time.perf_counter()
            root, rot = self.sample_window(
                topology, emb, traj.slice(k * F, (k + 1) * F), past, request.cfg_scale, gen
            )
            timings.append(time.perf_counter() - t0)
            windows.append({"past": past, "root": root, "rot": rot})
            roots.append(root)
            rots.append(rot)
            if Fp > 0:
                past = (root[-Fp:].copy(), rot[-Fp:].copy())
        clip = MotionClip(
            topology,
            self.frame_rate,
            denormalize_root(np.concatenate(roots), self.stats),
            np.concatenate(rots),
            style_id=max(request.styles[0], key=request.styles[0].get),
            name=name,
        )
        return GeneratedMotion(clip, windows, timings)


def export_generation(clip: MotionClip, path, topology: SkeletonTopology | None = None) -> Path:
    if clip.num_frames == 0:
        raise GenerationError("cannot export an empty clip")
    path = Path(path)
    path.write_bytes(write_bvh(topology or clip.topology, clip))
    return path


# --- request files ------------------------------------------------------------------


def read_trajectory_csv(path) -> TrajectorySignal:
    """CSV with header ``x,z,yaw_deg``; one row per frame, meters and degrees."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x", "z", "yaw_deg"} <= set(reader.fieldnames):
            raise GenerationError(f"{path}: expected header x,z,yaw_deg")
        rows = [(float(r["x"]), float(r["z"]), float(r["yaw_deg"])) for r in reader]
    a = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    return trajectory_from_yaw(a[:, 0], a[:, 1], a[:, 2])


def write_trajectory_csv(path, traj: TrajectorySignal) -> None:
    from skelgen.skeleton import rot6d_to_matrix

    R = rot6d_to_matrix(traj.rotations)
    # heading of the rotated +z axis
    yaw = np.rad2deg(np.arctan2(R[:, 0, 2], R[:, 2, 2]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "z", "yaw_deg"])
        for (x, z), y in zip(traj.positions, yaw):
            w.writerow([f"{x:.6f}", f"{z:.6f}", f"{y:.6f}"])


def parse_style_spec(spec, generator: MotionGenerator) -> list[dict[int, float]]:
    """``{"name": w}`` or a per-chunk list of such maps -> list of {id: w}."""
    maps = spec if isinstance(spec, list) else [spec]
    if isinstance(spec, str):
        maps = [{spec: 1.0}]
    out = []
    for m in maps:
        if isinstance(m, str):
            m = {m: 1.0}
        out.append({generator.style_id(k): float(v) for k, v in m.items()})
    return out


def request_from_dict(d: dict, generator: MotionGenerator, base_dir=".", scale: float = 1.0) -> GenerationRequest:
    base = Path(base_dir)
    skeleton = d.get("skeleton")
    _, topo = generator.topology(skeleton)
    if "trajectory_bvh" in d:
        _, clip = read_bvh(base / d["trajectory_bvh"], scale=scale)
        traj = extract_trajectory(clip)
    elif isinstance(d.get("trajectory"), str):
        traj = read_trajectory_csv(base / d["trajectory"])
    elif isinstance(d.get("trajectory"), list):
        a = np.asarray(d["trajectory"], dtype=np.float64).reshape(-1, 3)
        traj = trajectory_from_yaw(a[:, 0], a[:, 1], a[:, 2])
    else:
        raise GenerationError("request needs a trajectory (inline array, CSV path or trajectory_bvh)")
    seed_motion = None
    if d.get("seed_bvh"):
        stopo, seed_motion = read_bvh(base / d["seed_bvh"], scale=scale)
        if stopo.signature() != topo.signature():
            raise GenerationError("seed_bvh skeleton does not match the requested skeleton")
        seed_motion = seed_motion.replace(topology=topo)
    if "styles" not in d:
        raise GenerationError("request needs styles")
    return GenerationRequest(
        styles=parse_style_spec(d["styles"], generator),
        trajectory=traj,
        seed_motion=seed_motion,
        cfg_scale=float(d.get("cfg_scale", 2.5)),
        seed=int(d.get("seed", 0)),
        skeleton=skeleton,
    )


def read_request(path, generator: MotionGenerator, scale: float = 1.0) -> GenerationRequest:
    path = Path(path)
    return request_from_dict(json.loads(path.read_text()), generator, path.parent, scale)
