"""Small procedurally generated walking clips for tests, demos and smoke training."""

from __future__ import annotations

import numpy as np

from skelgen.dataio.clip import MotionClip
from skelgen.skeleton import (
    SkeletonTopology,
    build_topology,
    forward_kinematics_matrices,
    matrix_to_rot6d,
    rot_y,
)


def rot_x(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(theta), np.ones_like(theta)
    return np.stack(
        [np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2
    )


def chain_topology() -> SkeletonTopology:
    return build_topology(
        ["hips", "knee", "toe"],
        [-1, 0, 1],
        [[0, 0, 0], [0, -0.45, 0], [0, -0.45, 0]],
        toe_names=["toe"],
    )


def biped_topology() -> SkeletonTopology:
    return build_topology(
        ["hips", "l_thigh", "l_shin", "l_toe", "r_thigh", "r_shin", "r_toe"],
        [-1, 0, 1, 2, 0, 4, 5],
        [
            [0, 0, 0],
            [0.1, -0.05, 0],
            [0, -0.42, 0],
            [0, -0.42, 0.08],
            [-0.1, -0.05, 0],
            [0, -0.42, 0],
            [0, -0.42, 0.08],
        ],
        toe_names=["l_toe", "r_toe"],
    )


def _path(n_frames, fps, speed, turn, phase0=0.0):
    f = np.arange(n_frames)
    yaw = turn * np.sin(2 * np.pi * f / 90.0 + phase0)
    step = speed / fps
    heading = np.stack([np.sin(yaw), np.zeros_like(yaw), np.cos(yaw)], -1)
    pos = np.concatenate([[np.zeros(3)], np.cumsum(heading[:-1] * step, axis=0)])
    return yaw, pos


def _ground(topology, root_pos, local, lift):
    """Shift root height so the lowest toe touches y=0, then add ``lift``."""
    pos, _ = forward_kinematics_matrices(topology, root_pos, local)
    lowest = pos[:, list(topology.toe_joint_ids), 1].min(axis=1)
    root_pos = root_pos.copy()
    root_pos[:, 1] += -lowest + lift
    return root_pos


def sine_walk_chain(
    n_frames: int = 56, fps: float = 30.0, speed: float = 1.0, turn: float = 0.4, period: float = 24.0
) -> MotionClip:
    """One-legged hop-walk on a hips -> knee -> toe chain.

    The toe is planted (height exactly 0) for half of each gait cycle.
    """
    topo = chain_topology()
    f = np.arange(n_frames)
    phase = 2 * np.pi * f / period
    yaw, pos = _path(n_frames, fps, speed, turn)
    local = np.broadcast_to(np.eye(3), (n_frames, 3, 3, 3)).copy()
    local[:, 0] = rot_y(yaw)
    local[:, 1] = rot_x(0.5 * np.sin(phase))
    local[:, 2] = rot_x(-0.6 * np.maximum(0.0, np.sin(phase + 0.5)))
    lift = 0.08 * np.maximum(0.0, np.sin(phase + 0.5))
    root = _ground(topo, pos, local, lift)
    return MotionClip(topo, fps, root, matrix_to_rot6d(local), style_id=0, name="chain_walk")


def sine_walk_biped(
    n_frames: int = 56, fps: float = 30.0, speed: float = 1.2, turn: float = 0.3, period: float = 32.0
) -> MotionClip:
    """Two-legged walk with antiphase legs on a 7-joint skeleton."""
    topo = biped_topology()
    f = np.arange(n_frames)
    phase = 2 * np.pi * f / period
    yaw, pos = _path(n_frames, fps, speed, turn, phase0=1.0)
    local = np.broadcast_to(np.eye(3), (n_frames, 7, 3, 3)).copy()
    local[:, 0] = rot_y(yaw) @ rot_x(0.05 * np.sin(2 * phase))
    for thigh, shin, off in ((1, 2, 0.0), (4, 5, np.pi)):
        local[:, thigh] = rot_x(-0.45 * np.sin(phase + off))
        local[:, shin] = rot_x(0.7 * np.maximum(0.0, np.sin(phase + off - 0.8)))
    root = _ground(topo, pos, local, 0.0)
    return MotionClip(topo, fps, root, matrix_to_rot6d(local), style_id=1, name="biped_walk")


DEMO_STYLES = {
    "chain": {"hop": dict(speed=1.0, period=24.0), "shuffle": dict(speed=0.5, period=40.0)},
    "biped": {"walk": dict(speed=1.2, period=32.0), "stride": dict(speed=1.8, period=24.0)},
}


def write_demo_corpus(out_dir, clips_per_style: int = 5, n_frames: int = 72, seed: int = 0):
    """Write BVH files for two skeletons and two styles each, plus ``manifest.jsonl``.

    Clips within a style differ by random turn amplitude and small speed jitter.
    Returns the manifest path.
    """
    import json
    from pathlib import Path

    from skelgen.dataio.bvh import write_bvh

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    makers = {"chain": sine_walk_chain, "biped": sine_walk_biped}
    lines = []
    for dataset, styles in DEMO_STYLES.items():
        for style, kw in styles.items():
            for k in range(clips_per_style):
                kw2 = dict(kw, speed=kw["speed"] * (1 + 0.1 * rng.uniform(-1, 1)), turn=float(rng.uniform(0.1, 0.5)))
                clip = makers[dataset](n_frames=n_frames, **kw2)
                rel = f"{dataset}/{style}/{style}_{k:02d}.bvh"
                (out / rel).parent.mkdir(parents=True, exist_ok=True)
                (out / rel).write_bytes(write_bvh(clip.topology, clip))
                lines.append(json.dumps({"path": rel, "style_name": style, "dataset_name": dataset}))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
