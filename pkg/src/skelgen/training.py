"""Batching, the combined training objective, and the optimization loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from skelgen.checkpoint import Checkpoint, optimizer_from_flat, optimizer_to_flat
from skelgen.dataio.clip import MotionClip, NormStats
from skelgen.dataio.dataset import (
    augment_trajectory,
    balance_styles,
    compute_norm_stats,
    label_foot_contacts,
    normalize_root,
    rotate_ground,
    window_starts,
)
from skelgen.dataio.clip import TrajectorySignal
from skelgen.diffusion import DiffusionSchedule, make_schedule, q_sample
from skelgen.losses import (
    angular_velocity_loss,
    denormalize_root,
    diffusion_loss,
    foot_contact_loss,
    global_position_loss,
    global_velocity_loss,
)
from skelgen.model import Denoiser, DenoiserConfig
from skelgen.skeleton import SkeletonTopology

log = logging.getLogger(__name__)

LOSS_NAMES = ("loss", "L_d", "L_av", "L_gp", "L_vgp", "L_foot")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_d: float = 1.0
    w_av: float = 1.0
    w_gp: float = 1.0
    w_vgp: float = 1.0
    w_foot: float = 1.0

    def __post_init__(self):
        if self.w_d <= 0:
            raise ValueError("w_d must be positive")
        if min(self.w_av, self.w_gp, self.w_vgp, self.w_foot) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class TrainConfig:
    steps: int = 34000
    batch_size: int = 32
    lr: float = 1e-4
    gamma: float = 0.9999
    log_every: int = 100
    ckpt_every: int = 1000
    val_every: int = 1000
    val_batches: int = 4
    p_drop_style: float = 0.1
    p_drop_past: float = 0.5
    p_smooth: float = 0.5
    p_rotate: float = 0.5
    smooth_sigma: float = 2.0
    balance_styles: bool = True
    diffusion_kind: str = "cosine"
    diffusion_steps: int = 50
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0


# --- data ------------------------------------------------------------------------


@dataclass
class SkeletonGroup:
    """All windows of one skeleton. Clip root positions are normalized."""

    name: str
    topology: SkeletonTopology
    roots: list[np.ndarray]
    rots: list[np.ndarray]
    contacts: list[np.ndarray]
    styles: np.ndarray  # per window
    index: np.ndarray  # (n_windows, 2) -> (clip, start)

    def __len__(self):
        return len(self.index)


class MotionDataset:
    """Windowed training data grouped by skeleton.

    Args:
        clips: clips in meters; each clip's ``topology`` must carry toe joints.
        group_names: dataset name per clip; clips of one group share a skeleton.
        stats: normalization stats, or None for identity (normalization off).
    """

    def __init__(
        self,
        clips: Sequence[MotionClip],
        group_names: Sequence[str],
        stats: NormStats | None,
        F: int,
        F_past: int,
        stride: int,
        contact_height: float = 0.05,
        contact_speed: float = 0.01,
    ):
        self.F, self.F_past, self.stride = F, F_past, stride
        self.stats = stats if stats is not None else NormStats.identity()
        self.groups: dict[str, SkeletonGroup] = {}
        for clip, gname in zip(clips, group_names):
            g = self.groups.get(gname)
            if g is None:
                g = SkeletonGroup(gname, clip.topology, [], [], [], np.zeros(0, int), np.zeros((0, 2), int))
                self.groups[gname] = g
            elif g.topology.signature() != clip.topology.signature():
                raise ValueError(f"group {gname!r} mixes skeletons")
            contact = label_foot_contacts(clip, height=contact_height, speed=contact_speed)
            ci = len(g.roots)
            g.roots.append(normalize_root(clip.root_pos, self.stats))
            g.rots.append(clip.joint_rot)
            g.contacts.append(contact)
            starts = window_starts(clip.num_frames, F, F_past, stride)
            g.index = np.concatenate([g.index, np.stack([np.full(len(starts), ci), starts], 1)])
            g.styles = np.concatenate([g.styles, np.full(len(starts), clip.style_id)])
        for name in [n for n, g in self.groups.items() if len(g) == 0]:
            log.warning("group %s has no clip long enough for a window", name)
            del self.groups[name]

    @property
    def num_windows(self) -> int:
        return sum(len(g) for g in self.groups.values())

    def gather(self, group: str, rows: np.ndarray) -> dict:
        g = self.groups[group]
        F, Fp = self.F, self.F_past
        out = {k: [] for k in ("past_root", "past_rot", "cur_root", "cur_rot", "contact", "style")}
        for r in rows:
            ci, s = g.index[r]
            c = s + Fp
            out["past_root"].append(g.roots[ci][s:c])
            out["past_rot"].append(g.rots[ci][s:c])
            out["cur_root"].append(g.roots[ci][c : c + F])
            out["cur_rot"].append(g.rots[ci][c : c + F])
            out["contact"].append(g.contacts[ci][c : c + F])
            out["style"].append(g.styles[r])
        batch = {k: np.stack(v) for k, v in out.items()}
        batch["traj_pos"] = batch["cur_root"][:, :, [0, 2]].copy()
        batch["traj_rot"] = batch["cur_rot"][:, :, 0].copy()
        return batch


def augment_batch(batch: dict, stats: NormStats, rng: np.random.Generator, p_smooth, p_rotate, sigma):
    """Per-sample yaw rotation of the whole window (motion and path) and path smoothing.

    Rotation happens in meters about the world origin so the target motion
    stays consistent with the rotated trajectory.
    """
    B = batch["cur_root"].shape[0]
    for b in range(B):
        if rng.random() < p_rotate:
            theta = rng.uniform(0.0, 2.0 * np.pi)
            for rk, qk in (("past_root", "past_rot"), ("cur_root", "cur_rot")):
                if batch[rk].shape[1] == 0:
                    continue
                m = denorm_np(batch[rk][b], stats)
                xz, rr = rotate_ground(m[:, [0, 2]], batch[qk][b, :, 0], theta)
                m[:, 0], m[:, 2] = xz[:, 0], xz[:, 1]
                batch[rk][b] = normalize_root(m, stats)
                batch[qk][b, :, 0] = rr
            batch["traj_pos"][b] = batch["cur_root"][b][:, [0, 2]]
            batch["traj_rot"][b] = batch["cur_rot"][b, :, 0]
        if p_smooth > 0:
            tr = augment_trajectory(
                TrajectorySignal(batch["traj_pos"][b], batch["traj_rot"][b]), rng, p_smooth, 0.0, sigma
            )
            batch["traj_pos"][b] = tr.positions
    return batch


def denorm_np(p, stats):
    return (np.asarray(p) + 1.0) * 0.5 * (stats.max - stats.min) + stats.min


def to_tensors(batch: dict, dtype=torch.float32) -> dict:
    out = {}
    for k, v in batch.items():
        if k == "style":
            out[k] = torch.as_tensor(v, dtype=torch.long)
        elif k == "contact":
            out[k] = torch.as_tensor(v, dtype=torch.bool)
        else:
            out[k] = torch.as_tensor(np.ascontiguousarray(v), dtype=dtype)
    return out


# --- objective ----------------------------------------------------------------------


def sample_dropout(B: int, generator: torch.Generator, p_style: float, p_past: float):
    """(per-sample style-drop mask, whole-batch past-drop flag)."""
    drop_style = torch.rand(B, generator=generator) < p_style
    drop_past = bool(torch.rand((), generator=generator) < p_past)
    return drop_style, drop_past


def total_loss(
    batch: dict,
    model: Denoiser,
    schedule: DiffusionSchedule,
    weights: LossWeights,
    topology: SkeletonTopology,
    stats: NormStats,
    generator: torch.Generator,
    p_drop_style: float = 0.1,
    p_drop_past: float = 0.5,
    dropout_generator: torch.Generator | None = None,
):
    """Weighted sum of the diffusion and auxiliary losses for one same-skeleton batch.

    ``batch`` holds tensors from :func:`to_tensors`. Returns the scalar loss and
    a dict of float components.
    """
    dropout_generator = dropout_generator or generator
    cur_root, cur_rot = batch["cur_root"], batch["cur_rot"]
    B = cur_root.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    drop_style, drop_past = sample_dropout(B, dropout_generator, p_drop_style, p_drop_past)
    style = torch.where(drop_style, torch.full_like(batch["style"], model.cfg.null_style_id), batch["style"])
    eps_root = torch.randn(cur_root.shape, generator=generator, dtype=cur_root.dtype)
    eps_rot = torch.randn(cur_rot.shape, generator=generator, dtype=cur_rot.dtype)
    noisy_root = q_sample(cur_root, t, eps_root, schedule)
    noisy_rot = q_sample(cur_rot, t, eps_rot, schedule)
    past_root = None if drop_past else batch["past_root"]
    past_rot = None if drop_past else batch["past_rot"]
    root_hat, rot_hat = model(
        noisy_root, noisy_rot, past_root, past_rot, t, style, batch["traj_pos"], batch["traj_rot"], topology
    )
    # velocity terms also cover the step from the last clean past frame into the window
    v_root_hat, v_rot_hat, v_root, v_rot = root_hat, rot_hat, cur_root, cur_rot
    if past_root is not None and past_root.shape[1] > 0:
        v_root_hat, v_root = (torch.cat([past_root[:, -1:], x], dim=1) for x in (root_hat, cur_root))
        v_rot_hat, v_rot = (torch.cat([past_rot[:, -1:], x], dim=1) for x in (rot_hat, cur_rot))
    parts = {
        "L_d": diffusion_loss(root_hat, cur_root) + diffusion_loss(rot_hat, cur_rot),
        "L_av": angular_velocity_loss(v_rot_hat, v_rot),
        "L_gp": global_position_loss(root_hat, rot_hat, cur_root, cur_rot, topology, stats),
        "L_vgp": global_velocity_loss(v_root_hat, v_rot_hat, v_root, v_rot, topology, stats),
        "L_foot": foot_contact_loss(root_hat, rot_hat, batch["contact"], topology, stats),
    }
    w = weights
    loss = (
        w.w_d * parts["L_d"]
        + w.w_av * parts["L_av"]
        + w.w_gp * parts["L_gp"]
        + w.w_vgp * parts["L_vgp"]
        + w.w_foot * parts["L_foot"]
    )
    metrics = {k: float(v.detach()) for k, v in parts.items()}
    metrics["loss"] = float(loss.detach())
    metrics["style_dropped"] = float(drop_style.float().mean())
    metrics["past_dropped"] = float(drop_past)
    return loss, metrics


# --- loop --------------------------------------------------------------------------


def build_model(cfg: DenoiserConfig, seed: int, dtype=torch.float32) -> Denoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(cfg)
    return model.to(dtype)


class Trainer:
    def __init__(
        self,
        data: MotionDataset,
        model_cfg: DenoiserConfig,
        cfg: TrainConfig,
        style_table: Sequence[str] = (),
        run_config: dict | None = None,
        dtype=torch.float32,
    ):
        self.data = data
        self.cfg = cfg
        self.model_cfg = model_cfg
        self.style_table = list(style_table)
        self.run_config = run_config or {}
        self.dtype = dtype
        self.model = build_model(model_cfg, cfg.seed, dtype)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=cfg.lr)
        self.schedule = make_schedule(cfg.diffusion_kind, cfg.diffusion_steps)
        self.rng = np.random.default_rng(cfg.seed)
        self.noise_gen = torch.Generator().manual_seed(cfg.seed + 1)
        self.dropout_gen = torch.Generator().manual_seed(cfg.seed + 2)
        self.step_count = 0
        self._group_names = sorted(data.groups)
        sizes = np.array([len(data.groups[n]) for n in self._group_names], float)
        self._group_p = sizes / sizes.sum()
        self._window_p = {
            n: balance_styles(data.groups[n].styles) if cfg.balance_styles else None
            for n in self._group_names
        }

    def lr_at(self, step: int) -> float:
        return self.cfg.lr * self.cfg.gamma**step

    def sample_batch(self):
        gi = int(self.rng.choice(len(self._group_names), p=self._group_p))
        name = self._group_names[gi]
        g = self.data.groups[name]
        rows = self.rng.choice(len(g), size=self.cfg.batch_size, replace=True, p=self._window_p[name])
        batch = self.data.gather(name, rows)
        c = self.cfg
        if c.p_rotate > 0 or c.p_smooth > 0:
            batch = augment_batch(batch, self.data.stats, self.rng, c.p_smooth, c.p_rotate, c.smooth_sigma)
        return name, to_tensors(batch, self.dtype)

    def loss_for(self, name: str, batch: dict):
        return total_loss(
            batch,
            self.model,
            self.schedule,
            self.cfg.weights,
            self.data.groups[name].topology,
            self.data.stats,
            self.noise_gen,
            self.cfg.p_drop_style,
            self.cfg.p_drop_past,
            self.dropout_gen,
        )

    def step(self) -> dict:
        self.model.train()
        lr = self.lr_at(self.step_count)
        for g in self.opt.param_groups:
            g["lr"] = lr
        name, batch = self.sample_batch()
        loss, metrics = self.loss_for(name, batch)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at step {self.step_count} on group {name!r}: {metrics}"
            )
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.step_count += 1
        metrics.update(step=self.step_count, lr=lr, group=name)
        return metrics

    @torch.no_grad()
    def validate(self, data: MotionDataset) -> dict:
        """Mean loss components over a few fixed-seed batches per skeleton group."""
        self.model.eval()
        rng = np.random.default_rng(12345)
        gen = torch.Generator().manual_seed(12345)
        sums = {k: 0.0 for k in LOSS_NAMES}
        n = 0
        for name in sorted(data.groups):
            g = data.groups[name]
            if name not in self.data.groups:
                continue
            for _ in range(self.cfg.val_batches):
                rows = rng.choice(len(g), size=min(self.cfg.batch_size, len(g)), replace=False)
                batch = to_tensors(data.gather(name, rows), self.dtype)
                _, m = total_loss(
                    batch, self.model, self.schedule, self.cfg.weights, g.topology, data.stats, gen,
                    self.cfg.p_drop_style, self.cfg.p_drop_past,
                )
                for k in sums:
                    sums[k] += m[k]
                n += 1
        return {k: v / max(n, 1) for k, v in sums.items()}

    # -- persistence -------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model_config=self.model_cfg.to_dict(),
            weights={k: v.detach().clone().numpy() for k, v in self.model.state_dict().items()},
            norm_stats=self.data.stats.to_dict(),
            style_table=self.style_table,
            topologies={n: g.topology.to_dict() for n, g in self.data.groups.items()},
            step=self.step_count,
            optimizer=optimizer_to_flat(self.opt),
            rng={
                "numpy": self.rng.bit_generator.state,
                "torch": {
                    "noise": self.noise_gen.get_state().numpy().copy(),
                    "dropout": self.dropout_gen.get_state().numpy().copy(),
                },
            },
            run_config=self.run_config,
        )

    def restore(self, ckpt: Checkpoint) -> None:
        state = {k: torch.from_numpy(np.array(v)) for k, v in ckpt.weights.items()}
        self.model.load_state_dict(state)
        if ckpt.optimizer is not None:
            optimizer_from_flat(self.opt, ckpt.optimizer)
        if ckpt.rng.get("numpy"):
            self.rng.bit_generator.state = ckpt.rng["numpy"]
        t = ckpt.rng.get("torch", {})
        if "noise" in t:
            self.noise_gen.set_state(torch.from_numpy(np.array(t["noise"], dtype=np.uint8)))
        if "dropout" in t:
            self.dropout_gen.set_state(torch.from_numpy(np.array(t["dropout"], dtype=np.uint8)))
        self.step_count = int(ckpt.step)


def train_loop(
    data: MotionDataset,
    model_cfg: DenoiserConfig,
    cfg: TrainConfig,
    val_data: MotionDataset | None = None,
    resume: Checkpoint | None = None,
    on_log: Callable[[dict], None] | None = None,
    style_table: Sequence[str] = (),
    run_config: dict | None = None,
    trainer: Trainer | None = None,
) -> Iterator[Checkpoint]:
    """Run optimization, yielding a checkpoint every ``ckpt_every`` steps and at the end."""
    if data.num_windows == 0:
        raise TrainingError("training set has no windows")
    trainer = trainer or Trainer(data, model_cfg, cfg, style_table, run_config)
    if resume is not None:
        trainer.restore(resume)
    while trainer.step_count < cfg.steps:
        m = trainer.step()
        s = trainer.step_count
        if on_log and (s % cfg.log_every == 0 or s == cfg.steps):
            on_log({"split": "train", **{k: m[k] for k in LOSS_NAMES}, "step": s, "lr": m["lr"]})
        if val_data is not None and on_log and val_data.num_windows and s % cfg.val_every == 0:
            on_log({"split": "val", **trainer.validate(val_data), "step": s, "lr": trainer.lr_at(s)})
        if s % cfg.ckpt_every == 0 or s == cfg.steps:
            yield trainer.checkpoint()


def load_model(ckpt: Checkpoint, dtype=torch.float32) -> Denoiser:
    model = Denoiser(DenoiserConfig.from_dict(ckpt.model_config))
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in ckpt.weights.items()})
    return model.to(dtype).eval()
