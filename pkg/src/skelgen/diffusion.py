"""Noise schedules, forward noising, DDIM sampling and classifier-free guidance.

All samplers predict the clean sample (x0-prediction). Functions accept numpy
arrays or torch tensors interchangeably where noted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch


class ScheduleError(ValueError):
    pass


COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class DiffusionSchedule:
    kind: str
    T: int
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] == 1

    def __post_init__(self):
        a = np.asarray(self.alpha_bar, dtype=np.float64)
        a.setflags(write=False)
        object.__setattr__(self, "alpha_bar", a)

    def coef(self, t):
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) for an int or an integer tensor."""
        if isinstance(t, torch.Tensor):
            a = torch.tensor(self.alpha_bar, device=t.device)[t]
            return a.sqrt(), (1.0 - a).sqrt()
        a = float(self.alpha_bar[int(t)])
        return math.sqrt(a), math.sqrt(1.0 - a)


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 2.5
    null_style_id: int = -1

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")


def make_schedule(kind: str = "cosine", T: int = 50) -> DiffusionSchedule:
    """Cumulative signal coefficients ``alpha_bar[0..T]``.

    ``cosine``: alpha_bar(t) = f(t) / f(0), f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2), s = 0.008.
    ``linear``: betas evenly spaced in [1e-4, 0.02].
    """
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if kind == "cosine":
        s = COSINE_OFFSET
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos(((t / T + s) / (1.0 + s)) * np.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        alpha_bar[0] = 1.0
        # f(T) is ~1e-35 rather than 0; keep strictly positive
        alpha_bar = np.maximum(alpha_bar, 1e-12)
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.02, T)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(kind, T, alpha_bar)


def q_sample(x0, t, eps, schedule: DiffusionSchedule):
    """x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps.

    ``t`` may be an int or, for tensors, a (B,) integer tensor broadcast over
    the leading axis.
    """
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        sa, sb = schedule.coef(t)
        view = (-1,) + (1,) * (x0.ndim - 1)
        return sa.to(x0.dtype).view(view) * x0 + sb.to(x0.dtype).view(view) * eps
    if not 0 <= int(t) <= schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T}]")
    sa, sb = schedule.coef(t)
    return sa * x0 + sb * eps


def cfg_combine(x0_cond, x0_uncond, w: float):
    """Guided x0 estimate: uncond + w * (cond - uncond)."""
    return x0_uncond + w * (x0_cond - x0_uncond)


def ddim_step(x_t, x0_hat, t: int, t_prev: int, schedule: DiffusionSchedule):
    """Deterministic (eta = 0) DDIM update from step t to t_prev."""
    if t <= 0:
        raise ValueError("cannot step from t = 0")
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev must be in [0, {t}), got {t_prev}")
    sa, sb = schedule.coef(t)
    eps_hat = (x_t - sa * x0_hat) / sb
    sa_p, sb_p = schedule.coef(t_prev)
    return sa_p * x0_hat + sb_p * eps_hat


def sampling_timesteps(T: int, n_steps: int) -> list[int]:
    """Evenly spaced descending timesteps from T to 0 (n_steps + 1 entries)."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in [1, {T}], got {n_steps}")
    ts = np.round(np.linspace(T, 0, n_steps + 1)).astype(int)
    return [int(t) for t in ts]


def ddim_sample_loop(
    denoise_fn: Callable,
    condition,
    schedule: DiffusionSchedule,
    n_steps: int,
    shape,
    generator: torch.Generator | None = None,
    guidance_scale: float = 1.0,
    uncond_condition=None,
    dtype=torch.float32,
    noise: torch.Tensor | None = None,
    trace: list | None = None,
):
    """Sample x0 by DDIM from unit Gaussian noise.

    ``denoise_fn(x_t, t, condition)`` returns an x0 estimate. When the guidance
    scale differs from 1 and ``uncond_condition`` is given, each step combines
    conditional and unconditional estimates.
    """
    x = noise if noise is not None else torch.randn(shape, generator=generator, dtype=dtype)
    ts = sampling_timesteps(schedule.T, n_steps)
    guided = guidance_scale != 1.0 and uncond_condition is not None
    for t, t_prev in zip(ts[:-1], ts[1:]):
        if trace is not None:
            trace.append(t)
        x0 = denoise_fn(x, t, condition)
        if guided:
            x0 = cfg_combine(x0, denoise_fn(x, t, uncond_condition), guidance_scale)
        x = ddim_step(x, x0, t, t_prev, schedule)
    return x
