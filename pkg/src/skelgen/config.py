"""Layered run configuration with flat dotted keys.

Values resolve in order: built-in defaults, a JSON or TOML file, ``SKELGEN_``
environment variables, then explicit overrides (usually command-line flags).
Environment names map ``SKELGEN_MODEL__BASE_CHANNELS`` to ``model.base_channels``.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

ENV_PREFIX = "SKELGEN_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    default: Any
    help: str


KEYS: dict[str, Key] = {
    "seed": Key(0, "master seed for splits, initialization, sampling and augmentation"),
    # data
    "data.F": Key(56, "current frames per window"),
    "data.F_past": Key(8, "past-context frames per window"),
    "data.stride": Key(8, "window stride in frames when caching training windows"),
    "data.scale": Key(1.0, "multiplier from BVH units to meters (0.01 for centimeter files)"),
    "data.frame_rate": Key(30.0, "frame rate of generated motion"),
    "data.toe_names": Key("", "comma-separated toe joint names; empty guesses from joint names"),
    "data.normalize": Key(True, "min-max normalize root positions to [-1, 1]"),
    "data.contact_height": Key(0.05, "toe height below which a frame may be a contact (m)"),
    "data.contact_speed": Key(0.01, "toe speed below which a frame may be a contact (m/frame)"),
    "data.p_smooth": Key(0.5, "probability of Gaussian-smoothing a training trajectory"),
    "data.p_rotate": Key(0.5, "probability of rotating a training window about the vertical axis"),
    "data.smooth_sigma": Key(2.0, "trajectory smoothing sigma in frames"),
    "data.balance_styles": Key(True, "sample windows inversely to their style frequency"),
    # model
    "model.base_channels": Key(64, "channels at the first UNet level; doubled per level"),
    "model.n_levels": Key(3, "UNet levels; the time axis halves between levels"),
    "model.heads": Key(4, "attention heads"),
    "model.groupnorm_groups": Key(8, "group-norm groups"),
    "model.style_embed_dim": Key(128, "style embedding width"),
    "model.time_embed_dim": Key(128, "diffusion-step embedding width"),
    "model.traj_embed_dim": Key(128, "trajectory token width"),
    "model.ff_mult": Key(2, "feed-forward expansion factor"),
    "model.positional_encoding": Key(True, "add joint depth and index encodings to joint tokens"),
    "model.merged_attention": Key(False, "one attention over time and joints instead of two factored passes"),
    "model.p_drop_style": Key(0.1, "per-sample probability of dropping the style condition"),
    "model.p_drop_past": Key(0.5, "per-batch probability of dropping past frames"),
    # diffusion
    "diffusion.kind": Key("cosine", "noise schedule: cosine or linear"),
    "diffusion.train_steps": Key(50, "diffusion steps T used in training"),
    "diffusion.infer_steps": Key(4, "DDIM steps at generation time"),
    "diffusion.cfg_scale": Key(2.5, "classifier-free guidance scale"),
    # loss
    "loss.w_d": Key(1.0, "weight of the reconstruction loss"),
    "loss.w_av": Key(1.0, "weight of the angular velocity loss"),
    "loss.w_gp": Key(1.0, "weight of the global position loss"),
    "loss.w_vgp": Key(1.0, "weight of the global velocity loss"),
    "loss.w_foot": Key(1.0, "weight of the foot contact loss"),
    # optim
    "optim.steps": Key(34000, "optimizer steps"),
    "optim.batch_size": Key(32, "windows per batch"),
    "optim.lr": Key(1e-4, "initial Adam learning rate"),
    "optim.gamma": Key(0.9999, "per-step exponential learning-rate decay"),
    "optim.log_every": Key(100, "steps between metrics log rows"),
    "optim.ckpt_every": Key(1000, "steps between checkpoints"),
    "optim.val_every": Key(1000, "steps between validation passes"),
    "optim.val_batches": Key(4, "validation batches per skeleton"),
    # metrics
    "metrics.penetration_eps": Key(0.005, "toe depth below the ground counted as penetration (m)"),
    "metrics.slide_height": Key(0.01, "toe height below which horizontal motion counts as sliding (m)"),
    "metrics.window": Key(56, "frames per window for classifier features"),
    "metrics.classifier_hidden": Key(64, "hidden channels of the feature classifier"),
    "metrics.feature_dim": Key(64, "classifier feature size used for FID"),
    "metrics.classifier_epochs": Key(200, "classifier training epochs"),
}


def _coerce(key: str, value: Any) -> Any:
    default = KEYS[key].default
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            if isinstance(value, (bool, int)) and value in (0, 1):
                return bool(value)
            raise ValueError(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot use {value!r} as {type(default).__name__}") from None


def _flatten(d: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        name = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, name + "."))
        else:
            out[name] = v
    return out


def read_config_file(path) -> dict[str, Any]:
    """Flat key map from a ``.json`` or ``.toml`` file (nested tables or dotted keys)."""
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix == ".json":
            raw = json.loads(path.read_text())
        elif suffix == ".toml":
            raw = tomllib.loads(path.read_text())
        else:
            raise ConfigError(f"{path}: config must end in .json or .toml")
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: top level must be a table")
    return _flatten(raw)


def env_overrides(environ: Mapping[str, str]) -> dict[str, str]:
    lookup = {k.lower(): k for k in KEYS}
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX):].replace("__", ".").lower()
        if dotted not in lookup:
            raise ConfigError(f"unknown config key from environment variable {name}")
        out[lookup[dotted]] = value
    return out


class RunConfig(dict):
    """Resolved configuration: every known key mapped to a typed value."""

    def section(self, ns: str) -> dict[str, Any]:
        p = ns + "."
        return {k[len(p):]: v for k, v in self.items() if k.startswith(p)}

    def to_json(self) -> str:
        return json.dumps(dict(sorted(self.items())), indent=2, sort_keys=True)


def resolve_config(
    path=None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Merge defaults, file, environment and overrides, rejecting unknown keys."""
    layers = []
    if path is not None:
        layers.append(read_config_file(path))
    layers.append(env_overrides(os.environ if environ is None else environ))
    layers.append(dict(overrides or {}))
    cfg = RunConfig((k, spec.default) for k, spec in KEYS.items())
    for layer in layers:
        unknown = sorted(set(layer) - set(KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in layer.items():
            cfg[k] = _coerce(k, v)
    return cfg
