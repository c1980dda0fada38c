"""Single-file archive: a JSON header followed by named raw array blobs.

Layout::

    b"SKELGEN1" | uint64 LE header length | header JSON (UTF-8) | blobs

The header holds ``meta`` (arbitrary JSON) and ``tensors``, a list of
``{name, dtype, shape, offset, nbytes}`` records with offsets relative to the
start of the blob section. All blobs are little-endian. Output is
byte-for-byte deterministic for equal inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SKELGEN1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    a = np.asarray(x)
    if a.dtype.byteorder == ">":
        a = a.astype(a.dtype.newbyteorder("<"))
    return np.ascontiguousarray(a)


def write_archive(path, meta: dict, arrays: dict) -> None:
    records, blobs, offset = [], [], 0
    for name in arrays:
        a = _to_numpy(arrays[name])
        data = a.tobytes()
        records.append(
            {"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(data)}
        )
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta, "tensors": records}, sort_keys=True, separators=(",", ":"))
    hb = header.encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a skelgen archive")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    base = 16 + hlen
    arrays = {}
    for rec in header["tensors"]:
        start = base + rec["offset"]
        buf = raw[start : start + rec["nbytes"]]
        if len(buf) != rec["nbytes"]:
            raise CheckpointError(f"{path}: truncated blob {rec['name']!r}")
        arrays[rec["name"]] = np.frombuffer(buf, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"]).copy()
    return header["meta"], arrays


@dataclass
class Checkpoint:
    """Everything needed to resume training or run generation."""

    model_config: dict
    weights: dict[str, np.ndarray]
    norm_stats: dict
    style_table: list[str]
    topologies: dict[str, dict]
    step: int = 0
    optimizer: dict | None = None  # {"param_groups": [...], "state": {name: array}}
    rng: dict = field(default_factory=dict)  # {"numpy": state, "torch": {role: uint8 array}}
    run_config: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def save(self, path) -> None:
        arrays = {f"model/{k}": v for k, v in self.weights.items()}
        meta = {
            "format_version": self.format_version,
            "model_config": self.model_config,
            "norm_stats": self.norm_stats,
            "style_table": list(self.style_table),
            "topologies": self.topologies,
            "step": int(self.step),
            "run_config": self.run_config,
            "rng_numpy": self.rng.get("numpy"),
            "rng_torch": sorted(self.rng.get("torch", {})),
        }
        for role, state in self.rng.get("torch", {}).items():
            arrays[f"rng/{role}"] = state
        if self.optimizer is not None:
            meta["optimizer_param_groups"] = self.optimizer["param_groups"]
            for k, v in self.optimizer["state"].items():
                arrays[f"optim/{k}"] = v
        write_archive(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        meta, arrays = read_archive(path)
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version!r}")
        weights = {k[6:]: v for k, v in arrays.items() if k.startswith("model/")}
        optimizer = None
        if "optimizer_param_groups" in meta:
            optimizer = {
                "param_groups": meta["optimizer_param_groups"],
                "state": {k[6:]: v for k, v in arrays.items() if k.startswith("optim/")},
            }
        rng = {"numpy": meta.get("rng_numpy"), "torch": {r: arrays[f"rng/{r}"] for r in meta.get("rng_torch", [])}}
        return cls(
            model_config=meta["model_config"],
            weights=weights,
            norm_stats=meta["norm_stats"],
            style_table=meta["style_table"],
            topologies=meta["topologies"],
            step=meta["step"],
            optimizer=optimizer,
            rng=rng,
            run_config=meta.get("run_config", {}),
        )


def optimizer_to_flat(opt: torch.optim.Optimizer) -> dict:
    sd = opt.state_dict()
    state = {}
    for idx, s in sd["state"].items():
        for key, val in s.items():
            state[f"{idx}/{key}"] = val
    return {"param_groups": sd["param_groups"], "state": state}


def optimizer_from_flat(opt: torch.optim.Optimizer, flat: dict) -> None:
    state: dict = {}
    for name, val in flat["state"].items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(val))
    groups = [dict(g) for g in flat["param_groups"]]
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})
