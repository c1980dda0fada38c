"""Prepared-dataset cache: parsed clips, split assignment, style table and stats in one archive."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from skelgen.checkpoint import read_archive, write_archive
from skelgen.dataio.clip import MotionClip, NormStats
from skelgen.dataio.dataset import window_starts
from skelgen.skeleton import SkeletonTopology

CACHE_VERSION = 1


class CacheError(ValueError):
    pass


@dataclass
class CachedClip:
    clip: MotionClip  # meters
    dataset: str
    style: str  # global "dataset:style" name
    split: str
    source: str


@dataclass
class DatasetCache:
    items: list[CachedClip]
    style_table: list[str]
    stats: NormStats
    F: int
    F_past: int
    stride: int
    frame_rate: float = 30.0
    extra: dict = field(default_factory=dict)

    def split(self, name: str) -> list[CachedClip]:
        return [it for it in self.items if it.split == name]

    def topologies(self) -> dict[str, SkeletonTopology]:
        return {it.dataset: it.clip.topology for it in self.items}

    def save(self, path) -> None:
        topos = {name: t.to_dict() for name, t in sorted(self.topologies().items())}
        clips, arrays = [], {}
        for i, it in enumerate(self.items):
            c = it.clip
            clips.append({
                "dataset": it.dataset, "style": it.style, "split": it.split, "source": it.source,
                "name": c.name, "frame_rate": c.frame_rate, "num_frames": c.num_frames,
            })
            arrays[f"clip{i:05d}.root_pos"] = c.root_pos
            arrays[f"clip{i:05d}.joint_rot"] = c.joint_rot
            arrays[f"clip{i:05d}.window_starts"] = window_starts(c.num_frames, self.F, self.F_past, self.stride)
        meta = {
            "cache_version": CACHE_VERSION,
            "style_table": self.style_table,
            "norm_stats": self.stats.to_dict(),
            "topologies": topos,
            "clips": clips,
            "windows": {"F": self.F, "F_past": self.F_past, "stride": self.stride},
            "frame_rate": self.frame_rate,
            "extra": self.extra,
        }
        write_archive(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "DatasetCache":
        path = Path(path)
        if path.is_dir():
            path = path / "dataset.cache"
        if not path.exists():
            raise CacheError(f"{path}: no dataset cache; run `skelgen prepare` first")
        meta, arrays = read_archive(path)
        if meta.get("cache_version") != CACHE_VERSION:
            raise CacheError(f"{path}: unsupported cache version {meta.get('cache_version')}")
        topos = {k: SkeletonTopology.from_dict(v) for k, v in meta["topologies"].items()}
        table = list(meta["style_table"])
        items = []
        for i, rec in enumerate(meta["clips"]):
            clip = MotionClip(
                topos[rec["dataset"]],
                rec["frame_rate"],
                arrays[f"clip{i:05d}.root_pos"],
                arrays[f"clip{i:05d}.joint_rot"],
                style_id=table.index(rec["style"]),
                name=rec["name"],
            )
            items.append(CachedClip(clip, rec["dataset"], rec["style"], rec["split"], rec["source"]))
        w = meta["windows"]
        return cls(
            items, table, NormStats.from_dict(meta["norm_stats"]), w["F"], w["F_past"], w["stride"],
            meta.get("frame_rate", 30.0), meta.get("extra", {}),
        )
