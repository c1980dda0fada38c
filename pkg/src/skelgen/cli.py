"""``skelgen`` command line: prepare, train, generate, blend, evaluate."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections import Counter, defaultdict
from pathlib import Path

import numpy as np
import torch

from skelgen.checkpoint import Checkpoint, CheckpointError
from skelgen.config import KEYS, ConfigError, RunConfig, resolve_config
from skelgen.dataio import (
    BVHParseError,
    ManifestError,
    MotionClip,
    NormStats,
    build_style_table,
    compute_norm_stats,
    extract_trajectory,
    read_bvh,
    read_manifest,
    stratified_split,
)
from skelgen.dataio.cache import CachedClip, CacheError, DatasetCache
from skelgen.dataio.dataset import LabelingError, detect_toes
from skelgen.generation import (
    GenerationError,
    GenerationRequest,
    MotionGenerator,
    export_generation,
    read_trajectory_csv,
    request_from_dict,
)
from skelgen.metrics import (
    MetricsError,
    MotionClassifier,
    evaluate_clips,
    position_windows,
    train_fid_classifier,
    trajectory_error,
)
from skelgen.dataio.bvh import BVHExportError
from skelgen.diffusion import ScheduleError
from skelgen.model import DenoiserConfig, ModelConfigError
from skelgen.skeleton import SkeletonConfigError, TopologyError
from skelgen.training import LOSS_NAMES, LossWeights, MotionDataset, TrainConfig, TrainingError, train_loop

log = logging.getLogger("skelgen")

SPLITS = ("train", "val", "test")


class CLIError(RuntimeError):
    pass


# --- config plumbing ------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON or TOML config file (flat dotted or nested keys)")
    p.add_argument("--out", type=Path, required=True, help="output directory or file")
    g = p.add_argument_group("config keys (override file and SKELGEN_* environment values)")
    for key, spec in KEYS.items():
        g.add_argument(f"--{key}", dest=key, default=None, metavar=type(spec.default).__name__.upper(),
                       help=f"{spec.help} (default: {spec.default})")


def _run_config(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in KEYS if getattr(args, k, None) is not None}
    cfg = resolve_config(args.config, overrides)
    print("resolved config:\n" + cfg.to_json(), file=sys.stderr)
    return cfg


def _toe_names(cfg: RunConfig):
    names = [s.strip() for s in cfg["data.toe_names"].split(",") if s.strip()]
    return names or None


def _with_toes(clip: MotionClip, toe_names) -> MotionClip:
    """Attach toe joints: configured names present in this skeleton, else a guess from joint names."""
    topo = clip.topology
    ids = [topo.joint_names.index(n) for n in (toe_names or ()) if n in topo.joint_names]
    ids = ids or list(detect_toes(topo))
    return clip.replace(topology=topo.with_toes(ids)) if ids else clip


def _model_config(cfg: RunConfig, style_count: int) -> DenoiserConfig:
    m = cfg.section("model")
    return DenoiserConfig(
        base_channels=m["base_channels"],
        n_levels=m["n_levels"],
        heads=m["heads"],
        groupnorm_groups=m["groupnorm_groups"],
        style_count=style_count,
        style_embed_dim=m["style_embed_dim"],
        time_embed_dim=m["time_embed_dim"],
        traj_embed_dim=m["traj_embed_dim"],
        F=cfg["data.F"],
        F_past=cfg["data.F_past"],
        ff_mult=m["ff_mult"],
        positional_encoding=m["positional_encoding"],
        merged_attention=m["merged_attention"],
    )


def _train_config(cfg: RunConfig) -> TrainConfig:
    o = cfg.section("optim")
    return TrainConfig(
        steps=o["steps"],
        batch_size=o["batch_size"],
        lr=o["lr"],
        gamma=o["gamma"],
        log_every=o["log_every"],
        ckpt_every=o["ckpt_every"],
        val_every=o["val_every"],
        val_batches=o["val_batches"],
        p_drop_style=cfg["model.p_drop_style"],
        p_drop_past=cfg["model.p_drop_past"],
        p_smooth=cfg["data.p_smooth"],
        p_rotate=cfg["data.p_rotate"],
        smooth_sigma=cfg["data.smooth_sigma"],
        balance_styles=cfg["data.balance_styles"],
        diffusion_kind=cfg["diffusion.kind"],
        diffusion_steps=cfg["diffusion.train_steps"],
        weights=LossWeights(**cfg.section("loss")),
        seed=cfg["seed"],
    )


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- prepare ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    cfg = _run_config(args)
    records = read_manifest(args.manifest)
    toe_names = _toe_names(cfg)
    clips, errors = [], []
    for rec in records:
        path = Path(rec.path)
        try:
            clip = _with_toes(read_bvh(path, scale=cfg["data.scale"])[1], toe_names)
            if not clip.topology.toe_joint_ids:
                raise LabelingError("no toe joints found; set data.toe_names")
            clip.validate()
        except (OSError, ValueError) as exc:
            errors.append(f"{path}: {exc}")
            continue
        clips.append((rec, clip))
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    if errors:
        return 1

    by_dataset: dict[str, object] = {}
    for rec, clip in clips:
        prev = by_dataset.setdefault(rec.dataset_name, clip.topology)
        if prev.signature() != clip.topology.signature():
            print(f"error: dataset {rec.dataset_name!r} mixes skeletons ({rec.path})", file=sys.stderr)
            return 1

    table = build_style_table(records)
    labels = [f"{r.dataset_name}:{r.style_name}" for r, _ in clips]
    if all(r.split for r, _ in clips):
        splits = [r.split for r, _ in clips]
    else:
        auto = stratified_split(labels, seed=cfg["seed"])
        splits = [r.split or s for (r, _), s in zip(clips, auto)]
    bad = sorted({s for s in splits if s not in SPLITS})
    if bad:
        print(f"error: unknown split names {bad}", file=sys.stderr)
        return 1

    root = args.manifest.resolve().parent
    items = [
        CachedClip(
            clip.replace(style_id=table.index(lab), name=Path(rec.path).stem),
            rec.dataset_name, lab, s, os.path.relpath(Path(rec.path).resolve(), root),
        )
        for (rec, clip), lab, s in zip(clips, labels, splits)
    ]
    train_clips = [it.clip for it in items if it.split == "train"]
    if not train_clips:
        print("error: the training split is empty", file=sys.stderr)
        return 1
    stats = compute_norm_stats(train_clips) if cfg["data.normalize"] else NormStats.identity()
    cache = DatasetCache(items, table, stats, cfg["data.F"], cfg["data.F_past"], cfg["data.stride"],
                         cfg["data.frame_rate"])
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    cache.save(out / "dataset.cache")
    _write_json(out / "stats.json", stats.to_dict())
    _write_json(out / "splits.json", {it.source: it.split for it in items})
    _write_json(out / "config.json", dict(cfg))

    print(f"{'split':<6} {'clips':>6} {'frames':>8}  styles")
    for s in SPLITS:
        part = cache.split(s)
        styles = Counter(it.style for it in part)
        desc = ", ".join(f"{k}={v}" for k, v in sorted(styles.items())) or "-"
        print(f"{s:<6} {len(part):>6} {sum(it.clip.num_frames for it in part):>8}  {desc}")
    return 0


# --- train -----------------------------------------------------------------------------


def _dataset(cache: DatasetCache, split: str, cfg: RunConfig, stats: NormStats) -> MotionDataset:
    part = cache.split(split)
    return MotionDataset(
        [it.clip for it in part], [it.dataset for it in part], stats,
        cfg["data.F"], cfg["data.F_past"], cfg["data.stride"],
        cfg["data.contact_height"], cfg["data.contact_speed"],
    )


def cmd_train(args) -> int:
    cfg = _run_config(args)
    cache = DatasetCache.load(args.data)
    stats = cache.stats if cfg["data.normalize"] else NormStats.identity()
    train = _dataset(cache, "train", cfg, stats)
    val = _dataset(cache, "val", cfg, stats)
    model_cfg = _model_config(cfg, len(cache.style_table))
    tcfg = _train_config(cfg)
    resume = Checkpoint.load(args.resume) if args.resume else None

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", dict(cfg))
    cols = ["step", "split", *LOSS_NAMES, "lr"]
    mode = "a" if resume else "w"
    with open(out / "metrics.csv", mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        if not resume:
            writer.writeheader()

        def on_log(rec):
            writer.writerow({k: (f"{rec[k]:.8g}" if isinstance(rec[k], float) else rec[k]) for k in cols})
            fh.flush()
            if rec["split"] == "train":
                log.info("step %d loss %.5f lr %.3g", rec["step"], rec["loss"], rec["lr"])

        for ckpt in train_loop(train, model_cfg, tcfg, val, resume, on_log, cache.style_table, dict(cfg)):
            ckpt.save(out / f"step{ckpt.step:07d}.ckpt")
            ckpt.save(out / "last.ckpt")
    return 0


# --- generate / blend ---------------------------------------------------------------


def _generator(args, cfg: RunConfig) -> MotionGenerator:
    ckpt = Checkpoint.load(args.checkpoint)
    return MotionGenerator.from_checkpoint(
        ckpt, kind=cfg["diffusion.kind"], train_steps=cfg["diffusion.train_steps"],
        infer_steps=cfg["diffusion.infer_steps"],
    )


def _out_file(out: Path) -> Path:
    if out.suffix.lower() != ".bvh":
        out.mkdir(parents=True, exist_ok=True)
        return out / "generated.bvh"
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    cfg = _run_config(args)
    gen = _generator(args, cfg)
    raw = json.loads(args.request.read_text())
    raw.setdefault("seed", cfg["seed"])
    raw.setdefault("cfg_scale", cfg["diffusion.cfg_scale"])
    req = request_from_dict(raw, gen, args.request.parent, scale=cfg["data.scale"])
    result = gen.generate(req)
    path = export_generation(result.clip, _out_file(args.out))
    print(f"wrote {path} ({result.clip.num_frames} frames)")
    return 0


def parse_blend_weights(spec: str) -> dict[str, float]:
    """``A=0.35,B=0.65`` -> {"A": 0.35, "B": 0.65}."""
    out = {}
    for part in spec.split(","):
        name, sep, w = part.rpartition("=")
        if not sep or not name.strip():
            raise CLIError(f"bad style weight {part!r}; expected NAME=WEIGHT")
        try:
            out[name.strip()] = float(w)
        except ValueError:
            raise CLIError(f"bad weight in {part!r}") from None
    return out


def cmd_blend(args) -> int:
    cfg = _run_config(args)
    gen = _generator(args, cfg)
    weights = {gen.style_id(k): v for k, v in parse_blend_weights(args.styles).items()}
    traj = read_trajectory_csv(args.trajectory)
    seed_motion = None
    if args.seed_bvh:
        _, seed_motion = read_bvh(args.seed_bvh, scale=cfg["data.scale"])
        seed_motion = seed_motion.replace(topology=gen.topology(args.skeleton)[1])
    req = GenerationRequest([weights], traj, seed_motion, cfg["diffusion.cfg_scale"], cfg["seed"], args.skeleton)
    result = gen.generate(req)
    path = export_generation(result.clip, _out_file(args.out))
    print(f"wrote {path} ({result.clip.num_frames} frames)")
    return 0


# --- evaluate -------------------------------------------------------------------------


def _bvh_set(paths, cfg) -> list[tuple[MotionClip, str]]:
    """Clips from files or directories, labeled by their parent directory name."""
    files = []
    for p in paths:
        p = Path(p)
        files.extend(sorted(p.rglob("*.bvh")) if p.is_dir() else [p])
    if not files:
        raise CLIError(f"no BVH files under {[str(p) for p in paths]}")
    out = []
    for f in files:
        clip = _with_toes(read_bvh(f, scale=cfg["data.scale"])[1], _toe_names(cfg))
        out.append((clip, f.parent.name))
    return out


def _classifier(reference, labels, cfg, num_joints) -> MotionClassifier:
    """Style classifier fit on the reference windows; seeded random features if only one style."""
    w = cfg["metrics.window"]
    hidden, dim, seed = cfg["metrics.classifier_hidden"], cfg["metrics.feature_dim"], cfg["seed"]
    windows, wl = [], []
    for clip, lab in zip(reference, labels):
        if clip.num_frames >= w:
            x = position_windows([clip], w)
            windows.append(x)
            wl.extend([lab] * len(x))
    if windows and len(set(wl)) >= 2:
        return train_fid_classifier(np.concatenate(windows), wl, hidden, dim,
                                    cfg["metrics.classifier_epochs"], seed=seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MotionClassifier(num_joints, 1, hidden, dim).eval()


def _evaluate_group(gen_clips, ref_clips, ref_labels, cfg, extra_rows=()):
    clf = None
    if ref_clips:
        w = cfg["metrics.window"]
        if min(c.num_frames for c in list(gen_clips) + list(ref_clips)) < w:
            raise CLIError(f"clips shorter than metrics.window={w}")
        clf = _classifier(ref_clips, ref_labels, cfg, gen_clips[0].topology.num_joints)
    rows = evaluate_clips(
        gen_clips, ref_clips or None, clf, cfg["metrics.window"],
        cfg["metrics.penetration_eps"], cfg["metrics.slide_height"],
    )
    return rows + list(extra_rows)


def _generate_for_test(gen: MotionGenerator, cache: DatasetCache, cfg: RunConfig):
    """One generated clip per held-out clip, following its trajectory from its first F' frames.

    Each dataset uses its test clips, or its validation clips when it has no test clips.
    """
    F, Fp = gen.F, gen.F_past
    test, val = cache.split("test"), cache.split("val")
    part = []
    for name in sorted({it.dataset for it in test + val}):
        part += [it for it in test if it.dataset == name] or [it for it in val if it.dataset == name]
    pairs = []
    for it in part:
        n = (it.clip.num_frames - Fp) // F * F
        if n <= 0:
            continue
        clip = it.clip
        seed = clip.replace(root_pos=clip.root_pos[:Fp], joint_rot=clip.joint_rot[:Fp]) if Fp else None
        traj = extract_trajectory(clip, Fp, Fp + n)
        req = GenerationRequest([{gen.style_id(it.style): 1.0}], traj, seed, cfg["diffusion.cfg_scale"],
                                cfg["seed"], it.dataset)
        out = gen.generate(req).clip
        ref = clip.replace(root_pos=clip.root_pos[Fp:Fp + n], joint_rot=clip.joint_rot[Fp:Fp + n])
        pairs.append((it, out, ref, traj))
    if not pairs:
        raise CLIError("no held-out clip is long enough to evaluate")
    return pairs


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    groups = defaultdict(lambda: {"gen": [], "ref": [], "labels": [], "extra": []})
    if args.checkpoint:
        if not args.data:
            raise CLIError("--checkpoint needs --data (a prepared dataset cache)")
        gen = _generator(args, cfg)
        cache = DatasetCache.load(args.data)
        for it, out, ref, traj in _generate_for_test(gen, cache, cfg):
            g = groups[it.dataset]
            g["gen"].append(out)
            g["ref"].append(ref)
            g["labels"].append(it.style)
            g["extra"].append(trajectory_error(out, traj))
        for g in groups.values():
            errs = np.array(g.pop("extra"))
            g["extra"] = [
                {"metric": "trajectory_pos_err_m", "scope": "aggregate", "value": float(errs[:, 0].mean())},
                {"metric": "trajectory_rot_err_deg", "scope": "aggregate", "value": float(errs[:, 1].mean())},
            ]
    else:
        if not args.generated:
            raise CLIError("give --generated BVH files/directories or --checkpoint with --data")
        for clip, _ in _bvh_set(args.generated, cfg):
            groups[clip.topology.signature()]["gen"].append(clip)
        if args.reference:
            for clip, lab in _bvh_set(args.reference, cfg):
                g = groups[clip.topology.signature()]
                g["ref"].append(clip)
                g["labels"].append(lab)

    rows = []
    for i, key in enumerate(sorted(groups, key=str)):
        g = groups[key]
        if not g["gen"]:
            continue
        name = key if isinstance(key, str) and args.checkpoint else f"skeleton{i}"
        for r in _evaluate_group(g["gen"], g["ref"], g["labels"], cfg, g["extra"]):
            rows.append({"group": name, **r})

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["group", "metric", "scope", "value"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "value": f"{r['value']:.10g}"})
    _write_json(out / "report.json", {"config": dict(cfg), "rows": rows})
    for r in rows:
        print(f"{r['group']:<12} {r['metric']:<24} {r['scope']:<12} {r['value']:.6g}")
    return 0


# --- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skelgen", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="parse a manifest into split, normalized, cached training data")
    s.add_argument("manifest", type=Path, help="JSON-lines manifest {path, style_name, dataset_name[, split]}")
    _add_config_flags(s)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train a denoiser on a prepared dataset")
    s.add_argument("--data", type=Path, required=True, help="directory written by prepare")
    s.add_argument("--resume", type=Path, help="checkpoint to continue from")
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="generate motion for a JSON request")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--request", type=Path, required=True,
                   help="JSON with styles, trajectory (CSV path, inline [[x,z,yaw_deg]...] or trajectory_bvh), "
                        "optional skeleton, seed_bvh, seed, cfg_scale")
    _add_config_flags(s)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("blend", help="generate with a weighted mix of styles")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--styles", required=True, help="weights such as A=0.35,B=0.65 (must sum to 1)")
    s.add_argument("--trajectory", type=Path, required=True, help="CSV with header x,z,yaw_deg")
    s.add_argument("--skeleton", help="skeleton (dataset) name; optional when the checkpoint has one")
    s.add_argument("--seed-bvh", type=Path, help="BVH whose last frames seed the first window")
    _add_config_flags(s)
    s.set_defaults(func=cmd_blend)

    s = sub.add_parser("evaluate", help="compute motion metrics and FID into report.csv/json")
    s.add_argument("--generated", nargs="+", type=Path, help="generated BVH files or directories")
    s.add_argument("--reference", nargs="+", type=Path, help="reference BVH files or directories")
    s.add_argument("--checkpoint", type=Path, help="generate from this checkpoint for held-out clips")
    s.add_argument("--data", type=Path, help="prepared dataset for --checkpoint mode")
    _add_config_flags(s)
    s.set_defaults(func=cmd_evaluate)
    return p


USER_ERRORS = (
    CLIError, ConfigError, CacheError, CheckpointError, GenerationError, ManifestError, MetricsError,
    ModelConfigError, TrainingError, BVHParseError, BVHExportError, LabelingError, ScheduleError,
    SkeletonConfigError, TopologyError, FileNotFoundError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)  # bitwise-reproducible CPU reductions
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
