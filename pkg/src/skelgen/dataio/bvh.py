"""Reading and writing BVH motion capture files."""

from __future__ import annotations

import io
import warnings
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from skelgen.dataio.clip import MotionClip
from skelgen.skeleton import (
    SkeletonTopology,
    SkeletonConfigError,
    matrix_to_rot6d,
    rot6d_to_matrix,
)

_ROT_CHANNELS = {"Xrotation": "X", "Yrotation": "Y", "Zrotation": "Z"}
_POS_CHANNELS = {"Xposition": 0, "Yposition": 1, "Zposition": 2}


class BVHParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class BVHExportError(ValueError):
    pass


class _Lines:
    def __init__(self, text: str):
        self.items = [
            (i + 1, ln.split()) for i, ln in enumerate(text.splitlines()) if ln.strip()
        ]
        self.pos = 0

    def peek(self):
        if self.pos >= len(self.items):
            raise BVHParseError("unexpected end of file")
        return self.items[self.pos]

    def next(self):
        item = self.peek()
        self.pos += 1
        return item

    def expect(self, word: str):
        lineno, toks = self.next()
        if not toks or toks[0] != word:
            raise BVHParseError(f"expected {word!r}, found {' '.join(toks)!r}", lineno)
        return lineno, toks


def _floats(toks, n, lineno, what):
    if len(toks) != n:
        raise BVHParseError(f"{what} expects {n} values, got {len(toks)}", lineno)
    try:
        return [float(t) for t in toks]
    except ValueError as exc:
        raise BVHParseError(f"bad number in {what}: {exc}", lineno) from None


def parse_bvh(data, scale: float = 1.0, toe_names=None) -> tuple[SkeletonTopology, MotionClip]:
    """Parse BVH text into a topology and a clip.

    Offsets and root translations are multiplied by ``scale`` (use 0.01 for
    centimeter files). End Sites become leaf joints with identity rotation;
    an End Site with no name is called ``<parent>_End``.
    """
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    lines = _Lines(data)
    lines.expect("HIERARCHY")

    names: list[str] = []
    parents: list[int] = []
    offsets: list[list[float]] = []
    channels: list[list[str]] = []  # per joint, empty for End Sites

    def read_joint(parent: int, kind_line):
        lineno, toks = kind_line
        if toks[0] in ("ROOT", "JOINT"):
            if len(toks) < 2:
                raise BVHParseError(f"{toks[0]} without a name", lineno)
            name = " ".join(toks[1:])
            end_site = False
        else:  # End Site
            end_site = True
            name = " ".join(toks[2:]) or f"{names[parent]}_End"
        if name in names:
            raise BVHParseError(f"duplicate joint name {name!r}", lineno)
        idx = len(names)
        names.append(name)
        parents.append(parent)
        offsets.append([0.0, 0.0, 0.0])
        channels.append([])
        lines.expect("{")
        lineno, toks = lines.expect("OFFSET")
        offsets[idx] = _floats(toks[1:], 3, lineno, "OFFSET")
        if not end_site:
            lineno, toks = lines.peek()
            if toks[0] == "CHANNELS":
                lines.next()
                try:
                    n = int(toks[1])
                except (IndexError, ValueError):
                    raise BVHParseError("bad CHANNELS count", lineno) from None
                chans = toks[2:]
                if len(chans) != n:
                    raise BVHParseError(f"CHANNELS declares {n} but lists {len(chans)}", lineno)
                for c in chans:
                    if c not in _ROT_CHANNELS and c not in _POS_CHANNELS:
                        raise BVHParseError(f"unsupported channel {c!r}", lineno)
                channels[idx] = chans
        while True:
            lineno, toks = lines.next()
            if toks[0] == "}":
                return
            if end_site:
                raise BVHParseError("End Site cannot have children", lineno)
            if toks[0] == "JOINT" or toks[:2] == ["End", "Site"]:
                read_joint(idx, (lineno, toks))
            else:
                raise BVHParseError(f"unexpected token {toks[0]!r}", lineno)

    lineno, toks = lines.next()
    if toks[0] != "ROOT":
        raise BVHParseError("expected ROOT", lineno)
    read_joint(-1, (lineno, toks))
    lineno, toks = lines.peek()
    if toks[0] == "ROOT":
        raise BVHParseError("multiple ROOT joints are not supported", lineno)

    lines.expect("MOTION")
    lineno, toks = lines.next()
    if toks[:1] != ["Frames:"] or len(toks) != 2:
        raise BVHParseError("expected 'Frames: <n>'", lineno)
    n_frames = int(toks[1])
    lineno, toks = lines.next()
    if toks[:2] != ["Frame", "Time:"] or len(toks) != 3:
        raise BVHParseError("expected 'Frame Time: <dt>'", lineno)
    frame_time = float(toks[2])
    if frame_time <= 0:
        raise BVHParseError("frame time must be positive", lineno)

    n_chan = sum(len(c) for c in channels)
    rows = np.zeros((n_frames, n_chan))
    # rows of a zero-channel file are blank and never reach the token stream
    for f in range(n_frames if n_chan else 0):
        lineno, toks = lines.next()
        rows[f] = _floats(toks, n_chan, lineno, "frame row")
    if lines.pos != len(lines.items):
        raise BVHParseError(
            f"more frame rows than the declared {n_frames}", lines.items[lines.pos][0]
        )

    n_joints = len(names)
    root_pos = np.zeros((n_frames, 3))
    local = np.broadcast_to(np.eye(3), (n_frames, n_joints, 3, 3)).copy()
    col = 0
    for j, chans in enumerate(channels):
        if not chans:
            continue
        block = rows[:, col : col + len(chans)]
        col += len(chans)
        rot_order = "".join(_ROT_CHANNELS[c] for c in chans if c in _ROT_CHANNELS)
        rot_cols = [k for k, c in enumerate(chans) if c in _ROT_CHANNELS]
        if j == 0:
            for k, c in enumerate(chans):
                if c in _POS_CHANNELS:
                    root_pos[:, _POS_CHANNELS[c]] = block[:, k] * scale
        if rot_order:
            # Uppercase sequence = intrinsic rotations, matching BVH channel semantics.
            local[:, j] = Rotation.from_euler(
                rot_order, block[:, rot_cols], degrees=True
            ).as_matrix()

    offsets_arr = np.asarray(offsets) * scale
    toe_ids = ()
    if toe_names is not None:
        lookup = {n: i for i, n in enumerate(names)}
        missing = [t for t in toe_names if t not in lookup]
        if missing:
            raise SkeletonConfigError(f"unknown toe joints {missing}")
        toe_ids = tuple(lookup[t] for t in toe_names)
    topology = SkeletonTopology(tuple(names), tuple(parents), offsets_arr, toe_ids)
    clip = MotionClip(topology, 1.0 / frame_time, root_pos, matrix_to_rot6d(local))
    return topology, clip


def read_bvh(path, scale: float = 1.0, toe_names=None):
    return parse_bvh(Path(path).read_text(), scale=scale, toe_names=toe_names)


def _fmt(x: float) -> str:
    return f"{x + 0.0:.6f}"


def write_bvh(topology: SkeletonTopology, clip: MotionClip) -> bytes:
    """Serialize a clip as BVH.

    Every internal joint gets ZYX rotation channels; the root additionally
    gets XYZ position channels. Leaf joints are written as End Sites, which
    carry no channels, so leaf rotations are not stored.
    """
    if clip.num_frames < 1:
        raise BVHExportError("cannot export an empty clip")
    if clip.topology.signature() != topology.signature():
        raise BVHExportError("clip does not belong to the given topology")
    if not (np.all(np.isfinite(clip.root_pos)) and np.all(np.isfinite(clip.joint_rot))):
        raise BVHExportError("non-finite values in clip")
    if not is_dfs_ordered(topology):
        raise BVHExportError("joint indices must follow depth-first order to be written as BVH")
    n = topology.num_joints
    leaves = [topology.is_leaf(j) for j in range(n)]
    if n == 1:
        leaves = [False]
    children = {j: topology.children(j) for j in range(n)}
    mats = rot6d_to_matrix(clip.joint_rot)

    out = io.StringIO()
    out.write("HIERARCHY\n")

    def emit(j: int, depth: int):
        ind = "  " * depth
        off = " ".join(_fmt(v) for v in topology.rest_offsets[j])
        if leaves[j]:
            parent = topology.parent_index[j]
            default = f"{topology.joint_names[parent]}_End"
            name = topology.joint_names[j]
            out.write(f"{ind}End Site{'' if name == default else ' ' + name}\n")
            out.write(f"{ind}{{\n{ind}  OFFSET {off}\n{ind}}}\n")
            return
        kind = "ROOT" if j == 0 else "JOINT"
        out.write(f"{ind}{kind} {topology.joint_names[j]}\n{ind}{{\n")
        out.write(f"{ind}  OFFSET {off}\n")
        if j == 0:
            out.write(f"{ind}  CHANNELS 6 Xposition Yposition Zposition Zrotation Yrotation Xrotation\n")
        else:
            out.write(f"{ind}  CHANNELS 3 Zrotation Yrotation Xrotation\n")
        for c in children[j]:
            emit(c, depth + 1)
        out.write(f"{ind}}}\n")

    emit(0, 0)
    written = [j for j in _dfs_order(topology) if not leaves[j]]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        eulers = Rotation.from_matrix(mats[:, written].reshape(-1, 3, 3)).as_euler(
            "ZYX", degrees=True
        )
    eulers = eulers.reshape(clip.num_frames, len(written) * 3)
    out.write("MOTION\n")
    out.write(f"Frames: {clip.num_frames}\n")
    out.write(f"Frame Time: {1.0 / clip.frame_rate:.8f}\n")
    for f in range(clip.num_frames):
        vals = list(clip.root_pos[f]) + list(eulers[f])
        out.write(" ".join(_fmt(v) for v in vals) + "\n")
    return out.getvalue().encode("utf-8")


def _dfs_order(topology: SkeletonTopology) -> list[int]:
    order = []
    stack = [0]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(topology.children(j)))
    return order


def is_dfs_ordered(topology: SkeletonTopology) -> bool:
    """Whether joint indices follow the depth-first order BVH files use."""
    return _dfs_order(topology) == list(range(topology.num_joints))
