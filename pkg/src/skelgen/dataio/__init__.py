from skelgen.dataio.bvh import BVHExportError, BVHParseError, parse_bvh, read_bvh, write_bvh
from skelgen.dataio.clip import MotionClip, MotionWindow, NormStats, StatsError, TrajectorySignal
from skelgen.dataio.dataset import (
    LabelingError,
    ManifestError,
    ManifestRecord,
    augment_trajectory,
    build_style_table,
    balance_styles,
    compute_norm_stats,
    denormalize_root,
    extract_trajectory,
    label_foot_contacts,
    make_windows,
    normalize_root,
    read_manifest,
    stratified_split,
)
