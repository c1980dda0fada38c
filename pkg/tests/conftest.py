import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from skelgen.dataio.clip import MotionClip
from skelgen.skeleton import build_topology, matrix_to_rot6d

torch.set_num_threads(1)


def random_tree(rng, n_joints, toe_last=True):
    """Random topology with parents preceding children."""
    parents = [-1] + [int(rng.integers(0, j)) for j in range(1, n_joints)]
    offsets = rng.normal(size=(n_joints, 3)) * 0.3
    offsets[0] = 0
    names = [f"j{i}" for i in range(n_joints)]
    toes = [names[-1]] if toe_last and n_joints > 1 else []
    return build_topology(names, parents, offsets, toes)


def chain(n):
    return build_topology([f"j{i}" for i in range(n)], [-1] + list(range(n - 1)), [[0, -0.3, 0]] * n,
                          [f"j{n - 1}"] if n > 1 else [])


def star(n):
    return build_topology([f"j{i}" for i in range(n)], [-1] + [0] * (n - 1), np.eye(3)[np.arange(n) % 3] * 0.2,
                          [f"j{n - 1}"] if n > 1 else [])


def random_rotations(rng, shape):
    n = int(np.prod(shape)) if shape else 1
    R = Rotation.random(n, random_state=int(rng.integers(2**31))).as_matrix()
    return R.reshape(*shape, 3, 3)


def random_clip(rng, topology, n_frames=10, fps=30.0, style_id=0):
    rot = matrix_to_rot6d(random_rotations(rng, (n_frames, topology.num_joints)))
    root = rng.normal(size=(n_frames, 3))
    return MotionClip(topology, fps, root, rot, style_id=style_id)


def recursive_fk(topology, root_pos, local_R):
    """Independent oracle: walk up to the root for each joint, composing transforms."""
    n = topology.num_joints

    def glob(f, j):
        p = topology.parent_index[j]
        if p < 0:
            return root_pos[f], local_R[f, j]
        pp, pr = glob(f, p)
        return pp + pr @ topology.rest_offsets[j], pr @ local_R[f, j]

    return np.array([[glob(f, j)[0] for j in range(n)] for f in range(root_pos.shape[0])])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary ------------------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 10


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = results.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
