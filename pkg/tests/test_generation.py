import numpy as np
import pytest
import torch

from skelgen.dataio import compute_norm_stats, extract_trajectory
from skelgen.dataio.bvh import parse_bvh
from skelgen.diffusion import make_schedule
from skelgen.generation import (
    GenerationError,
    GenerationRequest,
    MotionGenerator,
    blend_styles,
    export_generation,
    read_trajectory_csv,
    request_from_dict,
    write_trajectory_csv,
)
from skelgen.model import DenoiserConfig
from skelgen.skeleton import forward_kinematics
from skelgen.synthetic import sine_walk_biped, sine_walk_chain
from skelgen.training import build_model

F, FP = 8, 4


@pytest.fixture(scope="module")
def clips():
    return {"chain": sine_walk_chain(n_frames=40), "biped": sine_walk_biped(n_frames=40)}


@pytest.fixture(scope="module")
def gen(clips):
    cfg = DenoiserConfig(base_channels=16, groupnorm_groups=4, heads=4, style_count=3, style_embed_dim=16,
                         time_embed_dim=16, traj_embed_dim=16, F=F, F_past=FP)
    model = build_model(cfg, seed=0)
    stats = compute_norm_stats(list(clips.values()))
    topos = {k: c.topology for k, c in clips.items()}
    return MotionGenerator(model, stats, topos, ["chain:hop", "biped:walk", "biped:stride"],
                           make_schedule("cosine", 50), 4)


def request(clips, name="biped", styles=None, n=3 * F, seed_motion=True, **kw):
    c = clips[name]
    past = c.replace(root_pos=c.root_pos[:FP], joint_rot=c.joint_rot[:FP]) if seed_motion else None
    return GenerationRequest(styles or [{1: 1.0}], extract_trajectory(c, FP, FP + n), past, skeleton=name, **kw)


# --- style blending ------------------------------------------------------------------


def test_blend_is_convex_combination():
    table = torch.randn(4, 5, dtype=torch.float64)
    got = blend_styles(table, {0: 0.35, 2: 0.65})
    assert torch.allclose(got, 0.35 * table[0] + 0.65 * table[2], atol=1e-12)
    assert torch.equal(blend_styles(table, {1: 1.0}), table[1])
    assert torch.equal(blend_styles(table, {0: 0.5, 1: 0.5}), blend_styles(table, {1: 0.5, 0: 0.5}))


@pytest.mark.parametrize("weights", [{}, {9: 1.0}, {0: 0.5, 1: 0.4}, {0: 1.5, 1: -0.5}])
def test_blend_rejects_bad_weights(weights):
    with pytest.raises(GenerationError):
        blend_styles(torch.randn(3, 4), weights)


def test_one_hot_blend_matches_direct_style(gen, clips):
    c = clips["biped"]
    traj = extract_trajectory(c, FP, FP + F)
    direct_emb = gen.model.style_embed(torch.tensor(2)).detach()
    a = gen.generate_window(c.topology, direct_emb, traj, seed=3)
    b = gen.generate_window(c.topology, gen.style_embedding({2: 1.0}), traj, seed=3)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


# --- windows and chaining ---------------------------------------------------------------


def test_generation_is_bit_identical(gen, clips):
    a = gen.generate(request(clips, seed=5))
    b = gen.generate(request(clips, seed=5))
    assert np.array_equal(a.clip.root_pos, b.clip.root_pos)
    assert np.array_equal(a.clip.joint_rot, b.clip.joint_rot)
    c = gen.generate(request(clips, seed=6))
    assert not np.array_equal(a.clip.joint_rot, c.clip.joint_rot)


def test_single_chunk_equals_generate_window(gen, clips):
    req = request(clips, n=F, seed=4)
    full = gen.generate(req)
    root, rot = gen.generate_window(clips["biped"].topology, gen.style_embedding({1: 1.0}), req.trajectory,
                                    req.seed_motion, req.cfg_scale, seed=4)
    assert np.array_equal(full.clip.root_pos, root) and np.array_equal(full.clip.joint_rot, rot)


def test_chained_windows_reuse_previous_output_exactly(gen, clips):
    out = gen.generate(request(clips, n=4 * F))
    assert out.clip.num_frames == 4 * F
    assert len(out.windows) == len(out.timings) == 4
    for prev, nxt in zip(out.windows, out.windows[1:]):
        assert np.array_equal(nxt["past"][0], prev["root"][-FP:])
        assert np.array_equal(nxt["past"][1], prev["rot"][-FP:])


def test_generation_from_scratch(gen, clips):
    out = gen.generate(request(clips, "chain", [{0: 1.0}], seed_motion=False))
    assert out.windows[0]["past"] is None
    assert np.isfinite(out.clip.joint_rot).all() and out.clip.num_frames == 3 * F


def test_per_chunk_styles(gen, clips):
    styles = [{1: 1.0}, {1: 0.5, 2: 0.5}, {2: 1.0}]
    out = gen.generate(request(clips, styles=styles))
    assert out.clip.num_frames == 3 * F
    with pytest.raises(GenerationError):
        gen.generate(request(clips, styles=styles[:2]))


def test_bad_requests(gen, clips):
    with pytest.raises(GenerationError):
        gen.generate(request(clips, n=F + 3))
    with pytest.raises(GenerationError):
        gen.generate(GenerationRequest([{1: 1.0}], extract_trajectory(clips["biped"], 0, F), skeleton="dragon"))
    wrong = request(clips, "biped")
    wrong.seed_motion = clips["chain"].replace(root_pos=clips["chain"].root_pos[:FP],
                                               joint_rot=clips["chain"].joint_rot[:FP])
    with pytest.raises(GenerationError):
        gen.generate(wrong)
    with pytest.raises(GenerationError):
        gen.topology(None)  # two skeletons loaded, none named


# --- export and request files ---------------------------------------------------------------


def test_export_round_trip_fk(gen, clips, tmp_path):
    out = gen.generate(request(clips, n=2 * F)).clip
    path = export_generation(out, tmp_path / "g.bvh")
    topo, back = parse_bvh(path.read_text())
    assert back.num_frames == 2 * F
    p1 = forward_kinematics(out.topology, out.root_pos, out.joint_rot)
    p2 = forward_kinematics(topo, back.root_pos, back.joint_rot)
    assert np.abs(p1 - p2).max() < 1e-4


def test_export_rejects_empty_clip(clips, tmp_path):
    c = clips["chain"]
    with pytest.raises(GenerationError):
        export_generation(c.replace(root_pos=c.root_pos[:0], joint_rot=c.joint_rot[:0]), tmp_path / "e.bvh")


def test_trajectory_csv_round_trip(clips, tmp_path):
    traj = extract_trajectory(clips["chain"])  # the chain root only turns about y
    write_trajectory_csv(tmp_path / "t.csv", traj)
    back = read_trajectory_csv(tmp_path / "t.csv")
    assert np.allclose(back.positions, traj.positions, atol=1e-6)
    assert np.allclose(back.rotations, traj.rotations, atol=1e-5)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(GenerationError):
        read_trajectory_csv(tmp_path / "bad.csv")


def test_request_from_dict(gen, clips, tmp_path):
    rows = [[0.01 * i, 0.02 * i, 0.0] for i in range(2 * F)]
    req = request_from_dict({"skeleton": "biped", "styles": {"walk": 0.35, "stride": 0.65}, "trajectory": rows,
                             "cfg_scale": 1.5, "seed": 9}, gen, tmp_path)
    assert req.styles == [{1: 0.35, 2: 0.65}]
    assert len(req.trajectory) == 2 * F and req.cfg_scale == 1.5 and req.seed == 9
    with pytest.raises(GenerationError):
        request_from_dict({"skeleton": "biped", "styles": "walk"}, gen, tmp_path)
    with pytest.raises(GenerationError):
        request_from_dict({"skeleton": "biped", "styles": "hop_nonexistent", "trajectory": rows}, gen, tmp_path)
