"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines inline;
they are also echoed to the terminal when output is captured.
"""
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from dynhuman import autodiff, cli, geometry, metrics, motionfield, nets, render, retrieval
from dynhuman import synthdata, track, uvbake

from conftest import random_rotation
from oracles import closest_hit, gradcheck


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail, t0):
        line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} ({detail}; {time.time() - t0:.1f}s)"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return report


def test_1_descriptor_equivariance(body, verdict):
    t0 = time.time()
    rng = np.random.default_rng(11)
    th = synthdata.random_script(rng, n_frames=50).thetas(body.n_joints)
    frames = [geometry.PoseFrame(t, np.zeros(body.n_blendshapes), np.array([32.0, 32.0, 30.0])) for t in th]
    R, shift = random_rotation(rng), np.array([0.4, -1.3, 2.2])
    raster = uvbake.get_raster(body, 32)

    def grids(fs, move=False, dtype=np.float64):
        meshes = []
        for f in fs:
            m = geometry.pose(body, f)
            if move:
                m = geometry.PosedMesh(m.positions + shift, m.vertex_rotations, m.joint_transforms)
            meshes.append(m)
        out = []
        for i in range(len(meshes)):
            fd = motionfield.frame_derivatives(body, meshes[max(0, i - 10):i + 1], 10)
            out.append(uvbake.descriptor_grid(raster, fd).data.astype(dtype))
        return np.stack(out)

    base = grids(frames)
    moved = grids([f.with_root(R) for f in frames], move=True)
    e64 = np.abs(base - moved).max()
    e32 = np.abs(base.astype(np.float32) - moved.astype(np.float32)).max()
    verdict(1, e64 <= 1e-9 and e32 <= 1e-5, f"max dev f64 {e64:.2e}, f32 {e32:.2e}", t0)


def test_2_autodiff_registry(verdict):
    t0 = time.time()
    worst = {name: max(gradcheck(spec, seed) for seed in (0, 1, 2)) for name, spec in autodiff.REGISTRY.items()}
    name = max(worst, key=worst.get)
    verdict(2, worst[name] < 1e-4, f"{len(worst)} ops, worst {name} {worst[name]:.2e}", t0)


def test_3_rasterizer_oracle(body, verdict):
    t0 = time.time()
    rng = np.random.default_rng(5)
    frame = geometry.PoseFrame(rng.normal(0, 0.4, (body.n_joints, 3)), np.zeros(body.n_blendshapes),
                               np.array([16.0, 16.0, 17.0]))
    cam = render.Camera.from_params(frame.camera, 32, 32)
    pos = geometry.pose_positions(body, frame)
    fr = render.rasterize_triangles(render.project(cam, pos), pos[:, 2], body.faces, 32, 32)
    face, depth = closest_hit(pos, body.faces, cam, 32, 32)
    same_face = np.array_equal(fr[0], face)
    hit = face >= 0
    same_depth = np.array_equal(np.isfinite(fr[2]), hit) and np.allclose(fr[2][hit], depth[hit], atol=1e-12)
    verdict(3, same_face and same_depth, f"{hit.sum()} covered px, faces equal {same_face}", t0)


def test_4_phase_retrieval(body, verdict):
    t0 = time.time()
    seq = retrieval.alternating_turns(body)
    r3 = retrieval.phase_experiment(seq, retrieval.descriptor_3d(seq))
    r2 = retrieval.phase_experiment(seq, retrieval.build_2d_baseline(seq, "sparse"))
    ok = r3.accuracy >= 0.95 and r2.accuracy_out_of_plane <= 0.60 and r2.peaks_per_cycle >= 2
    ok &= time.time() - t0 < 180
    verdict(4, ok, f"3D top-1 {r3.accuracy:.3f}, 2D out-of-plane {r2.accuracy_out_of_plane:.3f}, "
                   f"2D peaks/cycle {r2.peaks_per_cycle:g}", t0)


ABLATION_SEEDS = (0, 1, 2)


def test_5_ablation_direction(verdict):
    t0 = time.time()
    ds = synthdata.generate(synthdata.SynthConfig(), seed=0)
    banks = {}
    res = {ab: [] for ab in nets.ABLATIONS}
    for ab in nets.ABLATIONS:
        for seed in ABLATION_SEEDS:
            cfg = nets.TrainConfig(steps=2000, seed=seed, ablation=ab)
            key = ab == "no_velocity"
            if key not in banks:
                banks[key] = nets.prepare(ds, cfg)
            model, _ = nets.train(cfg, banks[key])
            res[ab].append(nets.evaluate(model, banks[key]))
    med = {ab: (np.median([r["l1_fg"] for r in v]), np.median([r["ssim"] for r in v])) for ab, v in res.items()}
    full = med["none"]
    gain = 1.0 - full[0] / med["no_velocity"][0]
    ok = gain >= 0.20 and full[1] > med["no_shape"][1] and full[1] > med["no_normal"][1]
    ok &= time.time() - t0 <= 45 * 60
    detail = ", ".join(f"{ab} L1 {v[0]:.4f} SSIM {v[1]:.4f}" for ab, v in med.items())
    detail += "; per-seed L1 full " + "/".join(f"{r['l1_fg']:.4f}" for r in res["none"])
    detail += " no_velocity " + "/".join(f"{r['l1_fg']:.4f}" for r in res["no_velocity"])
    verdict(5, ok, f"L1 reduction vs no_velocity {100 * gain:.1f}%; {detail}", t0)


def test_6_tracking(body, verdict):
    t0 = time.time()
    th = synthdata.walk_script(n_frames=60).thetas(body.n_joints)
    cam = np.array([32.0, 28.8, 30.0])
    frames = [geometry.PoseFrame(t, np.zeros(body.n_blendshapes), cam) for t in th]
    obs = [track.observe(body, f, 64) for f in frames]
    prior = th + np.random.default_rng(0).normal(0.0, 0.1, th.shape)
    cams = np.tile(cam, (len(th), 1))
    runs = {lt: track.track(body, obs, prior, cams, track.TrackConfig(lambda_t=lt), gt_frames=frames)
            for lt in (0.01, 0.0)}
    r = runs[0.01]
    drop = 1.0 - r.final_error.mean() / r.init_error.mean()
    j1, j0 = track.jitter(runs[0.01].state.theta), track.jitter(runs[0.0].state.theta)
    ok = drop >= 0.5 and j1 < j0 and time.time() - t0 < 600
    verdict(6, ok, f"error {r.init_error.mean():.3f} -> {r.final_error.mean():.3f} px ({100 * drop:.0f}% lower), "
                   f"jitter {j1:.4f} (lambda_t 0.01) vs {j0:.4f} (0)", t0)


def test_7_loss_exactness(body, verdict):
    t0 = time.time()
    ds = synthdata.generate(synthdata.SynthConfig(n_segments=2, frames_per_segment=4, test_segments=1,
                                                  image_size=32), seed=0)
    cfg = nets.TrainConfig(image_size=32, uv_resolution=16)
    idx = np.arange(4)
    gt = {"A": ds.appearance[idx].transpose(0, 3, 1, 2), "S": ds.semantics[idx].astype(np.int64),
          "n": ds.normals[idx].transpose(0, 3, 1, 2)}
    out = {"A": autodiff.Tensor(gt["A"]), "n": autodiff.Tensor(gt["n"]), "fg": gt["S"] > 0}
    t = nets.loss(cfg, out, gt)
    frames = [ds.pose_frame(i) for i in idx]
    obs = [track.observe(body, f, 32) for f in frames]
    th, cams = np.stack([f.theta for f in frames]), np.stack([f.camera for f in frames])
    st = track.TrackState(th, cams, th.copy(), cams.copy(), np.zeros(body.n_blendshapes))
    tc = track.TrackConfig(image_size=32)
    lt = [track.fitting_loss(body, st, obs[i], i) for i in idx]
    lr = [track.render_loss(body, st, obs[i], i, 32) for i in idx]
    ld = [track.prior_loss(st, i) for i in idx]
    static = track.TrackState(np.repeat(th[:1], 4, 0), np.repeat(cams[:1], 4, 0), None, None,
                              np.zeros(body.n_blendshapes))
    ltt = [track.temporal_loss(static, i) for i in idx]
    worst = max(max(lt), max(lr), max(ld), max(ltt))
    weights = (cfg.lambda_s, cfg.lambda_n, tc.lambda_r, tc.lambda_d, tc.lambda_t) == (10.0, 1.0, 1.0, 0.1, 0.01)
    ok = t.L_a < 1e-6 and t.L_n < 1e-6 and worst < 1e-9 and weights
    verdict(7, ok, f"L_a {t.L_a:.1e}, L_n {t.L_n:.1e}, tracking terms max {worst:.1e}, weights {weights}", t0)


def test_8_metric_self_tests(verdict):
    t0 = time.time()
    x = np.random.default_rng(0).uniform(0, 1, (48, 48, 3))
    s = metrics.ssim(x, x)
    c = metrics.ssim(np.full((32, 32), 0.5), np.full((32, 32), 0.25))
    seq = [x, x * 0.5, x ** 2]
    td = metrics.temporal_distance(seq, seq)
    ok = abs(s - 1) <= 1e-9 and abs(c - 0.8001) <= 1e-4 and np.nansum(np.abs(td)) == 0
    verdict(8, ok, f"SSIM(x,x) {s:.12f}, constant case {c:.6f}, tD max {np.nanmax(td):g}", t0)


def _tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and "runs" not in p.relative_to(root).parts:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_9_cli_determinism(tmp_path, verdict):
    t0 = time.time()
    (tmp_path / "s.json").write_text(json.dumps({"n_segments": 2, "frames_per_segment": 5, "test_segments": 1,
                                                 "image_size": 32}))
    (tmp_path / "t.json").write_text(json.dumps({"uv_resolution": 16, "image_size": 32, "T": 3, "d": 8,
                                                 "enc_width": 4, "shape_width": 6, "app_width": 6,
                                                 "batch": 2, "steps": 5}))
    (tmp_path / "k.json").write_text(json.dumps({"steps": 3, "image_size": 32}))
    (tmp_path / "r.json").write_text(json.dumps({"period": 12, "cycles": 2, "T": 4}))

    def commands(o):
        d = str(o / "data")
        return [
            ["synth", "--out", d, "--config", str(tmp_path / "s.json")],
            ["descriptor", "--out", str(o / "desc"), "--data", d, "--T", "3", "--resolution", "16", "--png"],
            ["train", "--out", str(o / "run"), "--data", d, "--config", str(tmp_path / "t.json")],
            ["render", "--out", str(o / "render"), "--run", str(o / "run"), "--data", d],
            ["render", "--out", str(o / "orbit"), "--run", str(o / "run"), "--data", d, "--orbit", "3"],
            ["relight", "--out", str(o / "relit"), "--run", str(o / "run"), "--data", d],
            ["track", "--out", str(o / "track"), "--data", d, "--config", str(tmp_path / "k.json"),
             "--uv-noise", "0.01"],
            ["retrieve", "--out", str(o / "retr"), "--config", str(tmp_path / "r.json"), "--query", "15"],
            ["metrics", "--out", str(o / "metrics"), "--pred", str(o / "render" / "appearance"),
             "--gt", str(o / "render" / "appearance")],
        ]

    digests = []
    for rep in ("a", "b"):
        o = tmp_path / rep
        codes = [cli.main(c) for c in commands(o)]
        assert codes == [0] * len(codes), codes
        digests.append({c[0] + c[2].rsplit("/", 1)[-1]: _tree_hash(c[2]) for c in commands(o)})
    differ = [k for k in digests[0] if digests[0][k] != digests[1][k]]
    verdict(9, not differ and time.time() - t0 < 300,
            f"{len(digests[0])} commands, differing outputs: {differ or 'none'}", t0)
