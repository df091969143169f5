import numpy as np
import pytest

from dynhuman import synthdata, tensorio
from dynhuman.geometry import BOTTOM
from dynhuman.synthdata import GarmentProxy, MotionScript


@pytest.fixture(scope="module")
def small_ds():
    return synthdata.generate(synthdata.SynthConfig(n_segments=3, frames_per_segment=6, test_segments=1,
                                                    image_size=32), seed=3)


def test_static_hem_settles(body):
    g = GarmentProxy()
    script = MotionScript([], 200)
    sim0 = synthdata.simulate(body, MotionScript([], 1), g)
    hem0 = sim0.targets[0] + np.array([0.05, -0.03, 0.04])
    sim = synthdata.simulate(body, script, g, hem0=hem0)
    assert np.abs(sim.hem[-1] - sim.targets[-1]).max() < 1e-6


def test_critical_damping_step_no_overshoot():
    k = 60.0
    c = 2 * np.sqrt(k)
    x, v = np.array([0.0]), np.array([0.0])
    tgt = np.array([1.0])
    xs = []
    dt = 1 / 30
    for _ in range(60):
        x, v = synthdata.integrate(x, v, tgt, tgt, k, c, dt, 8)
        xs.append(x[0])
    xs = np.array(xs)
    assert (np.diff(xs) >= 0).all() and xs.max() <= 1.0
    # closed form of x'' = k (1 - x) - c x' with x(0) = x'(0) = 0 at critical damping
    w = np.sqrt(k)
    t = dt * np.arange(1, 61)
    exact = 1 - (1 + w * t) * np.exp(-w * t)
    assert np.abs(xs - exact).max() < 2e-2


def test_faster_motion_larger_lag(body):
    g = GarmentProxy()
    base = synthdata.walk_script(60, speed=1.0)
    lag = lambda s: np.linalg.norm(s.hem - s.targets, axis=-1).max()
    assert lag(synthdata.simulate(body, base.scaled(2.0), g)) > lag(synthdata.simulate(body, base, g))


def test_unstable_parameters_rejected():
    with pytest.raises(ValueError):
        GarmentProxy(stiffness=60.0, damping=100.0)
    with pytest.raises(ValueError):
        GarmentProxy(substeps=1)


def test_zero_velocity_no_wrinkles(body):
    script = MotionScript([], 3)
    cam = synthdata.default_camera(32)
    a = synthdata.shade(body, synthdata.simulate(body, script, GarmentProxy(), cam), GarmentProxy(), cam, 32)
    flat = GarmentProxy(wrinkle_gain=0.0)
    b = synthdata.shade(body, synthdata.simulate(body, script, flat, cam), flat, cam, 32)
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa.appearance, fb.appearance)


def test_same_pose_different_speed_differs(body):
    g = GarmentProxy()
    cam = synthdata.default_camera(64)
    slow = synthdata.walk_script(40, speed=1.0)
    fast = slow.scaled(2.0)
    th_s, th_f = slow.thetas(), fast.thetas()
    i_f = len(th_f) - 1
    i_s = 2 * i_f
    np.testing.assert_allclose(th_f[i_f], th_s[i_s], atol=1e-12)
    gs = synthdata.shade(body, synthdata.simulate(body, slow, g, cam), g, cam)[i_s]
    gf = synthdata.shade(body, synthdata.simulate(body, fast, g, cam), g, cam)[i_f]
    garment = (gs.semantics == BOTTOM) & (gf.semantics == BOTTOM)
    assert np.abs(gs.appearance - gf.appearance)[garment].mean() > 0


def test_semantics_labels(body, small_ds):
    present = set(np.unique(small_ds.semantics))
    assert present <= set(np.unique(body.part_labels)) | {0, BOTTOM}
    assert BOTTOM in present and 0 in present


def test_splits_disjoint_and_cover(small_ds):
    tr, te = set(small_ds.splits["train"]), set(small_ds.splits["test"])
    assert not tr & te and tr | te == set(range(len(small_ds)))


def test_generate_deterministic(small_ds):
    again = synthdata.generate(small_ds.config, seed=3)
    assert again.appearance.tobytes() == small_ds.appearance.tobytes()
    assert again.hem.tobytes() == small_ds.hem.tobytes()


def test_export_roundtrip(small_ds, tmp_path):
    synthdata.export(small_ds, tmp_path / "ds")
    back = synthdata.load(tmp_path / "ds")
    for name in ("appearance", "normals", "semantics", "thetas", "cameras", "segment", "local", "hem"):
        a, b = getattr(small_ds, name), getattr(back, name)
        assert a.shape == b.shape and np.array_equal(a, b), name
    assert back.splits == small_ds.splits
    np.testing.assert_array_equal(back.body.faces, small_ds.body.faces)


def test_config_hash_tracks_fields():
    base = synthdata.SynthConfig().to_dict()
    h = tensorio.config_hash(base)
    assert tensorio.config_hash(synthdata.SynthConfig().to_dict()) == h
    for key, val in [("n_segments", 9), ("fps", 24.0), ("garment", {"stiffness": 50.0}), ("image_size", 32)]:
        assert tensorio.config_hash({**base, key: val}) != h


def test_unknown_config_field():
    with pytest.raises(ValueError):
        synthdata.SynthConfig.from_dict({"n_segmentz": 3})
