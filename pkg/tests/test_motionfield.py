import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import ConvexHull

from dynhuman import geometry, motionfield
from dynhuman.geometry import PoseFrame

from conftest import random_frame, random_rotation


def _sphere(subdiv=3):
    """Icosahedron subdivided ``subdiv`` times, vertices pushed to the unit sphere."""
    t = (1 + 5 ** 0.5) / 2
    p = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    p = [np.array(v, float) / np.linalg.norm(v) for v in p]
    f = ConvexHull(np.array(p)).simplices.tolist()
    for _ in range(subdiv):
        mid, nf = {}, []
        def m(a, b):
            key = (min(a, b), max(a, b))
            if key not in mid:
                v = p[a] + p[b]
                p.append(v / np.linalg.norm(v))
                mid[key] = len(p) - 1
            return mid[key]
        for a, b, c in f:
            ab, bc, ca = m(a, b), m(b, c), m(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    p, f = np.array(p), np.array(f)
    tri = p[f]
    flip = np.einsum("fk,fk->f", np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), tri.mean(1)) < 0
    f[flip] = f[flip][:, ::-1]
    return p, f


def _sequence(body, rng, n=14):
    base = random_frame(body, rng, 0.2)
    d = rng.normal(scale=0.03, size=base.theta.shape)
    return [PoseFrame(base.theta + t * d, base.beta) for t in range(n)]


def test_flat_quad_normals():
    p = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]])
    f = np.array([[0, 1, 2], [0, 2, 3]])
    np.testing.assert_allclose(motionfield.surface_normals(p, f), [[0, 0, 1]] * 4, atol=1e-15)


def test_sphere_normals():
    p, f = _sphere()
    n = motionfield.surface_normals(p, f)
    assert np.abs(n - p).max() < 1e-2


def test_normals_rotate(rng):
    p, f = _sphere(1)
    R = random_rotation(rng)
    np.testing.assert_allclose(motionfield.surface_normals(p @ R.T, f), motionfield.surface_normals(p, f) @ R.T, atol=1e-12)


def test_degenerate_face_skipped_and_isolated_vertex():
    p = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 2, 0.0]])
    f = np.array([[0, 1, 2], [1, 1, 2]])
    with pytest.raises(motionfield.MotionFieldError):
        motionfield.surface_normals(p, f)
    n = motionfield.surface_normals(p[:3], f)
    np.testing.assert_allclose(n, [[0, 0, 1]] * 3)


def test_velocity_static_and_linear():
    p0 = np.random.default_rng(0).normal(size=(5, 3))
    V, valid = motionfield.velocities([p0] * 12, T=10)
    assert not V.any() and valid.all()
    hist = [p0 + t * np.array([0, 0, 1.0]) for t in range(12)]
    V, _ = motionfield.velocities(hist, T=10)
    np.testing.assert_allclose(V, np.broadcast_to([0, 0, 1.0], V.shape), atol=1e-12)


def test_velocity_padding():
    hist = [np.full((4, 3), float(t)) for t in range(3)]
    V, valid = motionfield.velocities(hist, T=10)
    assert valid.tolist() == [True, True] + [False] * 8
    assert not V[2:].any()
    np.testing.assert_allclose(V[:2], 1.0)


def test_empty_history():
    with pytest.raises(motionfield.MotionFieldError):
        motionfield.velocities([], T=10)


def test_identity_canonicalization(body):
    mesh = geometry.pose(body, PoseFrame.rest(body))
    n = motionfield.surface_normals(mesh.positions, body.faces)
    fd = motionfield.frame_derivatives(body, [mesh, mesh], T=3)
    np.testing.assert_allclose(fd.normals, n, atol=1e-15)


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_sequence_invariance(body, seed):
    rng = np.random.default_rng(seed)
    frames = _sequence(body, rng)
    R = random_rotation(rng)
    a = [geometry.pose(body, f) for f in frames]
    b = [geometry.pose(body, f.with_root(R)) for f in frames]
    fa = motionfield.frame_derivatives(body, a, T=10)
    fb = motionfield.frame_derivatives(body, b, T=10)
    np.testing.assert_allclose(fb.normals, fa.normals, atol=1e-9)
    np.testing.assert_allclose(fb.velocities, fa.velocities, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(fa.normals, axis=1), 1.0, atol=1e-6)


def test_translation_cancels(body, rng):
    a = [geometry.pose(body, f) for f in _sequence(body, rng, 6)]
    shift = np.array([0.3, -2.0, 5.0])
    b = [geometry.PosedMesh(m.positions + shift, m.vertex_rotations, m.joint_transforms) for m in a]
    fa, fb = motionfield.frame_derivatives(body, a, 4), motionfield.frame_derivatives(body, b, 4)
    np.testing.assert_allclose(fb.normals, fa.normals, atol=1e-12)
    np.testing.assert_allclose(fb.velocities, fa.velocities, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(-4, 4))
def test_velocity_linearity(a):
    rng = np.random.default_rng(3)
    p0 = rng.normal(size=(6, 3))
    disp = rng.normal(size=(8, 6, 3))
    base = [p0 + disp[:t].sum(0) for t in range(8)]
    scaled = [p0 + a * disp[:t].sum(0) for t in range(8)]
    V1, _ = motionfield.velocities(base, 5)
    V2, _ = motionfield.velocities(scaled, 5)
    np.testing.assert_allclose(V2, a * V1, atol=1e-9)
