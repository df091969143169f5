import warnings

import numpy as np
import pytest

from dynhuman import geometry, motionfield, render, synthdata, uvbake
from dynhuman.geometry import PoseFrame
from dynhuman.render import Camera

from conftest import random_frame
from oracles import closest_hit


def test_project_examples():
    np.testing.assert_allclose(render.project(Camera(0, 0, 1), [0, 0, 5]), [0, 0])
    np.testing.assert_allclose(render.project(Camera(0.5, -0.5, 2), [1, 2, 5]), [2.5, 3.5])
    a = render.project(Camera(3, 4, 1.5), [[1, -2, 0]])
    b = render.project(Camera(3, 4, 3.0), [[1, -2, 0]])
    np.testing.assert_allclose(b - [3, 4], 2 * (a - [3, 4]))


def test_camera_rejects_bad_scale():
    with pytest.raises(ValueError):
        Camera(0, 0, 0.0)


def _quad_mesh(z):
    # front-facing (negative image area) triangle covering the whole 16x16 frame
    return np.array([[-1.0, -1.0, z], [-1.0, 40.0, z], [40.0, -1.0, z]])


def test_full_frame_constant_attribute():
    p = _quad_mesh(1.0)
    f, bary, depth = render.rasterize_triangles(p[:, :2], p[:, 2], np.array([[0, 1, 2]]), 16, 16)
    assert (f == 0).all()
    frame = render.RenderedFrame(f, bary, depth, np.zeros((16, 16, 3)))
    out = render.interpolate(frame, np.array([[0, 1, 2]]), np.full((3, 2), 0.3))
    np.testing.assert_allclose(out, 0.3, atol=1e-12)


def test_zbuffer_nearest_wins():
    p = np.vstack([_quad_mesh(2.0), _quad_mesh(1.0)])
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    f, _, depth = render.rasterize_triangles(p[:, :2], p[:, 2], faces, 16, 16)
    assert (f == 1).all() and np.allclose(depth, 1.0)


def test_equal_depth_lowest_index_wins():
    p = np.vstack([_quad_mesh(1.0), _quad_mesh(1.0)])
    faces = np.array([[3, 4, 5], [0, 1, 2]])
    f, _, _ = render.rasterize_triangles(p[:, :2], p[:, 2], faces, 16, 16)
    assert (f == 0).all()


def test_backface_culled():
    p = _quad_mesh(1.0)
    f, _, _ = render.rasterize_triangles(p[:, :2], p[:, 2], np.array([[0, 2, 1]]), 16, 16)
    assert (f < 0).all()


def test_offscreen_warns(body):
    with pytest.warns(RuntimeWarning):
        fr = render.rasterize(body.vertices, body, Camera(-500, -500, 10, 32, 32))
    assert fr.empty and not fr.mask.any()


@pytest.mark.parametrize("seed", [0, 1])
def test_rasterizer_matches_closest_hit_oracle(body, seed):
    rng = np.random.default_rng(seed)
    frame = random_frame(body, rng, 0.25) if seed else PoseFrame.rest(body)
    pos = geometry.pose_positions(body, frame)
    cam = Camera.from_params(synthdata.default_camera(32), 32, 32)
    fr = render.rasterize(pos, body, cam)
    face, depth = closest_hit(pos, body.faces, cam, 32, 32)
    np.testing.assert_array_equal(fr.face, face)
    m = face >= 0
    np.testing.assert_allclose(fr.depth[m], depth[m], atol=1e-9)


def test_rasterize_deterministic(body, rng):
    pos = geometry.pose_positions(body, random_frame(body, rng))
    cam = Camera.from_params(synthdata.default_camera(48), 48, 48)
    a, b = render.rasterize(pos, body, cam), render.rasterize(pos, body, cam)
    assert a.face.tobytes() == b.face.tobytes() and a.iuv.tobytes() == b.iuv.tobytes()


@pytest.fixture(scope="module")
def scene(body):
    frames = [PoseFrame(0.05 * t * np.ones((body.n_joints, 3)) * [0, 1, 0], np.zeros(2)) for t in range(4)]
    meshes = [geometry.pose(body, f) for f in frames]
    derivs = motionfield.frame_derivatives(body, meshes, T=3)
    grid = uvbake.descriptor_grid(uvbake.get_raster(body, 32), derivs)
    return meshes[-1], grid


def test_transport_exhaustive_definitional(body, scene):
    mesh, grid = scene
    cam = Camera.from_params(synthdata.default_camera(32), 32, 32)
    fr = render.rasterize(mesh, body, cam)
    feats, miss = render.transport(grid, fr)
    assert miss == 0
    for r, c in np.argwhere(fr.mask):
        direct, _ = uvbake.sample(grid, fr.iuv[r, c, 1:][None])
        np.testing.assert_array_equal(feats[r, c], direct[0])
    assert not feats[~fr.mask].any()
    M, _ = render.transport_matrix(fr, grid.support)
    np.testing.assert_allclose((M @ grid.data.reshape(-1, grid.channels)).reshape(feats.shape), feats, atol=1e-12)


def test_transport_constant(body):
    g = uvbake.bake(body, np.ones((body.n_vertices, 2)) * [0.25, -1.0], resolution=32)
    fr = render.rasterize(body.vertices, body, Camera.from_params(synthdata.default_camera(32), 32, 32))
    feats, _ = render.transport(g, fr)
    np.testing.assert_allclose(feats[fr.mask], np.broadcast_to([0.25, -1.0], feats[fr.mask].shape), atol=1e-12)


def test_transport_translation_equivariance(body, scene):
    mesh, grid = scene
    p = synthdata.default_camera(48)
    a = render.rasterize(mesh, body, Camera.from_params(p, 48, 48))
    b = render.rasterize(mesh, body, Camera.from_params(p + [3, -2, 0], 48, 48))
    fa, _ = render.transport(grid, a)
    fb, _ = render.transport(grid, b)
    np.testing.assert_array_equal(b.face[:-2, 3:], a.face[2:, :-3])
    np.testing.assert_allclose(fb[:-2, 3:], fa[2:, :-3], atol=1e-12)


def test_equal_iuv_equal_features(body, scene):
    mesh, grid = scene
    fr = render.rasterize(mesh, body, Camera.from_params(synthdata.default_camera(64), 64, 64))
    feats, _ = render.transport(grid, fr)
    key = fr.iuv[fr.mask]
    _, inv = np.unique(key, axis=0, return_inverse=True)
    f = feats[fr.mask]
    for g in np.unique(inv):
        rows = f[inv.ravel() == g]
        assert (rows == rows[0]).all()


def test_relight_examples():
    A = np.full((2, 2, 3), 0.6)
    n = np.zeros((2, 2, 3))
    n[..., 2] = 1
    m = np.ones((2, 2), bool)
    np.testing.assert_allclose(render.relight(A, n, m, [0, 0, 1], ambient=0), A)
    np.testing.assert_allclose(render.relight(A, n, m, [1, 0, 0], ambient=0), 0)
    l = np.array([np.sqrt(0.75), 0, 0.5])
    np.testing.assert_allclose(render.relight(A, n, m, l, ambient=0.2), 0.6 * 0.6, atol=1e-12)
    with pytest.warns(RuntimeWarning):
        out = render.relight(A, n, m, [0, 0, 2.0], ambient=0)
    np.testing.assert_allclose(out, A)


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(8, 9, 3))
    render.save_png(tmp_path / "a.png", img)
    np.testing.assert_array_equal(render.load_png(tmp_path / "a.png"), render.to_uint8(img))
