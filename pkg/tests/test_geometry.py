import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynhuman import geometry
from dynhuman.geometry import PoseFrame

from conftest import random_frame, random_rotation


def _chain_body():
    """Two-joint chain: shoulder at the origin, elbow at (1,0,0)."""
    verts = np.array([[2.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.5, 0.1, 0.0]])
    W = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    return geometry.CanonicalBody(
        vertices=verts, faces=np.array([[0, 1, 2]]), uv_corners=np.full((1, 3, 2), 0.5),
        joint_parents=np.array([-1, 0]), joint_rest=np.array([[0.0, 0, 0], [1.0, 0, 0]]),
        skin_weights=W, blendshapes=np.zeros((0, 3, 3)), part_labels=np.array([1]),
        face_parts=np.array([1]))


def test_default_body_budget_and_validity(body):
    assert 1800 <= body.n_vertices <= 2200
    assert body.n_joints == 16
    body.validate()
    for part in range(1, body.n_parts + 1):
        assert geometry.is_watertight(body.faces[body.face_parts == part])
    assert geometry.is_watertight(body.faces)


def test_body_invariants(body):
    w = body.skin_weights
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-9)
    assert body.uv_corners.min() >= 0 and body.uv_corners.max() <= 1
    assert set(np.unique(body.part_labels)) <= set(range(1, len(geometry.SEMANTIC_CLASSES)))
    # tree rooted at joint 0
    assert body.joint_parents[0] == -1
    assert all(0 <= p < j for j, p in enumerate(body.joint_parents) if j)


def test_body_deterministic():
    a, b = geometry.procedural_body(), geometry.procedural_body()
    assert a.vertices.tobytes() == b.vertices.tobytes()
    assert a.faces.tobytes() == b.faces.tobytes()
    assert a.uv_corners.tobytes() == b.uv_corners.tobytes()


def test_body_subdivision_monotone(body):
    finer = geometry.procedural_body(n_rings=22)
    assert finer.n_vertices > body.n_vertices


def test_body_budget_too_small():
    with pytest.raises(geometry.BodyConfigError):
        geometry.procedural_body(n_around=2)


def test_identity_pose_exact(body):
    mesh = geometry.pose(body, PoseFrame.rest(body))
    assert mesh.positions.tobytes() == body.vertices.tobytes()
    np.testing.assert_allclose(mesh.vertex_rotations, np.broadcast_to(np.eye(3), mesh.vertex_rotations.shape), atol=1e-12)


def test_root_rotation_rigid(body, rng):
    theta = np.zeros((body.n_joints, 3))
    theta[0] = [0.3, -1.1, 0.4]
    R = geometry.rodrigues(theta[0])
    mesh = geometry.pose(body, PoseFrame(theta, np.zeros(body.n_blendshapes)))
    J0 = body.joint_rest[0]
    np.testing.assert_allclose(mesh.positions, (body.vertices - J0) @ R.T + J0, atol=1e-12)
    np.testing.assert_allclose(mesh.vertex_rotations, np.broadcast_to(R, mesh.vertex_rotations.shape), atol=1e-12)


def test_elbow_chain_hand_evaluation():
    cb = _chain_body()
    theta = np.zeros((2, 3))
    theta[0] = [0.0, np.pi / 2, 0.0]   # root: 90 deg about +Y
    theta[1] = [0.0, 0.0, np.pi / 2]   # elbow: 90 deg about +Z
    mesh = geometry.pose(cb, PoseFrame(theta, np.zeros(0)))
    # Rz(90) (2,0,0) about (1,0,0) -> (1,1,0); Ry(90) (1,1,0) -> (0,1,-1)
    np.testing.assert_allclose(mesh.positions[0], [0.0, 1.0, -1.0], atol=1e-12)
    # shoulder-weighted vertex follows the root only: (0.5,0,0) -> (0,0,-0.5)
    np.testing.assert_allclose(mesh.positions[1], [0.0, 0.0, -0.5], atol=1e-12)
    # forearm normal (0,1,0) poses to (0,0,1); inverse skin recovers it
    posed_n = np.array([[0.0, 0.0, 1.0], [0, 0, 1], [0, 0, 1]])
    np.testing.assert_allclose(geometry.apply_vertex_rotations(mesh, [[0, 1.0, 0]] * 3)[0], posed_n[0], atol=1e-12)
    np.testing.assert_allclose(geometry.inverse_skin(mesh, posed_n)[0], [0.0, 1.0, 0.0], atol=1e-12)


def test_pose_dimension_errors(body):
    with pytest.raises(geometry.ParameterError):
        geometry.pose(body, PoseFrame(np.zeros((3, 3)), np.zeros(body.n_blendshapes)))
    with pytest.raises(geometry.ParameterError):
        geometry.pose(body, PoseFrame(np.zeros((body.n_joints, 3)), np.zeros(7)))


def test_inverse_skin_rejects_non_orthonormal(body):
    mesh = geometry.pose(body, PoseFrame.rest(body))
    mesh.vertex_rotations = mesh.vertex_rotations * 1.01
    with pytest.raises(geometry.InvariantError):
        geometry.inverse_skin(mesh, np.zeros((body.n_vertices, 3)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_equivariance(body, seed):
    rng = np.random.default_rng(seed)
    frame = random_frame(body, rng)
    R = random_rotation(rng)
    a = geometry.pose(body, frame)
    b = geometry.pose(body, frame.with_root(R))
    J0 = body.joint_rest[0]
    np.testing.assert_allclose(b.positions - J0, (a.positions - J0) @ R.T, atol=1e-9)
    np.testing.assert_allclose(b.vertex_rotations, R @ a.vertex_rotations, atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_inverse_skin_roundtrip(body, seed):
    rng = np.random.default_rng(seed)
    mesh = geometry.pose(body, random_frame(body, rng))
    v = rng.normal(size=(body.n_vertices, 3))
    np.testing.assert_allclose(geometry.inverse_skin(mesh, geometry.apply_vertex_rotations(mesh, v)), v, atol=1e-9)
    err = np.abs(np.einsum("vba,vbc->vac", mesh.vertex_rotations, mesh.vertex_rotations) - np.eye(3)).max()
    assert err < 1e-6


def test_pose_positions_matches_pose(body, rng):
    frame = random_frame(body, rng)
    np.testing.assert_allclose(geometry.pose_positions(body, frame), geometry.pose(body, frame).positions, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_axis_angle_roundtrip(aa):
    aa = np.array(aa)
    R = geometry.rodrigues(aa)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(geometry.rodrigues(geometry.matrix_to_axis_angle(R)), R, atol=1e-9)


def test_pose_jacobian_matches_finite_difference(body, rng):
    frame = random_frame(body, rng)
    idx = rng.choice(body.n_vertices, 40, replace=False)
    W, X = body.skin_weights[idx], geometry.shaped_vertices(body, frame.beta)[idx]
    pos, jac = geometry.pose_jacobian(body, frame, W, X)
    np.testing.assert_allclose(pos, geometry.pose_positions(body, frame)[idx], atol=1e-12)
    h = 1e-6
    for k in rng.choice(3 * body.n_joints, 12, replace=False):
        tp, tm = frame.theta.copy(), frame.theta.copy()
        tp.flat[k] += h
        tm.flat[k] -= h
        fp = geometry.pose_positions(body, PoseFrame(tp, frame.beta))[idx]
        fm = geometry.pose_positions(body, PoseFrame(tm, frame.beta))[idx]
        np.testing.assert_allclose(jac[:, :, k], (fp - fm) / (2 * h), atol=1e-7)


def test_save_load_roundtrip(body, tmp_path):
    p = tmp_path / "body.obj"
    geometry.save_body(body, p)
    b2 = geometry.load_body(p)
    np.testing.assert_allclose(b2.vertices, body.vertices, atol=1e-12)
    np.testing.assert_array_equal(b2.faces, body.faces)
    np.testing.assert_allclose(b2.skin_weights.sum(1), 1.0, atol=1e-9)
    np.testing.assert_allclose(b2.skin_weights, body.skin_weights, atol=1e-12)
    np.testing.assert_allclose(b2.uv_corners, body.uv_corners, atol=1e-12)
    b2.validate()
