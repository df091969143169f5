"""Skinned body model: procedural humanoid, linear blend skinning and its inverse.

Coordinate convention (camera aligned): +X to the subject's left, +Y down,
+Z away from the camera. The rest body faces -Z, i.e. toward the viewer, so
weak-perspective projection ``(s*X + cx, s*Y + cy)`` renders it upright.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensorio import atomic_write_text


class ParameterError(ValueError):
    """Pose/shape parameters do not match the body."""


class BodyConfigError(ValueError):
    pass


class InvariantError(RuntimeError):
    pass


JOINT_NAMES = (
    "pelvis", "spine", "chest", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
JOINT_PARENTS = (-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14)
JOINT_REST = np.array([
    [0.0, 0.0, 0.0], [0.0, -0.15, 0.0], [0.0, -0.35, 0.0], [0.0, -0.55, 0.0],
    [0.17, -0.47, 0.0], [0.42, -0.47, 0.0], [0.66, -0.47, 0.0],
    [-0.17, -0.47, 0.0], [-0.42, -0.47, 0.0], [-0.66, -0.47, 0.0],
    [0.09, 0.06, 0.0], [0.09, 0.48, 0.0], [0.09, 0.88, 0.0],
    [-0.09, 0.06, 0.0], [-0.09, 0.48, 0.0], [-0.09, 0.88, 0.0],
])

# semantic classes; 0 is background
SEMANTIC_CLASSES = ("background", "top", "bottom", "face", "hair", "skin", "shoes")
TOP, BOTTOM, FACE, HAIR, SKIN, SHOES = 1, 2, 3, 4, 5, 6


def _limb(side, j0, j1, j2):
    s = 1.0 if side == "l" else -1.0
    y = -0.47
    return [
        (f"{side}_upper_arm", j0, (s * 0.12, y, 0), (s * 0.46, y, 0), (0.05, 0.05), TOP,
         [(0.0, {2: .5, j0: .5}), (0.25, {j0: 1}), (0.8, {j0: 1}), (1.0, {j0: .5, j1: .5})]),
        (f"{side}_forearm", j1, (s * 0.40, y, 0), (s * 0.68, y, 0), (0.04, 0.04), SKIN,
         [(0.0, {j0: .5, j1: .5}), (0.2, {j1: 1}), (0.8, {j1: 1}), (1.0, {j1: .5, j2: .5})]),
        (f"{side}_hand", j2, (s * 0.64, y, 0), (s * 0.82, y, 0), (0.035, 0.02), SKIN,
         [(0.0, {j1: .5, j2: .5}), (0.25, {j2: 1}), (1.0, {j2: 1})]),
    ]


def _leg(side, j0, j1, j2):
    x = 0.09 if side == "l" else -0.09
    return [
        (f"{side}_thigh", j0, (x, 0.0, 0), (x, 0.52, 0), (0.075, 0.075), SKIN,
         [(0.0, {0: .5, j0: .5}), (0.25, {j0: 1}), (0.8, {j0: 1}), (1.0, {j0: .5, j1: .5})]),
        (f"{side}_shin", j1, (x, 0.44, 0), (x, 0.92, 0), (0.05, 0.05), SKIN,
         [(0.0, {j0: .5, j1: .5}), (0.2, {j1: 1}), (0.8, {j1: 1}), (1.0, {j1: .5, j2: .5})]),
        (f"{side}_foot", j2, (x, 0.88, 0.03), (x, 0.93, -0.17), (0.04, 0.035), SHOES,
         [(0.0, {j1: .5, j2: .5}), (0.25, {j2: 1}), (1.0, {j2: 1})]),
    ]


# (name, primary joint, start tip, end tip, cross radii, semantic label, weight profile)
PART_TABLE = [
    ("lower_torso", 0, (0, 0.14, 0), (0, -0.18, 0), (0.15, 0.10), BOTTOM,
     [(0.0, {0: 1}), (0.7, {0: 1}), (1.0, {0: .5, 1: .5})]),
    ("upper_torso", 2, (0, -0.12, 0), (0, -0.56, 0), (0.17, 0.10), TOP,
     [(0.0, {0: .5, 1: .5}), (0.3, {1: 1}), (0.55, {1: .5, 2: .5}), (0.8, {2: 1}), (1.0, {2: 1})]),
    ("head", 3, (0, -0.52, 0), (0, -0.80, 0), (0.09, 0.10), FACE,
     [(0.0, {2: .5, 3: .5}), (0.25, {3: 1}), (1.0, {3: 1})]),
    *_limb("l", 4, 5, 6), *_limb("r", 7, 8, 9),
    *_leg("l", 10, 11, 12), *_leg("r", 13, 14, 15),
]


@dataclass(frozen=True)
class BodyConfig:
    n_around: int = 12      # vertices per ring
    n_rings: int = 11       # rings per part, poles excluded
    atlas_resolution: int = 64  # vertex UVs snap to texel centres at this resolution
    n_blendshapes: int = 2

    @property
    def vertex_budget(self):
        return len(PART_TABLE) * (2 + self.n_around * self.n_rings)


@dataclass
class CanonicalBody:
    vertices: np.ndarray        # (m, 3) rest positions, metres
    faces: np.ndarray           # (F, 3) int
    uv_corners: np.ndarray      # (F, 3, 2) in [0, 1]
    joint_parents: np.ndarray   # (J,)
    joint_rest: np.ndarray      # (J, 3)
    skin_weights: np.ndarray    # (m, J) dense, <= 4 nonzero per row
    blendshapes: np.ndarray     # (B, m, 3)
    part_labels: np.ndarray     # (F,) semantic class in 1..6
    face_parts: np.ndarray      # (F,) chart id in 1..P
    part_names: tuple = ()
    chart_rects: np.ndarray = None   # (P, 4) u0, v0, u1, v1
    joint_names: tuple = JOINT_NAMES
    part_joints: np.ndarray = None   # (P,) primary joint of each chart
    meta: dict = field(default_factory=dict)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_joints(self):
        return len(self.joint_parents)

    @property
    def n_parts(self):
        return len(self.part_names)

    @property
    def n_blendshapes(self):
        return len(self.blendshapes)

    def validate(self):
        w = self.skin_weights
        if (w < 0).any():
            raise InvariantError("negative skin weight")
        if np.abs(w.sum(1) - 1.0).max() > 1e-9:
            raise InvariantError("skin weights do not sum to one")
        if ((w > 0).sum(1) > 4).any():
            raise InvariantError("more than four influences on a vertex")
        roots = [j for j, p in enumerate(self.joint_parents) if p < 0]
        if len(roots) != 1 or roots[0] != 0:
            raise InvariantError("joint graph must be a tree rooted at joint 0")
        for j, p in enumerate(self.joint_parents):
            if p >= j and p >= 0:
                raise InvariantError("parents must precede children")
        uv = self.uv_corners
        if uv.min() < 0 or uv.max() > 1:
            raise InvariantError("UV corner outside [0, 1]^2")
        if len(self.part_labels) != len(self.faces) or (self.part_labels < 1).any():
            raise InvariantError("every face needs a part label")
        return self


@dataclass
class PoseFrame:
    theta: np.ndarray           # (J, 3) axis-angle, root first
    beta: np.ndarray            # (B,)
    camera: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))  # cx, cy, s

    @classmethod
    def rest(cls, body, camera=(0.0, 0.0, 1.0)):
        return cls(np.zeros((body.n_joints, 3)), np.zeros(body.n_blendshapes),
                   np.asarray(camera, dtype=float))

    def with_root(self, rotation):
        """Compose a global rotation (3x3) in front of the root joint rotation."""
        root = matrix_to_axis_angle(rotation @ rodrigues(self.theta[0]))
        theta = self.theta.copy()
        theta[0] = root
        return replace(self, theta=theta)


@dataclass
class PosedMesh:
    positions: np.ndarray         # (m, 3)
    vertex_rotations: np.ndarray  # (m, 3, 3), orthonormalized blended skinning rotation
    joint_transforms: np.ndarray  # (J, 4, 4) global joint transforms
    skin_transforms: np.ndarray = None  # (J, 3, 4) rest -> posed per joint

    @property
    def joints(self):
        return self.joint_transforms[:, :3, 3]


# --------------------------------------------------------------------------- rotations

def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def rodrigues(aa):
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    aa = np.asarray(aa, dtype=float)
    t2 = np.sum(aa * aa, axis=-1)[..., None, None]
    t = np.sqrt(t2)
    small = t2 < 1e-16
    ts = np.where(small, 1.0, t)
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(ts) / ts)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(ts)) / np.where(small, 1.0, t2))
    K = skew(aa)
    return np.eye(3) + a * K + b * (K @ K)


def rodrigues_derivatives(aa):
    """dR/d(aa_i) for i = 0..2, shape (..., 3, 3, 3) indexed [..., i, :, :]."""
    aa = np.asarray(aa, dtype=float)
    R = rodrigues(aa)
    t2 = np.sum(aa * aa, axis=-1)
    eye = np.eye(3)
    out = np.empty(aa.shape[:-1] + (3, 3, 3))
    E = skew(eye)  # generators [e_i]x
    for i in range(3):
        ei = eye[i]
        cross = np.cross(aa, ((eye - R) @ ei))
        num = aa[..., i, None, None] * skew(aa) + skew(cross)
        big = (num / np.where(t2 < 1e-16, 1.0, t2)[..., None, None]) @ R
        out[..., i, :, :] = np.where((t2 < 1e-16)[..., None, None], E[i], big)
    return out


def matrix_to_axis_angle(R):
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-8:
        return v / 2.0
    if np.pi - angle < 1e-6:
        # axis from the symmetric part
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis = axis / np.linalg.norm(axis)
        if np.dot(axis, v) < 0:
            axis = -axis
        return axis * angle
    return v * (angle / (2.0 * np.sin(angle)))


def polar_rotation(M):
    """Closest rotation to each 3x3 matrix in ``M`` (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    U[..., :, 2] *= d[..., None]
    return U @ Vt


# --------------------------------------------------------------------------- skinning

def _check_frame(body, frame):
    theta = np.asarray(frame.theta, dtype=float)
    if theta.shape != (body.n_joints, 3):
        raise ParameterError(f"theta must have shape ({body.n_joints}, 3), got {theta.shape}")
    beta = np.asarray(frame.beta, dtype=float)
    if beta.shape != (body.n_blendshapes,):
        raise ParameterError(f"beta must have length {body.n_blendshapes}, got {beta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ParameterError("non-finite axis-angle")
    return theta, beta


def shaped_vertices(body, beta):
    beta = np.asarray(beta, dtype=float)
    if not np.any(beta):
        return body.vertices
    return body.vertices + np.einsum("b,bvk->vk", beta, body.blendshapes)


def joint_globals(body, theta):
    """Global joint rotations (J,3,3) and translations (J,3)."""
    R = rodrigues(theta)
    J = body.joint_rest
    GR = np.empty_like(R)
    Gt = np.empty_like(J)
    for j, p in enumerate(body.joint_parents):
        if p < 0:
            GR[j], Gt[j] = R[j], J[j]
        else:
            GR[j] = GR[p] @ R[j]
            Gt[j] = GR[p] @ (J[j] - J[p]) + Gt[p]
    return GR, Gt


def pose(body: CanonicalBody, frame: PoseFrame) -> PosedMesh:
    """Linear blend skinning of the (shaped) canonical body."""
    theta, beta = _check_frame(body, frame)
    x = shaped_vertices(body, beta)
    GR, Gt = joint_globals(body, theta)
    Tt = Gt - np.einsum("jab,jb->ja", GR, body.joint_rest)
    W = body.skin_weights
    # blend transforms first, then apply once per vertex
    MR = np.einsum("vj,jab->vab", W, GR)
    Mt = W @ Tt
    positions = np.einsum("vab,vb->va", MR, x) + Mt
    if not np.any(theta):
        positions = x.copy()
    G = np.zeros((body.n_joints, 4, 4))
    G[:, :3, :3], G[:, :3, 3], G[:, 3, 3] = GR, Gt, 1.0
    skin = np.concatenate([GR, Tt[:, :, None]], axis=2)
    return PosedMesh(positions, polar_rotation(MR), G, skin)


def pose_positions(body: CanonicalBody, frame: PoseFrame) -> np.ndarray:
    """Skinned positions only (no per-vertex polar decomposition); equals ``pose(...).positions``."""
    theta, beta = _check_frame(body, frame)
    x = shaped_vertices(body, beta)
    if not np.any(theta):
        return x.copy()
    GR, Gt = joint_globals(body, theta)
    Tt = Gt - np.einsum("jab,jb->ja", GR, body.joint_rest)
    MR = np.einsum("vj,jab->vab", body.skin_weights, GR)
    return np.einsum("vab,vb->va", MR, x) + body.skin_weights @ Tt


def inverse_skin(mesh: PosedMesh, vectors) -> np.ndarray:
    """Rotate direction vectors back to the canonical frame (rotation part only)."""
    vectors = np.asarray(vectors, dtype=float)
    R = mesh.vertex_rotations
    if vectors.shape[-2:] != (len(R), 3):
        raise ParameterError("one 3-vector per vertex expected")
    err = np.abs(np.einsum("vba,vbc->vac", R, R) - np.eye(3)).max()
    if err > 1e-6:
        raise InvariantError(f"vertex rotations not orthonormal (err {err:.2e})")
    return np.einsum("vba,...vb->...va", R, vectors)


def apply_vertex_rotations(mesh: PosedMesh, vectors) -> np.ndarray:
    return np.einsum("vab,...vb->...va", mesh.vertex_rotations, vectors)


def subtree_mask(parents):
    """``mask[k, j]`` is True when joint ``j`` lies in the subtree rooted at ``k``."""
    J = len(parents)
    mask = np.eye(J, dtype=bool)
    for j in range(J):
        p = parents[j]
        while p >= 0:
            mask[p, j] = True
            p = parents[p]
    return mask


def pose_jacobian(body, frame, weights, rest_points):
    """Skinned positions of arbitrary surface points and their theta-Jacobian.

    ``weights`` (n, J) are the points' effective skinning weights and
    ``rest_points`` (n, 3) their shaped rest positions (e.g. barycentric blends
    of vertices). Returns positions (n, 3) and d(position)/d(theta) as
    (n, 3, 3J) with theta flattened row-major.
    """
    W, X = weights, rest_points
    theta, beta = _check_frame(body, frame)
    GR, Gt = joint_globals(body, theta)
    Tt = Gt - np.einsum("jab,jb->ja", GR, body.joint_rest)
    # per-joint posed contribution (homogeneous): q[n, j] = W[n,j] * (T_j x_n, 1)
    Tx = np.einsum("jab,nb->nja", GR, X) + Tt[None]
    pos = np.einsum("nj,nja->na", W, Tx)
    sub = subtree_mask(body.joint_parents).astype(float)  # (k, j)
    q3 = np.einsum("kj,nj,nja->kna", sub, W, Tx)          # subtree-partial positions
    q1 = W @ sub.T                                          # (n, k) subtree weight
    dR = rodrigues_derivatives(theta)                       # (J, 3, 3, 3)
    R = rodrigues(theta)
    J = body.n_joints
    jac = np.zeros((len(X), 3, 3 * J))
    for k, p in enumerate(body.joint_parents):
        if not q1[:, k].any():
            continue
        PR = GR[p] if p >= 0 else np.eye(3)
        Pt = Gt[p] if p >= 0 else np.zeros(3)
        tk = body.joint_rest[k] - (body.joint_rest[p] if p >= 0 else 0.0)
        for i in range(3):
            # dG_j = Omega G_j for j in subtree(k), Omega = P [A, -A t_k] P^-1
            A = dR[k, i] @ R[k].T
            OR = PR @ A @ PR.T
            Ot = -OR @ Pt - PR @ A @ tk
            jac[:, :, 3 * k + i] = q3[k] @ OR.T + q1[:, k, None] * Ot
    return pos, jac


# --------------------------------------------------------------------------- procedural body

def _profile_weights(profile, s, n_joints):
    knots = np.array([k for k, _ in profile])
    W = np.zeros((len(s), n_joints))
    for j in {j for _, d in profile for j in d}:
        vals = np.array([d.get(j, 0.0) for _, d in profile])
        W[:, j] = np.interp(s, knots, vals)
    return W / W.sum(1, keepdims=True)


def _frame_for_axis(a):
    # e1 horizontal-ish, e2 completes a right-handed frame
    ref = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(a, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    return e1, e2


def procedural_body(config: BodyConfig | None = None, **overrides) -> CanonicalBody:
    """Capsule-limbed humanoid with one UV chart per body part (deterministic)."""
    cfg = replace(config or BodyConfig(), **overrides)
    na, nr = cfg.n_around, cfg.n_rings
    if na < 3 or nr < 2:
        raise BodyConfigError("need n_around >= 3 and n_rings >= 2 to triangulate")
    if cfg.atlas_resolution < 8:
        raise BodyConfigError("atlas_resolution must be >= 8")
    nJ = len(JOINT_NAMES)
    P = len(PART_TABLE)
    grid = int(np.ceil(np.sqrt(P)))
    R = cfg.atlas_resolution
    cell = R / grid
    span = max(na, nr + 1)
    room = cell - 3  # leave a gap of >= 3 texels between charts
    # whole-texel steps keep every vertex UV on a texel centre
    step = float(np.floor(room / span)) if room >= span else room / span

    verts, faces, uvs, W_all, labels, fparts, vparts, s_all, radial = [], [], [], [], [], [], [], [], []
    rects, pj = [], []
    base = 0
    for pid, (name, joint, start, end, (ra, rb), label, profile) in enumerate(PART_TABLE):
        start, end = np.asarray(start, float), np.asarray(end, float)
        axis = end - start
        L = np.linalg.norm(axis)
        a = axis / L
        e1, e2 = _frame_for_axis(a)
        mid = (start + end) / 2.0
        # ring vertices; row 0 = start pole, rows 1..nr rings, row nr+1 = end pole
        phi = np.pi * np.arange(1, nr + 1) / (nr + 1)
        # start the UV columns at the ring vertex facing +Z so the chart seam sits on the
        # far side of the part (the rounding keeps the vertex positions unchanged)
        k0 = np.round(np.arctan2(e2[2], e1[2]) / (2.0 * np.pi / na))
        alpha = 2.0 * np.pi * (np.arange(na) + k0) / na
        rho = np.sin(phi) ** 0.6
        ring = (mid[None, None]
                - (L / 2) * np.cos(phi)[:, None, None] * a
                + rho[:, None, None] * (ra * np.cos(alpha)[None, :, None] * e1
                                        + rb * np.sin(alpha)[None, :, None] * e2))
        rad = (np.cos(alpha)[None, :, None] * e1 + np.sin(alpha)[None, :, None] * e2) \
            * rho[:, None, None] * np.ones((nr, 1, 1))
        pv = np.concatenate([start[None], ring.reshape(-1, 3), end[None]])
        prad = np.concatenate([np.zeros((1, 3)), rad.reshape(-1, 3), np.zeros((1, 3))])
        s = np.clip((pv - start) @ a / L, 0.0, 1.0)
        W = _profile_weights(profile, s, nJ)

        def vid(row, col):
            if row == 0:
                return base
            if row == nr + 1:
                return base + 1 + nr * na
            return base + 1 + (row - 1) * na + (col % na)

        gx, gy = pid % grid, pid // grid
        ox = gx * cell + (cell - span * step) / 2.0
        oy = gy * cell + (cell - span * step) / 2.0
        if step >= 1.0:
            ox, oy = np.floor(ox) + 0.5, np.floor(oy) + 0.5

        def uv(row, col):
            return ((ox + col * step) / R, (oy + row * step) / R)

        pf, pu = [], []
        for col in range(na):
            pf.append((vid(0, col), vid(1, col + 1), vid(1, col)))
            pu.append((uv(0, col), uv(1, col + 1), uv(1, col)))
        for row in range(1, nr):
            for col in range(na):
                a0, b0 = vid(row, col), vid(row, col + 1)
                a1, b1 = vid(row + 1, col), vid(row + 1, col + 1)
                pf += [(a0, b0, b1), (a0, b1, a1)]
                pu += [(uv(row, col), uv(row, col + 1), uv(row + 1, col + 1)),
                       (uv(row, col), uv(row + 1, col + 1), uv(row + 1, col))]
        for col in range(na):
            pf.append((vid(nr, col), vid(nr, col + 1), vid(nr + 1, col)))
            pu.append((uv(nr, col), uv(nr, col + 1), uv(nr + 1, col)))
        pf = np.array(pf)
        pu = np.array(pu)
        # orient outward
        allv = np.concatenate(verts + [pv]) if verts else pv
        tri = allv[pf]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        if np.sum(np.einsum("fk,fk->f", tri.mean(1) - mid, n)) < 0:
            pf = pf[:, ::-1]
            pu = pu[:, ::-1]
        flab = np.full(len(pf), label)
        if name == "head":
            cen = allv[pf].mean(1)
            hair = (cen[:, 2] > 0.02) | (cen[:, 1] < -0.74)
            flab[hair] = HAIR
        verts.append(pv)
        faces.append(pf)
        uvs.append(pu)
        W_all.append(W)
        labels.append(flab)
        fparts.append(np.full(len(pf), pid + 1))
        vparts.append(np.full(len(pv), pid + 1))
        radial.append(prad)
        us = [ox / R, oy / R, (ox + na * step) / R, (oy + (nr + 1) * step) / R]
        rects.append(us)
        pj.append(joint)
        base += len(pv)

    vertices = np.concatenate(verts)
    radial = np.concatenate(radial)
    vparts = np.concatenate(vparts)
    torso = np.isin(vparts, [1, 2])
    blend = np.zeros((cfg.n_blendshapes, len(vertices), 3))
    if cfg.n_blendshapes > 0:
        blend[0] = 0.03 * radial * torso[:, None]          # torso girth
    if cfg.n_blendshapes > 1:
        blend[1] = 0.015 * radial * (~torso)[:, None]      # limb thickness
    for b in range(2, cfg.n_blendshapes):
        blend[b] = 0.01 * radial * np.sin(b * vertices[:, 1:2])
    body = CanonicalBody(
        vertices=vertices,
        faces=np.concatenate(faces).astype(np.int64),
        uv_corners=np.concatenate(uvs).astype(float),
        joint_parents=np.array(JOINT_PARENTS),
        joint_rest=JOINT_REST.copy(),
        skin_weights=np.concatenate(W_all),
        blendshapes=blend,
        part_labels=np.concatenate(labels).astype(np.int64),
        face_parts=np.concatenate(fparts).astype(np.int64),
        part_names=tuple(p[0] for p in PART_TABLE),
        chart_rects=np.array(rects),
        part_joints=np.array(pj),
        meta={"config": {"n_around": na, "n_rings": nr, "atlas_resolution": R,
                         "n_blendshapes": cfg.n_blendshapes}},
    )
    return body.validate()


def vertex_corner_uvs(body):
    """Map vertex id -> array of all its corner UVs (k, 2)."""
    idx = body.faces.reshape(-1)
    uv = body.uv_corners.reshape(-1, 2)
    order = np.argsort(idx, kind="stable")
    splits = np.searchsorted(idx[order], np.arange(body.n_vertices + 1))
    return [uv[order[splits[v]:splits[v + 1]]] for v in range(body.n_vertices)]


def is_watertight(faces) -> bool:
    """Every undirected edge shared by exactly two faces with opposite orientation."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    directed = {tuple(x) for x in e.tolist()}
    if len(directed) != len(e):
        return False
    return all((b, a) in directed for a, b in directed)


# --------------------------------------------------------------------------- I/O

def save_body(body: CanonicalBody, obj_path) -> None:
    """Write ``<name>.obj`` (v / vt / f v/vt) and a ``<name>.json`` sidecar."""
    obj_path = Path(obj_path)
    uv = body.uv_corners.reshape(-1, 2)
    uniq, inv = np.unique(uv, axis=0, return_inverse=True)
    inv = inv.reshape(-1, 3)
    lines = ["# dynhuman body"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in body.vertices.tolist()]
    lines += [f"vt {u!r} {v!r}" for u, v in uniq.tolist()]
    for f, t in zip(body.faces.tolist(), inv.tolist()):
        lines.append("f " + " ".join(f"{a + 1}/{b + 1}" for a, b in zip(f, t)))
    atomic_write_text(obj_path, "\n".join(lines) + "\n")
    W = body.skin_weights
    sparse = [[[int(j), float(W[v, j])] for j in np.nonzero(W[v])[0]] for v in range(len(W))]
    side = {
        "format": "dynhuman-body/1",
        "joint_names": list(body.joint_names),
        "joint_parents": [int(p) for p in body.joint_parents],
        "joint_rest": body.joint_rest.tolist(),
        "skin_weights": sparse,
        "blendshapes": body.blendshapes.tolist(),
        "part_labels": body.part_labels.tolist(),
        "face_parts": body.face_parts.tolist(),
        "part_names": list(body.part_names),
        "chart_rects": None if body.chart_rects is None else body.chart_rects.tolist(),
        "part_joints": None if body.part_joints is None else body.part_joints.tolist(),
        "meta": body.meta,
    }
    atomic_write_text(obj_path.with_suffix(".json"), json.dumps(side))


def load_body(obj_path) -> CanonicalBody:
    obj_path = Path(obj_path)
    v, vt, f, ft = [], [], [], []
    for line in obj_path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            v.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            vt.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise BodyConfigError("only triangle faces are supported")
            idx = [p.split("/") for p in parts[1:]]
            f.append([int(a[0]) - 1 for a in idx])
            ft.append([int(a[1]) - 1 for a in idx])
    side = json.loads(obj_path.with_suffix(".json").read_text())
    nJ = len(side["joint_parents"])
    W = np.zeros((len(v), nJ))
    for i, row in enumerate(side["skin_weights"]):
        for j, w in row:
            W[i, j] = w
    vt = np.array(vt)
    body = CanonicalBody(
        vertices=np.array(v),
        faces=np.array(f, dtype=np.int64),
        uv_corners=vt[np.array(ft)],
        joint_parents=np.array(side["joint_parents"]),
        joint_rest=np.array(side["joint_rest"]),
        skin_weights=W,
        blendshapes=np.array(side["blendshapes"]).reshape(-1, len(v), 3),
        part_labels=np.array(side["part_labels"], dtype=np.int64),
        face_parts=np.array(side["face_parts"], dtype=np.int64),
        part_names=tuple(side["part_names"]),
        chart_rects=None if side.get("chart_rects") is None else np.array(side["chart_rects"]),
        joint_names=tuple(side["joint_names"]),
        part_joints=None if side.get("part_joints") is None else np.array(side["part_joints"]),
        meta=side.get("meta", {}),
    )
    return body.validate()
