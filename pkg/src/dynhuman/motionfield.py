"""Spatial and temporal derivatives of the posed surface, canonicalized."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry


class MotionFieldError(ValueError):
    pass


@dataclass
class FrameDerivatives:
    normals: np.ndarray      # (m, 3) canonical unit normals
    velocities: np.ndarray   # (T, m, 3) canonical, metres/frame, most recent first
    valid: np.ndarray        # (T,) False where history was too short (slab zero-filled)

    @property
    def T(self):
        return len(self.velocities)


def surface_normals(positions, faces) -> np.ndarray:
    """Angle-weighted vertex normals; zero-area faces are ignored."""
    p = np.asarray(positions, dtype=float)
    tri = p[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area2 = np.linalg.norm(n, axis=1)
    ok = area2 > 1e-14
    fn = np.zeros_like(n)
    fn[ok] = n[ok] / area2[ok, None]
    acc = np.zeros_like(p)
    for c in range(3):
        e1 = tri[:, (c + 1) % 3] - tri[:, c]
        e2 = tri[:, (c + 2) % 3] - tri[:, c]
        l1 = np.linalg.norm(e1, axis=1)
        l2 = np.linalg.norm(e2, axis=1)
        denom = np.where(ok, l1 * l2, 1.0)
        cos = np.clip(np.einsum("fk,fk->f", e1, e2) / denom, -1.0, 1.0)
        ang = np.where(ok, np.arccos(cos), 0.0)
        w = fn * ang[:, None]
        for k in range(3):
            acc[:, k] += np.bincount(faces[:, c], weights=w[:, k], minlength=len(p))
    norm = np.linalg.norm(acc, axis=1)
    if (norm < 1e-12).any():
        bad = int(np.argmax(norm < 1e-12))
        raise MotionFieldError(f"vertex {bad} has no incident non-degenerate face")
    return acc / norm[:, None]


def velocities(history, T: int = 10):
    """Backward differences ``V_k = p(t-k+1) - p(t-k)`` for k = 1..T.

    ``history`` holds posed meshes (or position arrays) oldest to newest, the
    current frame last. Slots without enough history are zero and flagged
    invalid.
    """
    if len(history) == 0:
        raise MotionFieldError("empty history")
    pos = [h.positions if hasattr(h, "positions") else np.asarray(h) for h in history]
    m = len(pos[-1])
    V = np.zeros((T, m, 3))
    valid = np.zeros(T, dtype=bool)
    for k in range(1, T + 1):
        if len(pos) > k:
            V[k - 1] = pos[-k] - pos[-k - 1]
            valid[k - 1] = True
    return V, valid


def canonicalize(mesh, normals, vel, valid=None) -> FrameDerivatives:
    """Apply the current frame's inverse skinning rotation to normals and every velocity slab."""
    vel = np.asarray(vel, dtype=float)
    if valid is None:
        valid = np.ones(len(vel), dtype=bool)
    n0 = geometry.inverse_skin(mesh, normals)
    v0 = geometry.inverse_skin(mesh, vel) if len(vel) else vel
    return FrameDerivatives(n0, v0, np.asarray(valid, dtype=bool))


def frame_derivatives(body, history, T: int = 10) -> FrameDerivatives:
    """Canonical normals + velocity history for the last mesh in ``history``."""
    mesh = history[-1]
    n = surface_normals(mesh.positions, body.faces)
    V, valid = velocities(history, T)
    return canonicalize(mesh, n, V, valid)


def sequence_derivatives(body, meshes, T: int = 10):
    """FrameDerivatives for every frame of a posed sequence."""
    return [frame_derivatives(body, meshes[max(0, i - T):i + 1], T) for i in range(len(meshes))]
