"""Model-based monocular tracking: fit per-frame pose and weak-perspective camera
to dense IUV observations.

Objective per sequence (summed over frames):

    L_f + lambda_r L_r + lambda_d L_d + lambda_t L_t

L_f, L_d and L_t have analytic gradients; L_r (rendered vs observed UV) is
differentiated by central differences in parameter space.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, render
from .autodiff.optim import AdamState, adam_step


DIVERGENCE_FLOOR = 0.1   # per frame; a near-zero starting loss would otherwise trip the 10x rule


class TrackDivergence(RuntimeError):
    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


@dataclass
class TrackConfig:
    steps: int = 150
    lr: float = 0.01
    lr_final: float = 1e-4      # cosine decay target; the norm terms are not smooth at their minima
    lambda_r: float = 1.0
    lambda_d: float = 0.1
    lambda_t: float = 0.01
    fd_step: float = 1e-4
    render_refresh: int = 2     # frames whose L_r gradient is recomputed per step
    image_size: int = 64
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        bad = set(d) - set(cls.__dataclass_fields__)
        if bad:
            raise ValueError(f"unknown tracking config field(s): {sorted(bad)}")
        return cls(**d)


# --------------------------------------------------------------------------- observations

@dataclass
class Observation:
    iuv: np.ndarray          # (h, w, 3) chart id, u, v
    pixels: np.ndarray       # (n, 2) pixel-centre coordinates (x, y)
    faces: np.ndarray        # (n,) face containing the observed surface point
    bary: np.ndarray         # (n, 3) barycentrics of that point
    vertex_ids: np.ndarray   # (n,) nearest vertex of the face

    @property
    def mask(self):
        return self.iuv[..., 0] > 0

    def __len__(self):
        return len(self.pixels)


def uv_lookup(body, chart, uv, eps=1e-9):
    """Surface point (face, barycentric) for each (chart, uv); face -1 if none."""
    chart = np.asarray(chart, dtype=np.int64)
    uv = np.asarray(uv, dtype=float)
    face = np.full(len(uv), -1, dtype=np.int64)
    bary = np.zeros((len(uv), 3))
    for c in np.unique(chart):
        sel = np.flatnonzero(chart == c)
        fids = np.flatnonzero(body.face_parts == c)
        tri = body.uv_corners[fids]                                   # (f, 3, 2)
        a, b, cc = tri[:, 0], tri[:, 1], tri[:, 2]
        ab, ac = b - a, cc - a
        d = ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0]
        ok = np.abs(d) > 1e-18
        q = uv[sel][:, None, :] - a[None]                             # (n, f, 2)
        wb = (q[..., 0] * ac[:, 1] - q[..., 1] * ac[:, 0]) / np.where(ok, d, 1.0)
        wc = (ab[:, 0] * q[..., 1] - ab[:, 1] * q[..., 0]) / np.where(ok, d, 1.0)
        wa = 1.0 - wb - wc
        inside = ok & (wa >= -eps) & (wb >= -eps) & (wc >= -eps)
        hit = inside.any(1)
        first = np.argmax(inside, axis=1)                             # lowest face index wins
        rows = sel[hit]
        k = first[hit]
        face[rows] = fids[k]
        bary[rows] = np.stack([wa[hit, k], wb[hit, k], wc[hit, k]], axis=1)
    return face, bary


def observe(body, frame: geometry.PoseFrame, size=64, uv_noise=0.0, dropout=0.0, rng=None):
    """Render a dense IUV observation and derive pixel -> surface-point correspondences."""
    cam = render.Camera.from_params(frame.camera, size, size)
    fr = render.rasterize(geometry.pose_positions(body, frame), body, cam)
    iuv = fr.iuv.copy()
    rng = rng if rng is not None else np.random.default_rng(0)
    m = fr.mask
    if uv_noise > 0:
        iuv[m, 1:] = np.clip(iuv[m, 1:] + rng.normal(0, uv_noise, (m.sum(), 2)), 0.0, 1.0)
    return observation_from_iuv(body, iuv, dropout, rng)


def observation_from_iuv(body, iuv, dropout=0.0, rng=None):
    m = iuv[..., 0] > 0
    rows, cols = np.nonzero(m)
    if dropout > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        keep = rng.uniform(size=len(rows)) >= dropout
        rows, cols = rows[keep], cols[keep]
    chart = np.rint(iuv[rows, cols, 0]).astype(np.int64)
    face, bary = uv_lookup(body, chart, iuv[rows, cols, 1:])
    good = face >= 0
    rows, cols, face, bary = rows[good], cols[good], face[good], bary[good]
    vids = body.faces[face, np.argmax(bary, axis=1)] if len(face) else np.zeros(0, np.int64)
    pix = np.stack([cols + 0.5, rows + 0.5], axis=1).astype(float)
    return Observation(iuv, pix, face, bary, vids)


# --------------------------------------------------------------------------- state

@dataclass
class TrackState:
    theta: np.ndarray         # (N, J, 3)
    cam: np.ndarray           # (N, 3) cx, cy, s
    theta_prior: np.ndarray | None
    cam_prior: np.ndarray | None
    beta: np.ndarray
    adam: AdamState = field(default_factory=AdamState)

    def __post_init__(self):
        if self.theta.shape[0] != self.cam.shape[0]:
            raise ValueError("theta and camera sequences differ in length")

    def __len__(self):
        return len(self.theta)

    def frame(self, t):
        return geometry.PoseFrame(self.theta[t], self.beta, self.cam[t])


def _unit_rows(r, eps=1e-12):
    n = np.linalg.norm(r, axis=-1, keepdims=True)
    return np.where(n > eps, r / np.where(n > eps, n, 1.0), 0.0), n[..., 0]


# --------------------------------------------------------------------------- loss terms

def fitting_loss(body, state: TrackState, obs: Observation, t, grad=False):
    """Mean 2D distance between projected observed surface points and their pixels.

    Returns the value, or (value, d/dtheta (J, 3), d/dcamera (3,)) with ``grad``.
    """
    if len(obs) == 0:
        warnings.warn(f"frame {t}: no correspondences, L_f skipped", RuntimeWarning, stacklevel=2)
        return (0.0, np.zeros_like(state.theta[t]), np.zeros(3)) if grad else 0.0
    frame = state.frame(t)
    cx, cy, s = state.cam[t]
    vids, inv = np.unique(body.faces[obs.faces], return_inverse=True)
    inv = inv.reshape(-1, 3)
    x = geometry.shaped_vertices(body, state.beta)[vids]
    if grad:
        pos, jac = geometry.pose_jacobian(body, frame, body.skin_weights[vids], x)
    else:
        pos = geometry.pose_positions(body, frame)[vids]
    X = np.einsum("nk,nka->na", obs.bary, pos[inv])
    r = s * X[:, :2] + np.array([cx, cy]) - obs.pixels
    u, dist = _unit_rows(r)
    val = float(dist.mean())
    if not grad:
        return val
    n = len(r)
    JX = np.einsum("nk,nkab->nab", obs.bary, jac[inv][:, :, :2])      # (n, 2, 3J)
    g_theta = s * np.einsum("na,nab->b", u, JX) / n
    g_cam = np.array([u[:, 0].mean(), u[:, 1].mean(), np.einsum("na,na->n", u, X[:, :2]).mean()])
    return val, g_theta.reshape(state.theta[t].shape), g_cam


def render_loss(body, state: TrackState, obs: Observation, t, size=None, report=False):
    """Mean per-pixel |du| + |dv| on the intersection of rendered and observed masks."""
    size = size or obs.iuv.shape[0]
    frame = state.frame(t)
    cam = render.Camera.from_params(state.cam[t], size, size)
    pos = geometry.pose_positions(body, frame)
    face, bary, _ = render.rasterize_triangles(render.project(cam, pos), pos[:, 2], body.faces, size, size)
    m = (face >= 0) & obs.mask
    if not m.any():
        warnings.warn(f"frame {t}: rendered and observed masks do not overlap", RuntimeWarning,
                      stacklevel=2)
        return (0.0, 0.0) if report else 0.0
    fm = face[m]
    uv = np.einsum("nk,nkc->nc", bary[m], body.uv_corners[fm])
    val = float(np.abs(uv - obs.iuv[m, 1:]).sum(1).mean())
    if report:
        disagree = float((body.face_parts[fm] != np.rint(obs.iuv[m, 0])).mean())
        return val, disagree
    return val


def render_loss_grad(body, state: TrackState, obs, t, h=1e-4):
    """Central differences of L_r over the frame's pose and camera parameters.

    L_r is an L1 and has a kink at its minimum, where the central difference
    is noise; along any coordinate whose centre value is no larger than both
    neighbours the (sub)gradient 0 is returned instead.
    """
    th0, c0 = state.theta[t].copy(), state.cam[t].copy()
    g_th = np.zeros(th0.size)
    g_c = np.zeros(3)
    flat = state.theta[t].reshape(-1)
    f0 = render_loss(body, state, obs, t)

    def diff(fp, fm):
        return 0.0 if min(fp, fm) >= f0 else (fp - fm) / (2 * h)
    try:
        for i in range(th0.size):
            flat[i] = th0.reshape(-1)[i] + h
            fp = render_loss(body, state, obs, t)
            flat[i] = th0.reshape(-1)[i] - h
            fm = render_loss(body, state, obs, t)
            flat[i] = th0.reshape(-1)[i]
            g_th[i] = diff(fp, fm)
        for i in range(3):
            state.cam[t, i] = c0[i] + h
            fp = render_loss(body, state, obs, t)
            state.cam[t, i] = c0[i] - h
            fm = render_loss(body, state, obs, t)
            state.cam[t, i] = c0[i]
            g_c[i] = diff(fp, fm)
    finally:
        state.theta[t] = th0
        state.cam[t] = c0
    return g_th.reshape(th0.shape), g_c


def prior_loss(state: TrackState, t, grad=False):
    """||theta_t - prior|| + ||C_t - prior|| (L2)."""
    val = 0.0
    g_th, g_c = np.zeros_like(state.theta[t]), np.zeros(3)
    if state.theta_prior is None and state.cam_prior is None:
        warnings.warn("no priors loaded; L_d omitted", RuntimeWarning, stacklevel=2)
    if state.theta_prior is not None:
        d = (state.theta[t] - state.theta_prior[t]).reshape(-1)
        u, n = _unit_rows(d)
        val += float(n)
        g_th = u.reshape(g_th.shape)
    if state.cam_prior is not None:
        u, n = _unit_rows(state.cam[t] - state.cam_prior[t])
        val += float(n)
        g_c = u
    return (val, g_th, g_c) if grad else val


def temporal_loss(state: TrackState, t, grad=False):
    """Sum of norms to the neighbouring frames (one-sided at the ends)."""
    val = 0.0
    g_th, g_c = np.zeros_like(state.theta[t]), np.zeros(3)
    for nb in (t - 1, t + 1):
        if 0 <= nb < len(state):
            u, n = _unit_rows((state.theta[t] - state.theta[nb]).reshape(-1))
            val += float(n)
            g_th += u.reshape(g_th.shape)
            u, n = _unit_rows(state.cam[t] - state.cam[nb])
            val += float(n)
            g_c += u
    return (val, g_th, g_c) if grad else val


def total_loss(body, state, observations, cfg: TrackConfig, with_render=True):
    terms = {"L_f": 0.0, "L_r": 0.0, "L_d": 0.0, "L_t": 0.0}
    for t in range(len(state)):
        terms["L_f"] += fitting_loss(body, state, observations[t], t)
        if with_render and cfg.lambda_r:
            terms["L_r"] += render_loss(body, state, observations[t], t, cfg.image_size)
        if state.theta_prior is not None or state.cam_prior is not None:
            terms["L_d"] += prior_loss(state, t)
        terms["L_t"] += temporal_loss(state, t)
    total = terms["L_f"] + cfg.lambda_r * terms["L_r"] + cfg.lambda_d * terms["L_d"] \
        + cfg.lambda_t * terms["L_t"]
    return total, terms


# --------------------------------------------------------------------------- optimisation

@dataclass
class TrackResult:
    state: TrackState
    history: list             # (step, total, L_f, L_r, L_d, L_t)
    init_error: np.ndarray | None = None
    final_error: np.ndarray | None = None
    final_error_std: np.ndarray | None = None


def _frame_gradients(body, state, observations, cfg, render_cache):
    N = len(state)
    g_th = np.zeros_like(state.theta)
    g_c = np.zeros_like(state.cam)
    have_prior = state.theta_prior is not None or state.cam_prior is not None
    for t in range(N):
        _, gt_, gc_ = fitting_loss(body, state, observations[t], t, grad=True)
        g_th[t] += gt_
        g_c[t] += gc_
        if have_prior and cfg.lambda_d:
            _, gt_, gc_ = prior_loss(state, t, grad=True)
            g_th[t] += cfg.lambda_d * gt_
            g_c[t] += cfg.lambda_d * gc_
        if cfg.lambda_r and t in render_cache:
            gt_, gc_ = render_cache[t]
            g_th[t] += cfg.lambda_r * gt_
            g_c[t] += cfg.lambda_r * gc_
    if cfg.lambda_t and N > 1:
        # sum_t L_t(t) counts every neighbour pair twice
        for a, b in ((state.theta.reshape(N, -1), g_th.reshape(N, -1)), (state.cam, g_c)):
            u, _ = _unit_rows(a[1:] - a[:-1])
            b[1:] += 2 * cfg.lambda_t * u
            b[:-1] -= 2 * cfg.lambda_t * u
    return g_th, g_c


def projection_errors(body, state, gt_frames, size=64):
    """Per-frame mean and std of per-vertex 2D projection error (pixels)."""
    means, stds = [], []
    for t, g in enumerate(gt_frames):
        pc = render.project(render.Camera.from_params(state.cam[t], size, size),
                            geometry.pose_positions(body, state.frame(t)))
        gc = render.project(render.Camera.from_params(g.camera, size, size),
                            geometry.pose_positions(body, g))
        d = np.linalg.norm(pc - gc, axis=1)
        means.append(d.mean())
        stds.append(d.std())
    return np.array(means), np.array(stds)


def track(body, observations, theta_prior, cam_prior, cfg: TrackConfig | None = None,
          theta_init=None, cam_init=None, gt_frames=None, beta=None, progress=None) -> TrackResult:
    """Joint Adam over all frames' (theta, C).

    The L_r gradient of ``render_refresh`` frames is recomputed per step
    (round robin) and reused for the others until their turn comes again.
    """
    cfg = cfg or TrackConfig()
    N = len(observations)
    theta_prior = None if theta_prior is None else np.asarray(theta_prior, float)
    cam_prior = None if cam_prior is None else np.asarray(cam_prior, float)
    th0 = theta_prior if theta_init is None else theta_init
    c0 = cam_prior if cam_init is None else cam_init
    if th0 is None or c0 is None:
        raise ValueError("need priors or explicit initial values")
    beta = np.zeros(body.n_blendshapes) if beta is None else np.asarray(beta, float)
    state = TrackState(np.array(th0, float).copy(), np.array(c0, float).copy(),
                       theta_prior, cam_prior, beta, AdamState(lr=cfg.lr))
    if len(state) != N:
        raise ValueError("observation count does not match the parameter sequence")
    init_err = projection_errors(body, state, gt_frames, cfg.image_size)[0] if gt_frames else None
    start, terms = total_loss(body, state, observations, cfg)
    history = [(0, start, terms["L_f"], terms["L_r"], terms["L_d"], terms["L_t"])]
    cache = {}
    order = np.random.default_rng(cfg.seed).permutation(N)
    cursor = 0
    for step in range(1, cfg.steps + 1):
        if cfg.lambda_r:
            for _ in range(min(cfg.render_refresh, N)):
                t = int(order[cursor % N])
                cursor += 1
                cache[t] = render_loss_grad(body, state, observations[t], t, cfg.fd_step)
        g_th, g_c = _frame_gradients(body, state, observations, cfg, cache)
        state.adam.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + np.cos(np.pi * (step - 1) / cfg.steps))
        adam_step({"theta": state.theta, "camera": state.cam},
                  {"theta": g_th, "camera": g_c}, state.adam)
        if step % 10 == 0 or step == cfg.steps:
            tot, terms = total_loss(body, state, observations, cfg)
            history.append((step, tot, terms["L_f"], terms["L_r"], terms["L_d"], terms["L_t"]))
            if not np.isfinite(tot) or tot > 10 * max(start, DIVERGENCE_FLOOR * N):
                raise TrackDivergence(f"tracking diverged at step {step}: loss {tot:.4g} "
                                      f"vs start {start:.4g}", state)
            if progress:
                progress(step, tot)
    res = TrackResult(state, history, init_err)
    if gt_frames:
        res.final_error, res.final_error_std = projection_errors(body, state, gt_frames, cfg.image_size)
    return res


def jitter(theta):
    """Mean frame-to-frame parameter change ||theta_t - theta_{t-1}||."""
    th = np.asarray(theta).reshape(len(theta), -1)
    return float(np.linalg.norm(np.diff(th, axis=0), axis=1).mean())


def write_reports(res: TrackResult, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    N, J = res.state.theta.shape[:2]
    with open(out_dir / "params.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "cx", "cy", "s"] + [f"theta_{j}_{a}" for j in range(J) for a in "xyz"])
        for t in range(N):
            w.writerow([t] + [repr(float(x)) for x in res.state.cam[t]]
                       + [repr(float(x)) for x in res.state.theta[t].reshape(-1)])
    if res.final_error is not None:
        with open(out_dir / "errors.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame", "err_px_mean", "err_px_std"])
            for t in range(N):
                w.writerow([t, f"{res.final_error[t]:.6f}", f"{res.final_error_std[t]:.6f}"])
    with open(out_dir / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "total", "L_f", "L_r", "L_d", "L_t"])
        for row in res.history:
            w.writerow([row[0]] + [f"{x:.8g}" for x in row[1:]])
