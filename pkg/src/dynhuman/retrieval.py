"""Nearest-neighbour phase retrieval with NCC over motion descriptors.

Three descriptor kinds share one track type:

* ``3d-uv``     canonical normals + T-frame velocity history baked to UV space
* ``2d-sparse`` projected joints + T-frame backward-difference trajectories
* ``2d-dense``  projected sampled vertices + trajectories

The toy sequence is a body turning left and right about the vertical axis.
A mirrored turn (yaw -a instead of +a) projects to an almost identical 2D
keypoint track, so a 2D descriptor cannot tell the two turning directions
apart; the canonical 3D velocity flips sign and can.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, motionfield, render, uvbake
from .synthdata import bare_maps, default_camera

KINDS = ("3d-uv", "2d-sparse", "2d-dense")


class RetrievalError(ValueError):
    pass


# --------------------------------------------------------------------------- NCC

def ncc(a, b, with_flag=False):
    """Zero-mean, unit-norm dot product in [-1, 1].

    A constant input has no defined NCC: the result is 0 and, with
    ``with_flag``, the second return value is True.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or a.size != b.size:
        raise RetrievalError(f"ncc needs equal nonzero lengths, got {a.size} and {b.size}")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return (0.0, True) if with_flag else 0.0
    v = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    assert -1.0 <= v <= 1.0
    return (v, False) if with_flag else v


def ncc_rows(q, M):
    """NCC of vector ``q`` against every row of ``M``; (scores, degenerate flags)."""
    q = np.asarray(q, dtype=float).ravel()
    M = np.asarray(M, dtype=float)
    qc = q - q.mean()
    Mc = M - M.mean(axis=1, keepdims=True)
    nq = np.linalg.norm(qc)
    nm = np.linalg.norm(Mc, axis=1)
    bad = (nm < 1e-12) | (nq < 1e-12)
    s = (Mc @ qc) / np.where(bad, 1.0, nm * max(nq, 1e-300))
    s = np.where(bad, 0.0, np.clip(s, -1.0, 1.0))
    return s, bad


# --------------------------------------------------------------------------- tracks

@dataclass
class DescriptorTrack:
    vectors: np.ndarray                 # (N, D)
    times: np.ndarray                   # (N,) frame index
    kind: str
    groups: np.ndarray | None = None    # (D,) channel group id, for per-group scaling
    valid: np.ndarray | None = None     # (N, P) per-point visibility (2D kinds)
    frame_flags: np.ndarray | None = None  # (N,) True when every point is hidden
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RetrievalError(f"unknown descriptor kind {self.kind!r}")
        self.vectors = np.asarray(self.vectors, dtype=float)
        if self.vectors.ndim != 2:
            raise RetrievalError("descriptor vectors must be (frames, dims)")
        if len(self.times) != len(self.vectors):
            raise RetrievalError("times and vectors differ in length")

    def __len__(self):
        return len(self.vectors)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return DescriptorTrack(self.vectors[idx], np.asarray(self.times)[idx], self.kind, self.groups,
                               None if self.valid is None else self.valid[idx],
                               None if self.frame_flags is None else self.frame_flags[idx],
                               dict(self.meta))


def standardize(track: DescriptorTrack, reference: DescriptorTrack | None = None):
    """Remove the reference's per-dimension temporal mean and give every channel
    group unit RMS, so static content (e.g. rest normals) and unit choices do
    not dominate the correlation."""
    ref = reference if reference is not None else track
    if ref.kind != track.kind:
        raise RetrievalError("descriptor kinds differ")
    mu = ref.vectors.mean(axis=0)
    X = track.vectors - mu
    R = ref.vectors - mu
    groups = track.groups if track.groups is not None else np.zeros(track.dim, dtype=np.int64)
    scale = np.ones(track.dim)
    for g in np.unique(groups):
        sel = groups == g
        rms = np.sqrt(np.mean(R[:, sel] ** 2))
        scale[sel] = 1.0 / rms if rms > 1e-12 else 0.0
    return DescriptorTrack(X * scale, track.times, track.kind, track.groups, track.valid,
                           track.frame_flags, dict(track.meta))


# --------------------------------------------------------------------------- sequences

@dataclass
class TurnSequence:
    body: geometry.CanonicalBody
    thetas: np.ndarray        # (lead + N, J, 3), the first ``lead`` frames are warm-up history
    camera: np.ndarray
    period: int
    cycles: int
    lead: int
    size: int

    @property
    def n_frames(self):
        return self.period * self.cycles

    def frames(self):
        beta = np.zeros(self.body.n_blendshapes)
        return [geometry.PoseFrame(t, beta, self.camera) for t in self.thetas]

    def phase(self, i):
        return np.asarray(i) % self.period

    def yaw(self):
        return self.thetas[self.lead:, 0, 1]


def alternating_turns(body=None, period=40, cycles=6, amplitude=0.9, mod_depth=0.1, T=10,
                      size=64):
    """Left/right torso turn repeated ``cycles`` times with slow amplitude modulation.

    Root yaw is ``a(t) = amplitude (1 + mod_depth sin(2 pi t / (period cycles))) sin(2 pi t / period)``.
    ``T`` warm-up frames precede frame 0 so every frame has a full velocity history.
    """
    body = body or geometry.procedural_body()
    t = np.arange(-T, period * cycles, dtype=float)
    th = np.zeros((len(t), body.n_joints, 3))
    th[:, 0, 1] = amplitude * (1 + mod_depth * np.sin(2 * np.pi * t / (period * cycles))) \
        * np.sin(2 * np.pi * t / period)
    return TurnSequence(body, th, default_camera(size), period, cycles, T, size)


# --------------------------------------------------------------------------- descriptors

def descriptor_3d(seq: TurnSequence, T=10, resolution=32, region=None) -> DescriptorTrack:
    """Canonical normals + velocities baked to UV, optionally restricted to chart ids ``region``."""
    body = seq.body
    meshes = [geometry.pose(body, f) for f in seq.frames()]
    derivs = motionfield.sequence_derivatives(body, meshes, T)[seq.lead:]
    raster = uvbake.get_raster(body, resolution)
    sel = texel_selection(raster, region)
    vecs = np.stack([uvbake.descriptor_grid(raster, d).data.reshape(-1, 3 + 3 * T)[sel].reshape(-1)
                     for d in derivs])
    groups = np.tile(np.r_[np.zeros(3, np.int64), np.ones(3 * T, np.int64)], int(sel.sum()))
    return DescriptorTrack(vecs, np.arange(len(vecs)), "3d-uv", groups,
                           meta={"resolution": resolution, "T": T, "region": region})


def texel_selection(raster, region=None):
    """Flat mask of supported texels, restricted to the given chart ids."""
    sel = raster.support.reshape(-1).copy()
    if region is not None:
        sel &= np.isin(raster.chart_map.reshape(-1), np.atleast_1d(region))
    if not sel.any():
        raise RetrievalError(f"UV region {region} selects no texels")
    return sel


def joint_chart_adjacency(body):
    """(J, P+1) bool: chart c is adjacent to joint j when some vertex of c is skinned to j."""
    adj = np.zeros((body.n_joints, body.n_parts + 1), dtype=bool)
    for c in range(1, body.n_parts + 1):
        vids = np.unique(body.faces[body.face_parts == c])
        adj[:, c] = (body.skin_weights[vids] > 0).any(axis=0)
    return adj


def _points_2d(seq: TurnSequence, mode, n_dense=96):
    body = seq.body
    cam = render.Camera.from_params(seq.camera, seq.size, seq.size)
    frames = seq.frames()
    if mode == "sparse":
        adj = joint_chart_adjacency(body)
    else:
        vids = np.linspace(0, body.n_vertices - 1, n_dense).round().astype(np.int64)
    pts, vis = [], []
    for f in frames:
        pos = geometry.pose_positions(body, f)
        fr = render.rasterize(pos, body, cam)
        if mode == "sparse":
            _, Gt = geometry.joint_globals(body, np.asarray(f.theta, float))
            p3 = Gt
        else:
            p3 = pos[vids]
        xy = render.project(cam, p3)
        col = np.floor(xy[:, 0]).astype(np.int64)
        row = np.floor(xy[:, 1]).astype(np.int64)
        inb = (col >= 0) & (col < seq.size) & (row >= 0) & (row < seq.size)
        v = np.zeros(len(xy), dtype=bool)
        face = np.full(len(xy), -1)
        face[inb] = fr.face[row[inb], col[inb]]
        hit = face >= 0
        if mode == "sparse":
            chart = np.where(hit, body.face_parts[np.maximum(face, 0)], 0)
            v = hit & adj[np.arange(len(xy)), chart]
        else:
            v = hit & (fr.depth[np.clip(row, 0, seq.size - 1), np.clip(col, 0, seq.size - 1)]
                       >= p3[:, 2] - 0.02)
        pts.append(xy)
        vis.append(v)
    return np.array(pts), np.array(vis)


def build_2d_baseline(seq: TurnSequence, mode="sparse", T=10, n_dense=96) -> DescriptorTrack:
    """Projected points + T-frame backward-difference trajectories, with occlusion flags."""
    if mode not in ("sparse", "dense"):
        raise RetrievalError(f"mode must be sparse or dense, got {mode!r}")
    pts, vis = _points_2d(seq, mode, n_dense)           # (lead + N, P, 2)
    n, P = pts.shape[:2]
    vecs = []
    for i in range(seq.lead, n):
        traj = [pts[i - k + 1] - pts[i - k] if i - k >= 0 else np.zeros((P, 2))
                for k in range(1, T + 1)]
        vecs.append(np.concatenate([pts[i].reshape(-1)] + [t.reshape(-1) for t in traj]))
    vecs = np.array(vecs)
    groups = np.r_[np.zeros(2 * P, np.int64), np.ones(2 * P * T, np.int64)]
    valid = vis[seq.lead:]
    flags = ~valid.any(axis=1)
    if flags.any():
        warnings.warn(f"{int(flags.sum())} frame(s) have every point occluded", RuntimeWarning,
                      stacklevel=2)
    return DescriptorTrack(vecs, np.arange(len(vecs)), f"2d-{mode}", groups, valid, flags,
                           meta={"T": T, "mode": mode})


# --------------------------------------------------------------------------- retrieval

@dataclass
class SimilarityProfile:
    scores: np.ndarray        # (M,) NCC per reference frame
    peaks: np.ndarray         # indices of local maxima >= 0.5 * global max
    degenerate: np.ndarray    # (M,) True where NCC was undefined

    def __post_init__(self):
        assert np.all(np.abs(self.scores) <= 1.0 + 1e-12)


def find_peaks(scores, rel=0.5):
    """Local maxima (plateau-aware, ends included) with score >= rel * global max."""
    s = np.asarray(scores, dtype=float)
    if len(s) == 0:
        return np.zeros(0, dtype=np.int64)
    gmax = s.max()
    if gmax <= 0:
        return np.zeros(0, dtype=np.int64)
    left = np.r_[-np.inf, s[:-1]]
    right = np.r_[s[1:], -np.inf]
    cand = (s > left) & (s >= right) & (s >= rel * gmax)
    return np.flatnonzero(cand)


def retrieve(query, reference: DescriptorTrack, k=1, query_kind=None):
    """Rank reference frames by NCC with the query vector.

    Returns (top-k reference indices, SimilarityProfile). Ties go to the
    earlier frame.
    """
    if len(reference) < 2:
        raise RetrievalError("reference track needs at least 2 frames")
    if isinstance(query, DescriptorTrack):
        if query.kind != reference.kind:
            raise RetrievalError(f"descriptor kinds differ: {query.kind} vs {reference.kind}")
        if len(query) != 1:
            raise RetrievalError("query track must hold exactly one frame")
        query = query.vectors[0]
    elif query_kind is not None and query_kind != reference.kind:
        raise RetrievalError(f"descriptor kinds differ: {query_kind} vs {reference.kind}")
    q = np.asarray(query, dtype=float).ravel()
    if q.size != reference.dim:
        raise RetrievalError("query and reference dimensionality differ")
    s, bad = ncc_rows(q, reference.vectors)
    order = np.lexsort((np.arange(len(s)), -s))
    return order[:k], SimilarityProfile(s, find_peaks(s), bad)


# --------------------------------------------------------------------------- experiment

@dataclass
class PhaseReport:
    kind: str
    accuracy: float               # top-1 within +-tol frames of the true phase
    accuracy_out_of_plane: float
    peaks_per_cycle: float        # median over queries, against the whole sequence
    top1: np.ndarray
    queries: np.ndarray
    out_of_plane: np.ndarray


def out_of_plane_frames(seq: TurnSequence, rel=0.2):
    """Frames where the body is turning about the vertical axis (|yaw rate| >= rel * max)."""
    th = seq.thetas[:, 0, 1]
    rate = np.abs(np.diff(th))[seq.lead - 1:]
    return rate >= rel * rate.max()


def phase_experiment(seq: TurnSequence, track: DescriptorTrack, tol=1) -> PhaseReport:
    """Reference = first cycle; queries = every frame of the later cycles."""
    P = seq.period
    ref_idx = np.arange(P)
    ref = standardize(track.subset(ref_idx))
    full = standardize(track, track.subset(ref_idx))
    queries = np.arange(P, len(track))
    top1 = np.empty(len(queries), dtype=np.int64)
    peaks = np.empty(len(queries))
    for qi, q in enumerate(queries):
        top, _ = retrieve(full.vectors[q], ref, 1)
        top1[qi] = top[0]
        _, prof_all = retrieve(full.vectors[q], full, 1)
        peaks[qi] = len(prof_all.peaks) / seq.cycles
    d = np.abs(seq.phase(queries) - top1)
    d = np.minimum(d, P - d)
    ok = d <= tol
    oop = out_of_plane_frames(seq)[queries]
    return PhaseReport(track.kind, float(ok.mean()), float(ok[oop].mean()),
                       float(np.median(peaks[oop])), top1, queries, oop)


def direction_separability(seq: TurnSequence, track: DescriptorTrack):
    """Per phase of the first cycle: (min NCC to same-direction phases in later cycles,
    max NCC to the mirrored (opposite-direction) phase in later cycles)."""
    P = seq.period
    full = standardize(track, track.subset(np.arange(P)))
    same, opp = [], []
    for phi in range(P):
        s, _ = ncc_rows(full.vectors[phi], full.vectors)
        same.append(min(s[c * P + phi] for c in range(1, seq.cycles)))
        opp.append(max(s[c * P + (phi + P // 2) % P] for c in range(1, seq.cycles)))
    return np.array(same), np.array(opp)


# --------------------------------------------------------------------------- patches & plots

def part_bbox(face_map, body, region, pad=2):
    """Pixel bounding box (r0, r1, c0, c1) of the given charts in a face-id map, or None."""
    m = (face_map >= 0) & np.isin(np.where(face_map >= 0, body.face_parts[np.maximum(face_map, 0)], 0),
                                  np.atleast_1d(region))
    if not m.any():
        return None
    rr, cc = np.nonzero(m)
    h, w = face_map.shape
    return (max(rr.min() - pad, 0), min(rr.max() + pad + 1, h),
            max(cc.min() - pad, 0), min(cc.max() + pad + 1, w))


def render_patch(seq: TurnSequence, i, region=None, patch=24):
    """Appearance crop around the region's bounding box, resized to ``patch`` square."""
    f = seq.frames()[seq.lead + i]
    gt, fr = bare_maps(seq.body, geometry.pose(seq.body, f), seq.camera, seq.size)
    img = gt.appearance
    box = None if region is None else part_bbox(fr.face, seq.body, region)
    if box is None:
        box = (0, seq.size, 0, seq.size)
    crop = img[box[0]:box[1], box[2]:box[3]]
    rows = np.clip(((np.arange(patch) + 0.5) * crop.shape[0] / patch).astype(int), 0, crop.shape[0] - 1)
    cols = np.clip(((np.arange(patch) + 0.5) * crop.shape[1] / patch).astype(int), 0, crop.shape[1] - 1)
    return crop[rows][:, cols]


def patch_strip(seq, query, hits, region=None, patch=24):
    tiles = [render_patch(seq, query, region, patch)] + [render_patch(seq, h, region, patch) for h in hits]
    gap = np.ones((patch, 2, 3))
    out = [tiles[0], gap, gap]
    for t in tiles[1:]:
        out += [t, gap]
    return np.concatenate(out[:-1], axis=1)


def profile_svg(profiles: dict, path, width=640, height=200, marks=()):
    """Polyline plot of NCC profiles (name -> scores) on [-1, 1]; ``marks`` are x positions."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    n = max(len(s) for s in profiles.values())
    pad = 24

    def xy(i, v):
        return pad + i * (width - 2 * pad) / max(n - 1, 1), height - pad - (v + 1) / 2 * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    y0 = xy(0, 0)[1]
    parts.append(f'<line x1="{pad}" y1="{y0:.1f}" x2="{width - pad}" y2="{y0:.1f}" stroke="#bbb"/>')
    for m in marks:
        x = xy(m, 0)[0]
        parts.append(f'<line x1="{x:.1f}" y1="{pad}" x2="{x:.1f}" y2="{height - pad}" stroke="#ddd"/>')
    for ci, (name, s) in enumerate(profiles.items()):
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in (xy(i, v) for i, v in enumerate(s)))
        c = colors[ci % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.2" points="{pts}"/>')
        parts.append(f'<text x="{pad + 4}" y="{14 + 12 * ci}" font-size="11" fill="{c}">{name}</text>')
    parts.append("</svg>")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(parts) + "\n")


def write_scores_csv(path, profiles: dict):
    names = list(profiles)
    n = max(len(profiles[k]) for k in names)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame"] + names)
        for i in range(n):
            w.writerow([i] + [f"{profiles[k][i]:.6f}" if i < len(profiles[k]) else "" for k in names])
