"""Bake per-vertex quantities into the body's UV atlas and sample them back.

Grids are stored image-style: ``data[row, col]`` with ``col`` from u and
``row`` from v; texel ``(row, col)`` has its centre at
``((col + 0.5) / R, (row + 0.5) / R)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

_EPS = 1e-9


class AtlasError(ValueError):
    pass


class UvDomainError(ValueError):
    pass


@dataclass
class UvGrid:
    data: np.ndarray        # (R, R, c)
    occupancy: np.ndarray   # (R, R) texel centre inside some UV triangle
    support: np.ndarray     # (R, R) occupancy plus the dilated seam ring

    @property
    def resolution(self):
        return self.data.shape[0]

    @property
    def channels(self):
        return self.data.shape[2]


def _tri_candidates(corners, R):
    """Texel centres inside (or on the border of) each 2D triangle.

    ``corners`` (F, 3, 2) in texel units. Returns (face, row, col, bary).
    """
    lo = np.ceil(corners.min(1) - 0.5 - _EPS).astype(np.int64)
    hi = np.floor(corners.max(1) - 0.5 + _EPS).astype(np.int64)
    lo = np.clip(lo, 0, R - 1)
    hi = np.clip(hi, -1, R - 1)
    nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    cnt = nx * ny
    face = np.repeat(np.arange(len(corners)), cnt)
    start = np.repeat(np.cumsum(cnt) - cnt, cnt)
    k = np.arange(cnt.sum()) - start
    col = lo[face, 0] + k % nx[face]
    row = lo[face, 1] + k // nx[face]
    a, b, c = corners[face, 0], corners[face, 1], corners[face, 2]
    q = np.stack([col + 0.5, row + 0.5], axis=1)
    ab, ac, aq = b - a, c - a, q - a
    d = ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0]
    good = np.abs(d) > 1e-15
    d = np.where(good, d, 1.0)
    wb = (aq[:, 0] * ac[:, 1] - aq[:, 1] * ac[:, 0]) / d
    wc = (ab[:, 0] * aq[:, 1] - ab[:, 1] * aq[:, 0]) / d
    wa = 1.0 - wb - wc
    inside = good & (wa >= -_EPS) & (wb >= -_EPS) & (wc >= -_EPS)
    bary = np.stack([wa, wb, wc], axis=1)[inside]
    return face[inside], row[inside], col[inside], bary


class UvRaster:
    """Texel -> (face, barycentric) table for one body at one resolution."""

    def __init__(self, body, resolution: int, dilation: int = 2):
        if resolution < 8:
            raise AtlasError("resolution must be >= 8")
        R = int(resolution)
        self.resolution = R
        self.dilation = dilation
        face, row, col, bary = _tri_candidates(body.uv_corners * R, R)
        texel = row * R + col
        chart = body.face_parts[face]
        # a texel touched by two different charts means the atlas overlaps
        order = np.lexsort((chart, texel))
        t_s, c_s = texel[order], chart[order]
        clash = (t_s[1:] == t_s[:-1]) & (c_s[1:] != c_s[:-1])
        if clash.any():
            raise AtlasError(f"UV charts overlap at texel {int(t_s[1:][clash][0])}")
        # lowest face index owns a texel claimed by several faces of one chart
        order = np.lexsort((face, texel))
        texel, face, bary = texel[order], face[order], bary[order]
        first = np.ones(len(texel), dtype=bool)
        first[1:] = texel[1:] != texel[:-1]
        self.texel = texel[first]
        self.face = face[first]
        self.bary = bary[first]
        self.vidx = body.faces[self.face]
        self.chart = body.face_parts[self.face]
        occ = np.zeros(R * R, dtype=bool)
        occ[self.texel] = True
        self.occupancy = occ.reshape(R, R)
        if dilation > 0:
            dist, (ri, ci) = ndimage.distance_transform_edt(~self.occupancy, return_indices=True)
            ring = (~self.occupancy) & (dist <= dilation)
            self.dil_texel = np.flatnonzero(ring)
            self.dil_src = (ri * R + ci).reshape(-1)[self.dil_texel]
        else:
            self.dil_texel = np.zeros(0, dtype=np.int64)
            self.dil_src = np.zeros(0, dtype=np.int64)
        sup = occ.copy()
        sup[self.dil_texel] = True
        self.support = sup.reshape(R, R)
        chart_map = np.zeros(R * R, dtype=np.int64)
        chart_map[self.texel] = self.chart
        chart_map[self.dil_texel] = chart_map[self.dil_src]
        self.chart_map = chart_map.reshape(R, R)

    def bake(self, per_vertex) -> UvGrid:
        f = np.asarray(per_vertex)
        if f.ndim == 1:
            f = f[:, None]
        R = self.resolution
        out = np.zeros((R * R, f.shape[1]), dtype=f.dtype if f.dtype.kind == "f" else float)
        out[self.texel] = np.einsum("nk,nkc->nc", self.bary, f[self.vidx])
        out[self.dil_texel] = out[self.dil_src]
        return UvGrid(out.reshape(R, R, -1), self.occupancy.copy(), self.support.copy())


def get_raster(body, resolution: int, dilation: int = 2) -> UvRaster:
    cache = body.__dict__.setdefault("_uv_rasters", {})
    key = (int(resolution), int(dilation))
    if key not in cache:
        cache[key] = UvRaster(body, resolution, dilation)
    return cache[key]


def bake(body, per_vertex, resolution: int = 64, dilation: int = 2) -> UvGrid:
    """Barycentric rasterization of a per-vertex field into the UV atlas."""
    f = np.asarray(per_vertex)
    if f.shape[0] != body.n_vertices:
        raise ValueError("per_vertex must have one row per vertex")
    return get_raster(body, resolution, dilation).bake(f)


def _bilinear_taps(support, uv):
    R = support.shape[0]
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    if (uv < 0).any() or (uv > 1).any():
        raise UvDomainError("uv outside [0, 1]^2")
    x = uv[:, 0] * R - 0.5
    y = uv[:, 1] * R - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0
    idx, wts = [], []
    for dy, dx, w in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                      (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        inb = (xi >= 0) & (xi < R) & (yi >= 0) & (yi < R)
        xi, yi = np.clip(xi, 0, R - 1), np.clip(yi, 0, R - 1)
        w = np.where(inb & support[yi, xi], w, 0.0)
        idx.append(yi * R + xi)
        wts.append(w)
    idx = np.stack(idx, 1)
    wts = np.stack(wts, 1)
    total = wts.sum(1)
    miss = total <= 0
    wts = np.where(miss[:, None], 0.0, wts / np.where(miss, 1.0, total)[:, None])
    return idx, wts, miss


def sample(grid: UvGrid, uv):
    """Support-restricted bilinear lookup. Returns ``(values (n, c), miss (n,))``."""
    idx, wts, miss = _bilinear_taps(grid.support, uv)
    flat = grid.data.reshape(-1, grid.channels)
    vals = np.einsum("nk,nkc->nc", wts, flat[idx])
    return vals, miss


def sampling_matrix(support, uv):
    """Sparse (n, R*R) operator equal to :func:`sample` for fixed support."""
    idx, wts, miss = _bilinear_taps(support, uv)
    n = len(idx)
    rows = np.repeat(np.arange(n), 4)
    M = sp.csr_matrix((wts.reshape(-1), (rows, idx.reshape(-1))),
                      shape=(n, support.size))
    M.sum_duplicates()
    return M, miss


def descriptor_channels(T: int, occupancy_channel: bool = False):
    """Channel names in order: normals, then T velocity slabs (most recent first)."""
    names = ["n_x", "n_y", "n_z"]
    for k in range(1, T + 1):
        names += [f"v{k}_x", f"v{k}_y", f"v{k}_z"]
    if occupancy_channel:
        names.append("occupancy")
    return names


def descriptor_grid(raster: UvRaster, derivs, zero_velocity: bool = False,
                    occupancy_channel: bool = False) -> UvGrid:
    """Bake canonical FrameDerivatives into a 3 + 3T channel grid."""
    T, m = derivs.velocities.shape[:2]
    vel = derivs.velocities.transpose(1, 0, 2).reshape(m, 3 * T)
    if zero_velocity:
        vel = np.zeros_like(vel)
    grid = raster.bake(np.concatenate([derivs.normals, vel], axis=1))
    if occupancy_channel:
        occ = grid.occupancy[..., None].astype(grid.data.dtype)
        grid = UvGrid(np.concatenate([grid.data, occ], axis=2), grid.occupancy, grid.support)
    return grid
