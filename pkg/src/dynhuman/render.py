"""Software z-buffer rasterizer for weak-perspective cameras.

Pixel ``(row, col)`` covers ``[col, col+1) x [row, row+1)`` in image
coordinates and is sampled at its centre. The camera looks along +Z, so the
smallest depth wins.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from PIL import Image

from . import uvbake

BARY_EPS = 1e-9
DEPTH_TIE = 1e-9


class DataQualityError(RuntimeError):
    pass


@dataclass(frozen=True)
class Camera:
    cx: float
    cy: float
    s: float
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("camera scale must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")

    @classmethod
    def from_params(cls, params, width, height):
        cx, cy, s = (float(x) for x in params)
        return cls(cx, cy, s, width, height)

    @property
    def params(self):
        return np.array([self.cx, self.cy, self.s])


def project(camera, points):
    """Weak-perspective projection; returns pixel coords (..., 2). Depth is Z."""
    p = np.asarray(points, dtype=float)
    return np.stack([camera.s * p[..., 0] + camera.cx, camera.s * p[..., 1] + camera.cy], axis=-1)


@dataclass
class RenderedFrame:
    face: np.ndarray           # (h, w) int, -1 on background
    bary: np.ndarray           # (h, w, 3)
    depth: np.ndarray          # (h, w), +inf background
    iuv: np.ndarray            # (h, w, 3): chart id, u, v
    empty: bool = False
    channels: dict = field(default_factory=dict)

    @property
    def mask(self):
        return self.face >= 0

    @property
    def shape(self):
        return self.face.shape


def rasterize_triangles(xy, z, faces, width, height, cull_backfaces=True):
    """Closest-hit face id, barycentrics and depth per pixel.

    Coverage is inclusive of triangle edges (``BARY_EPS``); among faces whose
    depth is within ``DEPTH_TIE`` of the nearest, the lowest face index wins.
    """
    tri = xy[faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    area = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    keep = np.abs(area) > 1e-15
    if cull_backfaces:
        keep &= area < 0
    fid = np.flatnonzero(keep)
    tri = tri[fid]
    t0, t1, t2 = tri[:, 0], tri[:, 1], tri[:, 2]
    lo = np.ceil(np.minimum(np.minimum(t0, t1), t2) - 0.5 - BARY_EPS).astype(np.int64)
    hi = np.floor(np.maximum(np.maximum(t0, t1), t2) - 0.5 + BARY_EPS).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], width - 1)
    hi[:, 1] = np.minimum(hi[:, 1], height - 1)
    nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    cnt = nx * ny
    face_bg = np.full((height, width), -1, dtype=np.int64)
    bary_map = np.zeros((height, width, 3))
    depth_map = np.full((height, width), np.inf)
    if cnt.sum() == 0:
        return face_bg, bary_map, depth_map
    li = np.repeat(np.arange(len(fid)), cnt)
    start = np.repeat(np.cumsum(cnt) - cnt, cnt)
    k = np.arange(cnt.sum()) - start
    col = lo[li, 0] + k % nx[li]
    row = lo[li, 1] + k // nx[li]
    a, b, c = tri[li, 0], tri[li, 1], tri[li, 2]
    qx, qy = col + 0.5, row + 0.5
    d = area[fid][li]
    wb = ((qx - a[:, 0]) * (c[:, 1] - a[:, 1]) - (qy - a[:, 1]) * (c[:, 0] - a[:, 0])) / d
    wc = ((b[:, 0] - a[:, 0]) * (qy - a[:, 1]) - (b[:, 1] - a[:, 1]) * (qx - a[:, 0])) / d
    wa = 1.0 - wb - wc
    inside = (wa >= -BARY_EPS) & (wb >= -BARY_EPS) & (wc >= -BARY_EPS)
    li, row, col = li[inside], row[inside], col[inside]
    w = np.stack([wa[inside], wb[inside], wc[inside]], axis=1)
    f = fid[li]
    zz = np.einsum("nk,nk->n", w, z[faces[f]])
    pix = row * width + col
    best = np.full(width * height, np.inf)
    np.minimum.at(best, pix, zz)
    near = zz <= best[pix] + DEPTH_TIE
    pix, f, w, zz = pix[near], f[near], w[near], zz[near]
    order = np.lexsort((f, pix))
    pix, f, w, zz = pix[order], f[order], w[order], zz[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, f, w, zz = pix[first], f[first], w[first], zz[first]
    face_bg.reshape(-1)[pix] = f
    bary_map.reshape(-1, 3)[pix] = w
    depth_map.reshape(-1)[pix] = zz
    return face_bg, bary_map, depth_map


def rasterize(positions, body, camera: Camera, cull_backfaces=True) -> RenderedFrame:
    """Render the body's dense IUV (chart id, u, v) and depth."""
    positions = getattr(positions, "positions", positions)
    xy = project(camera, positions)
    face, bary, depth = rasterize_triangles(xy, positions[:, 2], body.faces,
                                            camera.width, camera.height, cull_backfaces)
    mask = face >= 0
    iuv = np.zeros(face.shape + (3,))
    if mask.any():
        fm = face[mask]
        iuv[mask, 0] = body.face_parts[fm]
        iuv[mask, 1:] = np.einsum("nk,nkc->nc", bary[mask], body.uv_corners[fm])
    empty = not mask.any()
    if empty:
        warnings.warn("body projects entirely off-screen", RuntimeWarning, stacklevel=2)
    return RenderedFrame(face, bary, depth, iuv, empty)


def interpolate(frame: RenderedFrame, faces, per_vertex, fill=0.0):
    """Barycentric interpolation of per-vertex attributes onto the frame."""
    per_vertex = np.asarray(per_vertex)
    squeeze = per_vertex.ndim == 1
    if squeeze:
        per_vertex = per_vertex[:, None]
    out = np.full(frame.shape + (per_vertex.shape[1],), fill, dtype=float)
    m = frame.mask
    if m.any():
        out[m] = np.einsum("nk,nkc->nc", frame.bary[m], per_vertex[faces[frame.face[m]]])
    return out[..., 0] if squeeze else out


def face_attribute(frame: RenderedFrame, per_face, fill=0):
    per_face = np.asarray(per_face)
    out = np.full(frame.shape + per_face.shape[1:], fill, dtype=per_face.dtype)
    m = frame.mask
    out[m] = per_face[frame.face[m]]
    return out


def normal_map(frame, faces, vertex_normals):
    n = interpolate(frame, faces, vertex_normals)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), 0.0)


def transport_matrix(frame: RenderedFrame, support):
    """Sparse (h*w, R*R) operator moving UV features onto the frame's pixels."""
    h, w = frame.shape
    m = frame.mask.reshape(-1)
    uv = np.clip(frame.iuv.reshape(-1, 3)[m, 1:], 0.0, 1.0)
    M, miss = uvbake.sampling_matrix(support, uv)
    rows = np.flatnonzero(m)
    M = M.tocoo()
    full = sp.csr_matrix((M.data, (rows[M.row], M.col)), shape=(h * w, support.size))
    return full, int(miss.sum())


def transport(descriptor: uvbake.UvGrid, frame: RenderedFrame, max_miss_rate=0.01):
    """Image-space features f(x) = sample(descriptor, uv(x)) on the mask, zero elsewhere.

    Returns ``(features (h, w, d), miss_count)``.
    """
    h, w = frame.shape
    out = np.zeros((h, w, descriptor.channels))
    m = frame.mask
    if not m.any():
        return out, 0
    vals, miss = uvbake.sample(descriptor, np.clip(frame.iuv[m][:, 1:], 0.0, 1.0))
    out[m] = vals
    n_miss = int(miss.sum())
    if n_miss > max_miss_rate * m.sum():
        raise DataQualityError(f"{n_miss} of {int(m.sum())} masked pixels missed the atlas")
    return out, n_miss


def relight(appearance, normals, mask, light_dir, ambient=0.2):
    """Lambertian relighting: ``A * (ambient + (1 - ambient) * max(0, n.l))``."""
    l = np.asarray(light_dir, dtype=float)
    norm = np.linalg.norm(l)
    if abs(norm - 1.0) > 1e-9:
        warnings.warn("light direction not unit length; normalizing", RuntimeWarning, stacklevel=2)
        l = l / norm
    if not 0.0 <= ambient <= 1.0:
        raise ValueError("ambient must lie in [0, 1]")
    shade = ambient + (1.0 - ambient) * np.maximum(0.0, normals @ l)
    out = np.clip(appearance * shade[..., None], 0.0, 1.0)
    return np.where(np.asarray(mask)[..., None], out, appearance)


# --------------------------------------------------------------------------- PNG export

def to_uint8(image, kind="color"):
    img = np.asarray(image, dtype=float)
    if kind == "normal":
        img = (img + 1.0) / 2.0
    elif kind == "label":
        return np.asarray(image).astype(np.uint8)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def save_png(path, image, kind="color"):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image, kind)).save(path, format="PNG")


def load_png(path):
    return np.asarray(Image.open(path))
