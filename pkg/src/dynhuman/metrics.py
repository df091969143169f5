"""Image and tracking metrics: SSIM, temporal distance, projection error."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import geometry, render

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0


def _gauss_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable Gaussian filter keeping only fully covered ('valid') positions."""
    k = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[k:img.shape[0] - k, k:img.shape[1] - k]


def ssim_map(a, b, data_range=SSIM_RANGE):
    """Local SSIM for a single-channel pair (valid region only)."""
    g = _gauss_window()
    C1 = (SSIM_K1 * data_range) ** 2
    C2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * sab + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (saa + sbb + C2)
    return num / den


def ssim(a, b, data_range=SSIM_RANGE) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    vals = [ssim_map(a[..., c], b[..., c], data_range).mean() for c in range(a.shape[2])]
    return float(np.mean(vals))


def ssim_distance(a, b):
    return 1.0 - ssim(a, b)


def temporal_distance(synth, gt, base=ssim_distance):
    """|d(s_t, s_{t-1}) - d(g_t, g_{t-1})| for every consecutive pair."""
    if len(synth) != len(gt):
        raise ValueError("sequences must have equal length")
    if len(synth) < 2:
        raise ValueError("need at least two frames")
    return np.array([abs(base(synth[t], synth[t - 1]) - base(gt[t], gt[t - 1]))
                     for t in range(1, len(synth))])


@dataclass
class MetricReport:
    ssim: np.ndarray      # per frame
    tD: np.ndarray        # per frame; frame 0 has no predecessor and is NaN

    def aggregates(self):
        tD = self.tD[1:]
        return {"ssim_mean": float(np.mean(self.ssim)), "ssim_std": float(np.std(self.ssim)),
                "tD_mean": float(np.mean(tD)) if len(tD) else 0.0,
                "tD_std": float(np.std(tD)) if len(tD) else 0.0, "frames": len(self.ssim)}


def report(synth, gt, base=ssim_distance) -> MetricReport:
    s = np.array([ssim(a, b) for a, b in zip(synth, gt)])
    tD = np.full(len(s), np.nan)
    if len(s) >= 2:
        tD[1:] = temporal_distance(synth, gt, base)
    return MetricReport(s, tD)


def projection_error(pred_frames, gt_frames, body, camera=None):
    """Mean per-vertex 2D distance (pixels) between predicted and GT posed bodies.

    Each frame is projected with its own camera parameters unless ``camera``
    (cx, cy, s) is given for both.
    """
    out = []
    for p, g in zip(pred_frames, gt_frames):
        cp = np.asarray(camera if camera is not None else p.camera, float)
        cg = np.asarray(camera if camera is not None else g.camera, float)
        xp = render.project(render.Camera(*cp, 64, 64), geometry.pose(body, p).positions)
        xg = render.project(render.Camera(*cg, 64, 64), geometry.pose(body, g).positions)
        out.append(np.linalg.norm(xp - xg, axis=1).mean())
    return np.array(out)
