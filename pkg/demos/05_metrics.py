"""SSIM and temporal distance on a tiny synthetic clip.

A sequence compared with itself scores SSIM 1 and temporal distance 0; a frozen
copy of the first frame keeps a decent SSIM but pays in temporal distance since
it never moves.
"""
import numpy as np

from dynhuman import metrics, synthdata

ds = synthdata.generate(synthdata.SynthConfig(n_segments=2, frames_per_segment=12, test_segments=1), seed=1)
clip = [a.astype(float) for a in ds.appearance[:12]]
frozen = [clip[0]] * len(clip)
for name, pred in (("identical", clip), ("frozen", frozen)):
    agg = metrics.report(pred, clip).aggregates()
    print(f"{name:9s} SSIM {agg['ssim_mean']:.4f}  tD {agg['tD_mean']:.4f}")
print("constant 0.5 vs 0.25 SSIM: %.6f" % metrics.ssim(np.full((16, 16), 0.5), np.full((16, 16), 0.25)))
