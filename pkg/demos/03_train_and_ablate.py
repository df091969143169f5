"""Train the recurrent synthesis model on procedural clothed motion, with and
without the velocity channels, and compare free-running held-out error.

Defaults are small so this finishes in a few minutes on one core; pass a step
count to train longer.
"""
import sys
import time

from dynhuman import nets, synthdata

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
ds = synthdata.generate(synthdata.SynthConfig(n_segments=4, frames_per_segment=30, test_segments=1), seed=0)
print(f"{len(ds)} frames, {len(ds.splits['train'])} for training")
for ablation in ("none", "no_velocity"):
    cfg = nets.TrainConfig(steps=steps, batch=2, ablation=ablation)
    bank = nets.prepare(ds, cfg)
    t = time.time()
    model, hist = nets.train(cfg, bank)
    ev = nets.evaluate(model, bank)
    print(f"{ablation:12s} loss {hist[0][1]:.3f} -> {hist[-1][1]:.3f}  "
          f"held-out L1 {ev['l1_fg']:.4f}  SSIM {ev['ssim']:.4f}  ({time.time() - t:.0f}s)")
