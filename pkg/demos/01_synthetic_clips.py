"""Walkthrough: the synthetic clip generator and the on-disk dataset layout.

Generates a clip of a moving elliptical polyp over a value-noise background,
verifies its determinism and exact mask motion, writes it in the standard
Frame/GT layout, and reads it back through the dataset index.

Run: python3 demos/01_synthetic_clips.py
"""

from pathlib import Path

import numpy as np

from vpseg.dataio import (
    SyntheticClipSpec,
    gen_synthetic_clip,
    load_dataset,
    sample_clip,
    save_clip,
)

out_root = Path("demo_output/synthetic")

spec = SyntheticClipSpec(height=64, width=112, delta=5, velocity=(2.0, 0.0),
                         radius_range=(8.0, 12.0), seed=7, case_id="demo_case")
clip = gen_synthetic_clip(spec)
print(f"clip: {clip.delta + 1} frames of {clip.height}x{clip.width}, "
      f"case {clip.case_id!r}")

again = gen_synthetic_clip(spec)
print("same seed reproduces the clip bit-exactly:",
      np.array_equal(clip.all_frames(), again.all_frames()))

centroids = [float(np.nonzero(m)[1].mean()) for m in clip.masks]
print("mask centroid x per frame:", [round(c, 2) for c in centroids])
print("per-frame shift (velocity was 2 px/frame):",
      [round(b - a, 6) for a, b in zip(centroids, centroids[1:])])

areas = [int(m.sum()) for m in clip.masks]
print("mask areas stay constant while moving:", areas)

save_clip(clip, out_root, "train")
index = load_dataset(out_root, "train", delta=5)
print(f"reloaded index: {len(index)} case(s), "
      f"{len(index.cases['demo_case'])} frame/mask pairs")

rng = np.random.default_rng(0)
reloaded = sample_clip(index, "demo_case", rng, delta=5)
print("reloaded window:", reloaded.frame_indices)
print(f"files under {out_root}/train/: Frame/<case>/*.png and GT/<case>/*.png")
