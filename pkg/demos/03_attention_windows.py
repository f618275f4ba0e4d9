"""Walkthrough: the grouped window-attention block.

Shows the window geometry, the per-group affinity normalization, the
soft max-response gating, and the anchor-to-neighbour fusion wiring.

Run: python3 demos/03_attention_windows.py
"""

import numpy as np
import torch

from vpseg.attention import (
    GlobalToLocalFusion,
    NormalizedAttentionBlock,
    NSBlockConfig,
    sample_neighborhood,
)
from vpseg.backbone import FeatureMap

torch.manual_seed(0)

cfg = NSBlockConfig(channels=32, groups=4, kernel_k=3, dilations=(3, 4, 3, 4))
print(f"block: {cfg.groups} groups of {cfg.group_channels} channels, "
      f"window {cfg.window} offsets per frame, dilations {cfg.dilations}")

feat = torch.rand(5, 8, 16, 28)
window = sample_neighborhood(feat, center=(0, 0), kernel_k=3, dilation=3)
zero_rows = int((window.abs().sum(dim=1) == 0).sum())
print(f"window at the (0,0) corner: {window.shape[0]} rows, "
      f"{zero_rows} fall outside the map (zero, masked out of the softmax)")

block = NormalizedAttentionBlock(cfg)
anchor_feat = torch.rand(1, 32, 16, 28)      # single-frame queries
neighbour_feat = torch.rand(5, 32, 16, 28)   # five key/value frames
out, internals = block(anchor_feat, neighbour_feat, return_internals=True)
print(f"output matches the key/value shape: {tuple(out.shape)}")

affinity = internals.affinity[0]
print(f"group-0 affinity: {affinity.shape} (positions x window rows)")
print(f"  rows sum to one: max |sum - 1| = {np.abs(affinity.sum(1) - 1).max():.2e}")
print(f"  all entries nonnegative: {bool((affinity >= 0).all())}")
print(f"soft gating map: {internals.soft_map.shape}, "
      f"values in [{internals.soft_map.min():.3f}, {internals.soft_map.max():.3f}]")

fusion = GlobalToLocalFusion(channels=32, branching=True, n_blocks=3)
g = FeatureMap(anchor_feat, level="high", stream="global", stride=16)
l = FeatureMap(neighbour_feat, level="high", stream="local", stride=16)
fused = fusion(g, l)
print(f"\nfusion: branch halves attend separately, refinement block follows; "
      f"output {tuple(fused.data.shape)}")
