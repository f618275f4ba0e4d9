"""Walkthrough: jigsaw shuffling and the contrastive machinery.

Shuffles a frame into patches and restores it, then exercises the posterior,
the memory bank's moving-average updates, and the two auxiliary losses on
hand-built embeddings.

Run: python3 demos/02_jigsaw_and_contrastive.py
"""

import math

import numpy as np
import torch

from vpseg.dataio import SyntheticClipSpec, gen_synthetic_clip, make_jigsaw, reassemble_jigsaw
from vpseg.selfsup import (
    ClusterModel,
    MemoryBank,
    fit_clusters,
    h_posterior,
    nce_loss,
    normalize,
    pld_loss,
)

clip = gen_synthetic_clip(SyntheticClipSpec(seed=3))
rng = np.random.default_rng(1)
patch_set = make_jigsaw(clip.anchor, grid=3, rng=rng)
print("jigsaw: 3x3 grid ->", len(patch_set.patches), "patches,",
      "permutation", patch_set.permutation.tolist())
restored = reassemble_jigsaw(patch_set)
print("reassembly is bit-exact:", np.array_equal(
    restored, clip.anchor[:restored.shape[0], :restored.shape[1]]))

print("\nposterior of a positive pair against negatives:")
for pos, negs in [(1.0, []), (0.5, [0.5]), (1.0, [-1.0])]:
    value = h_posterior(pos, negs, tau=1.0).item()
    print(f"  pos={pos:+.1f} negs={negs} -> {value:.7f}")

bank = MemoryBank(momentum=0.5)
bank.insert("a", normalize(torch.tensor([1.0, 0.0])))
bank.update("a", normalize(torch.tensor([0.0, 1.0])))
print("\nmoving average of (1,0) and (0,1) at momentum 0.5:",
      bank.get("a").tolist(), "(= sqrt(2)/2 each)")

# two well-separated embedding groups; the losses see them through the bank
gen = np.random.default_rng(5)
bank = MemoryBank(momentum=0.5)
patch_map = {}
for i in range(8):
    loc = (1.0, 0.0, 0.0, 0.0) if i < 4 else (-1.0, 0.0, 0.0, 0.0)
    bank.insert(f"s{i}", normalize(torch.from_numpy(gen.normal(loc, 0.05))))
    patch_map[f"s{i}"] = normalize(torch.from_numpy(gen.normal(loc, 0.05)))

negatives = bank.sample_negatives("s0", 4, gen)
loss = nce_loss(bank.get("s0"), patch_map["s0"], bank, "s0", negatives, tau=0.07)
print(f"\ncontrastive loss for s0 against {len(negatives)} negatives: {loss.item():.4f}")

clusters = fit_clusters(bank, patch_map, k=2, rng=gen)
print("fitted 2 matched centroid pairs; image centroid 0 =",
      [round(v, 3) for v in clusters.image_centroids[0].tolist()])
pld = pld_loss([bank.get("s0")], [patch_map["s0"]], clusters, tau=0.07)
print(f"cluster-discrimination loss for s0: {pld.item():.4f}")

equal = ClusterModel(image_centroids=torch.ones(2, 4), patch_centroids=torch.ones(2, 4), k=2)
value = pld_loss([normalize(torch.rand(4))], [normalize(torch.rand(4))], equal, 0.07)
print(f"with identical centroids the loss is ln 2 = {math.log(2):.4f}: {value.item():.4f}")
