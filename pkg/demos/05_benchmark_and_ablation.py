"""Walkthrough: throughput measurement and the ablation switches.

Builds the configurable variants (mode, branching, block count), compares
their parameter counts, and measures single-stream inference speed.

Run: python3 demos/05_benchmark_and_ablation.py
"""

import json
from dataclasses import asdict

import torch

from vpseg.cli import run_benchmark
from vpseg.config import RunConfig
from vpseg.training import build_model, count_params

print("parameter counts across the ablation grid (toy backbone):")
for branching in (False, True):
    for n_blocks in (2, 3, 4):
        cfg = RunConfig()
        cfg.training.branching = branching
        cfg.training.ns_blocks = n_blocks
        torch.manual_seed(0)
        n = count_params(build_model(cfg))
        print(f"  branching={branching!s:5s} blocks={n_blocks}: {n:,}")

cfg = RunConfig()
torch.manual_seed(0)
model = build_model(cfg)
print("\nbenchmarking the default desk model at 64x112, 6-frame clips...")
report = run_benchmark(model, (64, 112), clip_length=6, warmup=2, iters=10)
print(json.dumps(asdict(report), indent=2))
print(f"\n{report.fps:.1f} frames/second single-stream on {report.device}")
