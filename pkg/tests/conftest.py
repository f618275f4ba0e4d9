from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from vpseg.config import RunConfig
from vpseg.dataio import SyntheticClipSpec, gen_synthetic_clip, save_clip


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


def tiny_run_config(out_dir: Path, **training_overrides) -> RunConfig:
    """Desk-scale config: 32x48 input, small toy backbone, short epochs."""
    cfg = RunConfig()
    cfg.training.input_size = (32, 48)
    cfg.training.batch_size = 2
    cfg.training.delta = 2
    cfg.training.epochs = 1
    cfg.training.iters_per_epoch = 2
    cfg.training.out_dir = str(out_dir)
    cfg.backbone.reduced_channels = 8
    cfg.backbone.toy_widths = (8, 8, 16, 16)
    cfg.attention.groups = 2
    cfg.attention.kernel_k = 1
    cfg.attention.dilations_pair = (1, 2)
    cfg.attention.dilations_refine = (1, 2)
    cfg.ssl.cluster_k = 2
    cfg.ssl.negatives = 4
    cfg.ssl.dim = 16
    cfg.ssl.grid = 2
    cfg.ssl.patch_size = (16, 16)
    cfg.training.decoder_hidden = 8
    for key, value in training_overrides.items():
        setattr(cfg.training, key, value)
    cfg.validate()
    return cfg


def write_synthetic_dataset(root: Path, n_cases: int = 2, frames: int = 6,
                            height: int = 32, width: int = 48,
                            seed: int = 7, split: str = "train") -> Path:
    for i in range(n_cases):
        spec = SyntheticClipSpec(
            height=height, width=width, delta=frames - 1,
            radius_range=(5.0, 8.0), velocity=(1.0, 0.0),
            seed=seed + i, case_id=f"case_{i:03d}")
        save_clip(gen_synthetic_clip(spec), root, split)
    return root


@pytest.fixture
def synthetic_dataset(tmp_path) -> Path:
    return write_synthetic_dataset(tmp_path / "data")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
