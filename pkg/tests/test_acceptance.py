"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines; every tolerance is asserted, so a failing criterion fails its test.
"""

from __future__ import annotations

import math
import time

import numpy as np
import torch
import torch.nn.functional as F
from click.testing import CliRunner

import oracles
from conftest import tiny_run_config, write_synthetic_dataset
from vpseg.attention import NormalizedAttentionBlock, NSBlockConfig
from vpseg.backbone import BackboneConfig
from vpseg.cli import main as cli_main
from vpseg.cli import run_benchmark
from vpseg.config import RunConfig
from vpseg.dataio import (
    SyntheticClipSpec,
    crop_to_grid,
    gen_synthetic_clip,
    load_dataset,
    make_jigsaw,
    reassemble_jigsaw,
    save_clip,
)
from vpseg.metrics import dice, e_measure, iou, s_measure, weighted_fmeasure
from vpseg.network import VideoSegNet
from vpseg.selfsup import ClusterModel, MemoryBank, h_posterior, nce_loss, pld_loss
from vpseg.training import (
    build_model,
    count_params,
    fit,
    grad_check,
    joint_loss,
    model_from_checkpoint,
    train_step,
    training_dice,
)


def report(n: int, text: str) -> None:
    print(f"\nACCEPTANCE {n:02d} PASS: {text}")


def test_criterion_01_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(100)
    for _ in range(1000):
        h = int(rng.integers(2, 33))
        w = int(rng.integers(2, 33))
        p = (rng.random((h, w)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
        g = (rng.random((h, w)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
        d = dice(p, g)
        j = iou(p, g)
        assert abs(d - oracles.pixel_count_dice(p, g)) <= 1e-12
        assert abs(j - oracles.pixel_count_iou(p, g)) <= 1e-12
        assert j <= d + 1e-15

    import json
    from pathlib import Path

    golden = json.loads(
        (Path(__file__).parent / "golden" / "metric_oracle_values.json").read_text())
    pinned = np.random.default_rng(golden["seed"])
    for entry in golden["cases"]:
        g = (pinned.random((32, 32)) < 0.4).astype(np.uint8)
        prob = np.clip(pinned.random((32, 32)) * 0.6 + g * pinned.random((32, 32)) * 0.4,
                       0, 1)
        if not g.any():
            g[16, 16] = 1
        assert abs(s_measure(prob, g) - oracles.reference_s_measure(prob, g)) <= 1e-6
        assert abs(e_measure(prob, g) - oracles.reference_e_measure(prob, g)) <= 1e-6
        assert abs(weighted_fmeasure(prob, g)
                   - oracles.reference_weighted_fmeasure(prob, g)) <= 1e-6
        assert abs(s_measure(prob, g) - entry["smeasure"]) <= 1e-6
        assert abs(e_measure(prob, g) - entry["emeasure"]) <= 1e-6
        assert abs(weighted_fmeasure(prob, g) - entry["wfm"]) <= 1e-6
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0, f"metric oracle suite took {elapsed:.1f}s"
    report(1, f"dice/iou vs pixel counting (1000 pairs), S/E/Fw vs reference "
              f"(20 cases) in {elapsed:.1f}s")


def test_criterion_02_affinity_normalization():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    rows_checked = 0
    for dilations in [(3, 4, 3, 4), (1, 2, 1, 2)]:
        torch.manual_seed(7)
        block = NormalizedAttentionBlock(
            NSBlockConfig(channels=32, groups=4, kernel_k=3, dilations=dilations))
        x_q = torch.rand(1, 32, 16, 28)
        x_kv = torch.rand(5, 32, 16, 28)
        _, internals = block(x_q, x_kv, return_internals=True)
        for aff in internals.affinity:
            picks = rng.choice(aff.shape[0], size=125, replace=False)
            rows = aff[picks]
            assert np.all(rows >= 0.0)
            assert np.abs(rows.sum(axis=1) - 1.0).max() <= 1e-5
            rows_checked += len(picks)
    assert rows_checked >= 1000
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    report(2, f"{rows_checked} affinity rows nonnegative and sum to 1 +/- 1e-5 "
              f"in {elapsed:.1f}s")


def test_criterion_03_dense_attention_equivalence():
    worst = 0.0
    for seed in range(10):
        torch.manual_seed(seed)
        block = NormalizedAttentionBlock(
            NSBlockConfig(channels=8, groups=2, kernel_k=3, dilations=(1, 1))
        ).double()
        x_q = torch.rand(1, 8, 4, 4, dtype=torch.float64)
        x_kv = torch.rand(1, 8, 4, 4, dtype=torch.float64)
        with torch.no_grad():
            windowed = block(x_q, x_kv)
        dense = oracles.dense_attention_oracle(block, x_q, x_kv)
        worst = max(worst, float((windowed - dense).abs().max()))
    assert worst <= 1e-5
    report(3, f"windowed block equals dense-attention oracle on 10 seeds "
              f"(max abs diff {worst:.2e})")


def _mini_end_to_end():
    torch.manual_seed(11)
    model = VideoSegNet(
        backbone=BackboneConfig(kind="toy", reduced_channels=8,
                                toy_widths=(4, 4, 6, 8), toy_stem_stride=1,
                                toy_stage_strides=(1, 1, 1, 2)),
        branching=True, n_blocks=3, groups=2, kernel_k=1,
        dilations_pair=(1, 2), dilations_refine=(1, 2),
        embed_dim=8, jigsaw_grid=2, decoder_hidden=4)
    return model


def test_criterion_04_end_to_end_gradient_check():
    start = time.perf_counter()
    model = _mini_end_to_end()
    gen = torch.Generator().manual_seed(12)
    anchor = torch.rand(1, 3, 8, 14, generator=gen, dtype=torch.float64)
    neighbors = torch.rand(3, 3, 8, 14, generator=gen, dtype=torch.float64)
    masks = (torch.rand(4, 8, 14, generator=gen) > 0.5).double()
    patches = torch.rand(4, 3, 8, 8, generator=gen, dtype=torch.float64)

    bank = MemoryBank(momentum=0.5)
    for name in ("probe", "n0", "n1", "n2"):
        vec = torch.rand(8, generator=gen, dtype=torch.float64) - 0.5
        bank.insert(name, vec / vec.norm())
    clusters = ClusterModel(
        image_centroids=torch.rand(2, 8, generator=gen, dtype=torch.float64) - 0.5,
        patch_centroids=torch.rand(2, 8, generator=gen, dtype=torch.float64) - 0.5,
        k=2)

    def loss_fn(m):
        out = m(anchor, neighbors)
        bce = F.binary_cross_entropy_with_logits(out.all_logits(), masks)
        img_emb = m.embed_image(out.anchor_high_raw)
        patch_emb = m.embed_patches(patches)
        nce = nce_loss(img_emb, patch_emb, bank, "probe", ["n0", "n1", "n2"],
                       tau=0.5)
        pld = pld_loss(img_emb.unsqueeze(0), patch_emb.unsqueeze(0), clusters,
                       tau=0.5)
        return joint_loss(nce, pld, bce, 0.25, 0.25, 0.5)

    total = count_params(model)
    assert total >= 200
    result = grad_check(model, loss_fn, max_params=200,
                        rng=np.random.default_rng(4))
    elapsed = time.perf_counter() - start
    assert result.checked >= 200
    assert result.max_rel_err < 1e-3, \
        f"max rel err {result.max_rel_err:.2e} over {result.checked} params"
    assert elapsed < 300.0
    report(4, f"finite differences vs autodiff on {result.checked} params, "
              f"max rel err {result.max_rel_err:.2e}, {elapsed:.0f}s")


def test_criterion_05_loss_composition(tmp_path):
    rng = np.random.default_rng(102)
    for _ in range(100):
        n, p, b = rng.uniform(0.0, 5.0, size=3)
        assert joint_loss(n, p, b, 0.25, 0.25, 0.5) == 0.25 * n + 0.25 * p + 0.5 * b

    data = write_synthetic_dataset(tmp_path / "data")
    cfg = tiny_run_config(tmp_path / "run", ssl_mode="off")
    index = load_dataset(data, "train", delta=cfg.training.delta)
    torch.manual_seed(0)
    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.training.lr)
    from vpseg.dataio import resize_clip, sample_clip

    batch = [resize_clip(sample_clip(index, c, np.random.default_rng(0),
                                     delta=cfg.training.delta),
                         cfg.training.input_size)
             for c in index.case_ids()]
    step = train_step(model, opt, batch, MemoryBank(), None, cfg,
                      np.random.default_rng(0), phase="seg_only")
    assert step.nce == 0.0 and step.pld == 0.0
    report(5, "joint weighting exact on stubs; ssl off forces nce = pld = 0")


def test_criterion_06_contrastive_analytic_cases():
    assert abs(h_posterior(0.5, [0.5], 1.0).item() - 0.5) <= 1e-6
    assert abs(h_posterior(1.0, [-1.0], 1.0).item() - 0.8807970) <= 1e-6
    assert abs(h_posterior(0.3, [], 1.0).item() - 1.0) <= 1e-6

    clusters = ClusterModel(
        image_centroids=torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64),
        patch_centroids=torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64),
        k=2)
    img = [torch.tensor([0.6, 0.8], dtype=torch.float64)]
    patch = [torch.tensor([0.0, 1.0], dtype=torch.float64)]
    loss = pld_loss(img, patch, clusters, tau=0.07).item()
    assert abs(loss - math.log(2.0)) <= 1e-9
    report(6, "h posterior matches 0.5 / 0.8807970 / 1.0; equal-centroid "
              "cluster loss = ln 2")


def test_criterion_07_overfit_probe(tmp_path):
    start = time.perf_counter()
    for i in range(2):
        spec = SyntheticClipSpec(height=64, width=112, delta=5,
                                 radius_range=(10.0, 16.0), velocity=(2.0, 0.0),
                                 contrast=0.6, noise_sigma=0.015,
                                 seed=3 + i, case_id=f"case_{i:03d}")
        save_clip(gen_synthetic_clip(spec), tmp_path / "data", "train")

    cfg = RunConfig()
    cfg.training.input_size = (64, 112)
    cfg.training.batch_size = 2
    cfg.training.delta = 5
    cfg.training.lr = 3e-3
    cfg.training.epochs = 10
    cfg.training.iters_per_epoch = 20  # 200 optimizer steps total
    cfg.training.out_dir = str(tmp_path / "run")
    cfg.ssl.cluster_k = 2
    cfg.ssl.negatives = 8
    cfg.validate()

    index = load_dataset(tmp_path / "data", "train", delta=5)
    result = fit(cfg, index)
    score = training_dice(result.model, index, cfg)
    elapsed = time.perf_counter() - start
    assert score >= 0.95, f"training mDice {score:.4f} after 200 iterations"
    assert elapsed < 600.0
    report(7, f"two-clip overfit reaches training mDice {score:.3f} "
              f"in 200 iterations ({elapsed:.0f}s)")


def test_criterion_08_ablation_machinery(tmp_path):
    data = write_synthetic_dataset(tmp_path / "data")
    counts = {}
    modes = [("no_ssl", dict(ssl_mode="off", branching=False)),
             ("ssl_external", dict(ssl_mode="external_pretrain", branching=False)),
             ("ssl_e2e", dict(ssl_mode="end_to_end", branching=False)),
             ("ssl_e2e_branching", dict(ssl_mode="end_to_end", branching=True))]
    for name, overrides in modes:
        cfg = tiny_run_config(tmp_path / name, epochs=1, iters_per_epoch=1,
                              **overrides)
        index = load_dataset(data, "train", delta=cfg.training.delta)
        result = fit(cfg, index)
        assert len(result.log_rows) == 1
        counts[name] = count_params(result.model)
    # heads exist in every mode: only the branching axis changes the architecture
    assert counts["no_ssl"] == counts["ssl_external"] == counts["ssl_e2e"]
    assert counts["ssl_e2e_branching"] != counts["ssl_e2e"]

    block_counts = {}
    for n_blocks in (2, 3, 4):
        cfg = tiny_run_config(tmp_path / f"blocks{n_blocks}", epochs=1,
                              iters_per_epoch=1, ns_blocks=n_blocks)
        index = load_dataset(data, "train", delta=cfg.training.delta)
        result = fit(cfg, index)
        block_counts[n_blocks] = count_params(result.model)
    assert block_counts[2] < block_counts[3] < block_counts[4]
    report(8, f"ablation grid trains; parameter counts {counts['ssl_e2e']} "
              f"(plain) vs {counts['ssl_e2e_branching']} (branching); "
              f"blocks 2/3/4 -> {sorted(block_counts.values())}")


def test_criterion_09_jigsaw_round_trip():
    rng = np.random.default_rng(103)
    for trial in range(200):
        h = int(rng.integers(8, 40))
        w = int(rng.integers(8, 40))
        grid = int(rng.integers(2, 5))
        frame = rng.random((h, w, 3)).astype(np.float32)
        ps = make_jigsaw(frame, grid, np.random.default_rng(trial))
        assert np.array_equal(reassemble_jigsaw(ps), crop_to_grid(frame, grid))
    report(9, "200 random (frame, grid, seed) triples reassemble bit-exactly")


def test_criterion_10_reproducibility(tmp_path):
    data = write_synthetic_dataset(tmp_path / "data")
    logs = []
    for name in ("a", "b"):
        cfg = tiny_run_config(tmp_path / name, epochs=2, iters_per_epoch=2)
        index = load_dataset(data, "train", delta=cfg.training.delta)
        logs.append(fit(cfg, index).log_rows)
    for ra, rb in zip(*logs):
        for key in ("nce", "pld", "bce", "joint"):
            assert abs(ra[key] - rb[key]) <= 1e-7

    runner = CliRunner()
    ckpt = tmp_path / "a" / "checkpoint.pt"
    frames_dir = data / "train" / "Frame" / "case_000"
    trees = []
    for out_name in ("p1", "p2"):
        out = tmp_path / out_name
        res = runner.invoke(cli_main, ["infer", "--checkpoint", str(ckpt),
                                       "--frames", str(frames_dir),
                                       "--out", str(out)])
        assert res.exit_code == 0, res.output
        trees.append({p.name: p.read_bytes()
                      for p in sorted((out / "case_000").glob("*.png"))})
    assert trees[0] == trees[1] and trees[0]
    report(10, "same seed gives identical logs; repeated inference is "
               "bit-identical")


def test_criterion_11_bench_and_checkpoint_integrity(tmp_path):
    data = write_synthetic_dataset(tmp_path / "data", height=64, width=112)
    cfg = tiny_run_config(tmp_path / "run", epochs=1, iters_per_epoch=1)
    cfg.training.input_size = (64, 112)
    index = load_dataset(data, "train", delta=cfg.training.delta)
    result = fit(cfg, index)

    report_obj = run_benchmark(result.model, (64, 112), clip_length=6,
                               warmup=2, iters=10)
    assert report_obj.frames_processed == 60
    assert abs(report_obj.fps
               - report_obj.frames_processed / report_obj.wall_seconds) <= 1e-9
    assert report_obj.fps >= 5.0  # regression floor for the toy model on CPU
    assert report_obj.per_frame_latency_ms["p50"] <= report_obj.per_frame_latency_ms["p95"]

    reloaded, _ = model_from_checkpoint(result.checkpoint_path)
    probe = torch.rand(3, 3, *cfg.training.input_size)
    result.model.eval()
    with torch.no_grad():
        a = result.model(probe[:1], probe[1:]).all_probs()
        b = reloaded(probe[:1], probe[1:]).all_probs()
    assert torch.equal(a, b)
    report(11, f"bench report consistent ({report_obj.fps:.1f} fps); "
               f"checkpoint round-trip forward is bit-identical")
