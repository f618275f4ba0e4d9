"""Command-line surface: training, inference, evaluation, synthetic data
generation, and throughput benchmarking.

Exit codes: 0 success, 2 usage/config error, 3 runtime error.  Every command
takes ``--seed`` and repeated invocations are reproducible; the ``VPSEG_DEVICE``
environment variable overrides the configured compute device.
"""

from __future__ import annotations

import dataclasses
import json
import os
import statistics
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import click
import cv2
import numpy as np
import torch
import yaml

from . import dataio
from .config import ConfigError, apply_overrides, load_config
from .metrics import METRIC_NAMES, evaluate, paired_ttest
from .network import predict_case, upsample_probs
from .training import fit, frames_to_tensor, model_from_checkpoint

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _device_override(configured: str) -> str:
    return os.environ.get("VPSEG_DEVICE", configured)


@click.group()
def main():
    """Video polyp segmentation toolkit."""


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_root", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--split", default="train", show_default=True)
@click.option("--override", "overrides", multiple=True,
              help="section.key=value, repeatable")
@click.option("--seed", type=int, default=None, help="overrides training.seed")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None)
def train(config_path, data_root, split, overrides, seed, resume):
    """Train from a YAML config; writes a checkpoint and a CSV log."""
    try:
        cfg = load_config(config_path)
        cfg = apply_overrides(cfg, list(overrides))
        if seed is not None:
            cfg.training.seed = seed
        cfg.training.device = _device_override(cfg.training.device)
        cfg.validate()
    except (ConfigError, yaml.YAMLError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    try:
        index = dataio.load_dataset(data_root, split, delta=cfg.training.delta)
        result = fit(cfg, index, resume=resume)
    except Exception as exc:
        _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    click.echo(f"checkpoint: {result.checkpoint_path}")
    click.echo(f"log: {result.log_path}")


def _case_frame_dirs(frames_dir: Path) -> list[tuple[str, Path]]:
    if (frames_dir / "Frame").is_dir():
        frames_dir = frames_dir / "Frame"
    files = [p for p in frames_dir.iterdir()
             if p.suffix.lower() in dataio.FRAME_EXTENSIONS]
    if files:
        return [(frames_dir.name, frames_dir)]
    return [(d.name, d) for d in sorted(frames_dir.iterdir()) if d.is_dir()]


def _boundary(mask: np.ndarray) -> np.ndarray:
    from scipy import ndimage

    eroded = ndimage.binary_erosion(mask, iterations=1)
    return mask & ~eroded


def _render_overlay(frame: np.ndarray, prob: np.ndarray) -> np.ndarray:
    overlay = frame.copy()
    edge = _boundary(prob >= 0.5)
    color = np.array([0.0, 1.0, 0.2], dtype=np.float32)
    overlay[edge] = 0.5 * overlay[edge] + 0.5 * color
    return overlay


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--frames", "frames_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--overlay", is_flag=True, help="also write boundary overlays")
@click.option("--seed", type=int, default=0, show_default=True)
def infer(checkpoint, frames_dir, out_dir, overlay, seed):
    """Sliding-window inference; one probability PNG per frame."""
    try:
        torch.manual_seed(seed)
        model, cfg = model_from_checkpoint(checkpoint)
        t = cfg.training
        out_root = Path(out_dir)
        cases = _case_frame_dirs(Path(frames_dir))
        if not cases:
            _fail(EXIT_CONFIG, f"no frames found under {frames_dir}")
        for case_id, case_dir in cases:
            paths = sorted(
                (p for p in case_dir.iterdir()
                 if p.suffix.lower() in dataio.FRAME_EXTENSIONS),
                key=dataio.frame_sort_key)
            if len(paths) < t.delta + 1:
                _fail(EXIT_CONFIG,
                      f"case {case_id} has {len(paths)} frames, needs >= {t.delta + 1}")
            originals = [dataio.read_frame(p) for p in paths]
            native_size = originals[0].shape[:2]
            resized = [cv2.resize(f, (t.input_size[1], t.input_size[0]),
                                  interpolation=cv2.INTER_LINEAR) for f in originals]
            probs = predict_case(model, frames_to_tensor(np.stack(resized)), t.delta)
            probs = upsample_probs(probs, native_size).numpy()
            for path, frame, prob in zip(paths, originals, probs):
                dataio.write_probability(out_root / case_id / f"{path.stem}.png", prob)
                if overlay:
                    dataio.write_frame(
                        out_root / f"{case_id}_overlay" / f"{path.stem}.png",
                        _render_overlay(frame, prob))
    except SystemExit:
        raise
    except Exception as exc:
        _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    click.echo(f"predictions written to {out_dir}")


@main.command(name="eval")
@click.option("--pred", "pred_dir", required=True, type=click.Path(file_okay=False))
@click.option("--gt", "gt_dir", required=True, type=click.Path(file_okay=False))
@click.option("--out-csv", type=click.Path(dir_okay=False), default=None)
@click.option("--out-json", type=click.Path(dir_okay=False), default=None)
@click.option("--compare", "compare_dir", type=click.Path(file_okay=False), default=None,
              help="second prediction tree; appends paired t-test columns")
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True,
              help="accepted for a uniform surface; evaluation is deterministic")
def eval_cmd(pred_dir, gt_dir, out_csv, out_json, compare_dir, threshold, seed):
    """Score predictions against ground truth; prints the aggregate row."""
    if not Path(gt_dir).is_dir():
        _fail(EXIT_CONFIG, f"ground-truth directory {gt_dir} does not exist")
    if not Path(pred_dir).is_dir():
        _fail(EXIT_CONFIG, f"prediction directory {pred_dir} does not exist")
    try:
        report = evaluate(pred_dir, gt_dir, binarize_threshold=threshold)
        if out_csv:
            report.write_csv(out_csv)
        parts = [f"{name}={report.aggregate[name]:.4f}" for name in METRIC_NAMES]
        click.echo("aggregate: " + " ".join(parts)
                   + f" frames={report.counts['frames']}")
        ttests = {}
        if compare_dir:
            other = evaluate(compare_dir, gt_dir, binarize_threshold=threshold)
            for name in METRIC_NAMES:
                a = [getattr(fm, name) for fm in report.per_frame]
                b = [getattr(fm, name) for fm in other.per_frame]
                res = paired_ttest(a, b)
                ttests[name] = {"t": res.t, "p": res.p}
                click.echo(f"ttest[{name}]: t={res.t:.6g} p={res.p:.6g}")
        if out_json:
            report.write_json(out_json)
            if ttests:
                path = Path(out_json)
                payload = json.loads(path.read_text())
                payload["ttest_vs_compare"] = ttests
                path.write_text(json.dumps(payload, indent=2))
    except SystemExit:
        raise
    except Exception as exc:
        _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")


@dataclass
class BenchReport:
    frames_processed: int
    wall_seconds: float
    fps: float
    per_frame_latency_ms: dict
    device: str
    clip_length: int


def run_benchmark(model, input_size: tuple[int, int], clip_length: int,
                  warmup: int, iters: int, device: str = "cpu",
                  seed: int = 0) -> BenchReport:
    """Steady-state single-stream throughput of full-clip forward passes."""
    h, w = input_size
    model = model.to(torch.device(device))
    model.eval()
    clip = torch.rand(clip_length, 3, h, w,
                      generator=torch.Generator().manual_seed(seed)).to(device)
    with torch.no_grad():
        for _ in range(warmup):
            model(clip[:1], clip[1:])
        latencies = []
        start = time.perf_counter()
        for _ in range(iters):
            t0 = time.perf_counter()
            model(clip[:1], clip[1:])
            latencies.append(time.perf_counter() - t0)
        wall = time.perf_counter() - start
    frames = iters * clip_length
    per_frame = sorted(1000.0 * lat / clip_length for lat in latencies)
    p50 = statistics.median(per_frame)
    p95 = per_frame[min(len(per_frame) - 1, int(round(0.95 * (len(per_frame) - 1))))]
    return BenchReport(
        frames_processed=frames,
        wall_seconds=wall,
        fps=frames / wall,
        per_frame_latency_ms={
            "mean": sum(per_frame) / len(per_frame), "p50": p50, "p95": p95},
        device=device,
        clip_length=clip_length,
    )


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--clip-length", type=int, default=6, show_default=True)
@click.option("--input-size", nargs=2, type=int, default=None,
              help="H W; defaults to the checkpoint's training size")
@click.option("--warmup", type=int, default=3, show_default=True)
@click.option("--iters", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_json", type=click.Path(dir_okay=False), default=None)
def bench(checkpoint, clip_length, input_size, warmup, iters, seed, out_json):
    """Measure inference FPS and per-frame latency percentiles."""
    try:
        model, cfg = model_from_checkpoint(checkpoint)
        size = tuple(input_size) if input_size else tuple(cfg.training.input_size)
        report = run_benchmark(model, size, clip_length, warmup, iters,
                               device=_device_override(cfg.training.device),
                               seed=seed)
    except Exception as exc:
        _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    payload = json.dumps(asdict(report), indent=2)
    if out_json:
        Path(out_json).parent.mkdir(parents=True, exist_ok=True)
        Path(out_json).write_text(payload)
    click.echo(payload)


@main.command()
@click.option("--spec", "spec_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_root", required=True, type=click.Path(file_okay=False))
@click.option("--cases", "n_cases", type=int, default=3, show_default=True)
@click.option("--split", default="train", show_default=True)
@click.option("--seed", type=int, default=None, help="overrides the spec seed")
def synth(spec_path, out_root, n_cases, split, seed):
    """Generate synthetic cases in the on-disk dataset layout."""
    try:
        with open(spec_path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise dataio.InvalidSpecError("synthetic spec must be a mapping")
        if seed is not None:
            raw["seed"] = seed
        base_seed = int(raw.get("seed", 0))
        n_frames = int(raw.pop("frames", 8))
        known = {f.name for f in dataclasses.fields(dataio.SyntheticClipSpec)}
        unknown = set(raw) - known
        if unknown:
            raise dataio.InvalidSpecError(f"unknown synthetic spec keys: {sorted(unknown)}")
        for i in range(n_cases):
            spec = dataio.SyntheticClipSpec(**{**raw,
                                               "delta": n_frames - 1,
                                               "seed": base_seed + i,
                                               "case_id": f"case_{i:03d}"})
            clip = dataio.gen_synthetic_clip(spec)
            dataio.save_clip(clip, out_root, split)
    except (dataio.InvalidSpecError, yaml.YAMLError, TypeError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    except Exception as exc:
        _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    click.echo(f"wrote {n_cases} cases under {out_root}")


if __name__ == "__main__":
    main()
