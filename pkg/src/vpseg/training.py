"""Joint optimization of the segmentation and contrastive objectives,
checkpointing, finite-difference gradient verification, and parameter counts.

Epoch structure: clips are sampled and stepped, then at each epoch boundary
the memory bank applies its moving-average updates and the cluster model is
refitted.  Steps before the first refit therefore contribute no cluster loss.
Modes: ``off`` trains segmentation only; ``end_to_end`` optimizes the full
joint loss; ``external_pretrain`` runs contrastive-only epochs first, then
segmentation-only fine-tuning.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .backbone import BackboneConfig
from .config import RunConfig, config_from_dict
from .dataio import (
    DatasetIndex,
    VideoClip,
    make_jigsaw,
    read_frame,
    read_mask,
    resize_clip,
    sample_clip,
)
from .decoder import PredictionMask, bce_loss
from .metrics import dice as dice_metric
from .network import VideoSegNet, predict_case
from .selfsup import ClusterModel, MemoryBank, fit_clusters, nce_loss, pld_loss

CHECKPOINT_FORMAT_VERSION = 1

LOG_HEADER = ["epoch", "nce", "pld", "bce", "joint", "wall_seconds"]


class NonFiniteLossError(Exception):
    """A loss term became NaN or infinite; training aborts with diagnostics."""

    def __init__(self, terms: dict[str, float]):
        self.terms = terms
        super().__init__(f"non-finite loss terms: {terms}")


def joint_loss(nce, pld, bce, lambda1: float, lambda2: float, lambda3: float):
    """Weighted sum lambda1*nce + lambda2*pld + lambda3*bce."""
    return lambda1 * nce + lambda2 * pld + lambda3 * bce


def count_params(model: torch.nn.Module) -> int:
    """Number of trainable scalars."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def build_model(cfg: RunConfig) -> VideoSegNet:
    b = cfg.backbone
    return VideoSegNet(
        backbone=BackboneConfig(
            kind=b.kind, reduced_channels=b.reduced_channels,
            low_tap=b.low_tap, high_tap=b.high_tap, weights=b.weights,
            toy_widths=tuple(b.toy_widths)),
        branching=cfg.training.branching,
        n_blocks=cfg.training.ns_blocks,
        groups=cfg.attention.groups,
        kernel_k=cfg.attention.kernel_k,
        dilations_pair=tuple(cfg.attention.dilations_pair),
        dilations_refine=tuple(cfg.attention.dilations_refine),
        embed_dim=cfg.ssl.dim,
        jigsaw_grid=cfg.ssl.grid,
        decoder_hidden=cfg.training.decoder_hidden,
    )


def frames_to_tensor(frames: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(T, H, W, 3) numpy frames to a contiguous (T, 3, H, W) tensor.

    Must stay contiguous and owned: feeding permuted numpy-view tensors into
    the conv stack corrupts the CPU autograd heap.
    """
    return torch.from_numpy(np.ascontiguousarray(frames)) \
        .permute(0, 3, 1, 2).contiguous().to(dtype)


def clip_to_tensors(clip: VideoClip, dtype=torch.float32):
    frames = frames_to_tensor(clip.all_frames(), dtype)
    masks = torch.from_numpy(clip.all_masks().astype(np.float32)).to(dtype)
    return frames[:1], frames[1:], masks


def _patch_tensor(clip: VideoClip, grid: int, patch_size: tuple[int, int],
                  rng: np.random.Generator, dtype=torch.float32) -> torch.Tensor:
    patch_set = make_jigsaw(clip.anchor, grid, rng)
    ph, pw = patch_size
    resized = [
        cv2.resize(p, (pw, ph), interpolation=cv2.INTER_LINEAR)
        for p in patch_set.patches
    ]
    return frames_to_tensor(np.stack(resized), dtype)


@dataclass
class StepResult:
    nce: float
    pld: float
    bce: float
    joint: float


def dump_attention_internals(path: Path, internals: list) -> None:
    """Write each block's affinity matrices and saliency map to one npz."""
    arrays = {}
    for b, record in enumerate(internals):
        for g, aff in enumerate(record.affinity):
            arrays[f"block{b}_group{g}_affinity"] = aff
        arrays[f"block{b}_soft_map"] = record.soft_map
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def train_step(model: VideoSegNet, optimizer: torch.optim.Optimizer,
               batch: list[VideoClip], bank: MemoryBank,
               clusters: ClusterModel | None, cfg: RunConfig,
               rng: np.random.Generator, phase: str = "joint",
               patch_embs_by_id: dict | None = None,
               attention_dump: Path | None = None) -> StepResult:
    """One optimizer step on a batch of clips.

    ``phase`` is "joint", "ssl_only" or "seg_only".  In seg_only the
    contrastive terms are reported as exactly zero; in ssl_only the
    segmentation loss is reported but not optimized.  When
    ``attention_dump`` is set, the first clip's attention internals are
    written there.
    """
    model.train()
    param = next(model.parameters())
    dtype, device = param.dtype, param.device
    ssl_active = phase in ("joint", "ssl_only")
    t = cfg.training

    bce_terms = []
    nce_terms = []
    img_embs, patch_embs = [], []
    for i, clip in enumerate(batch):
        anchor, neighbors, masks = (x.to(device) for x in clip_to_tensors(clip, dtype))
        if i == 0 and attention_dump is not None:
            out = model(anchor, neighbors, return_internals=True)
            dump_attention_internals(attention_dump, out.attention_internals)
        else:
            out = model(anchor, neighbors)
        logits = out.all_logits()
        pred = PredictionMask(probs=torch.sigmoid(logits), logits=logits)
        bce_terms.append(bce_loss(pred, masks))
        if ssl_active:
            img_emb = model.embed_image(out.anchor_high_raw)
            patches = _patch_tensor(clip, cfg.ssl.grid, cfg.ssl.patch_size, rng, dtype)
            patch_emb = model.embed_patches(patches)
            sample_id = f"{clip.case_id}:{clip.frame_indices[0]}"
            if sample_id not in bank:
                bank.insert(sample_id, img_emb)
            negatives = bank.sample_negatives(sample_id, cfg.ssl.negatives, rng)
            nce_terms.append(nce_loss(img_emb, patch_emb, bank, sample_id,
                                      negatives, cfg.ssl.tau))
            bank.record(sample_id, img_emb)
            if patch_embs_by_id is not None:
                patch_embs_by_id[sample_id] = patch_emb.detach().clone()
            img_embs.append(img_emb)
            patch_embs.append(patch_emb)

    zero = torch.zeros((), dtype=dtype)
    bce = torch.stack(bce_terms).mean()
    nce = torch.stack(nce_terms).mean().to(dtype) if nce_terms else zero
    if ssl_active and clusters is not None and img_embs:
        pld = pld_loss(torch.stack(img_embs), torch.stack(patch_embs),
                       clusters, cfg.ssl.tau).to(dtype)
    else:
        pld = zero

    if phase == "ssl_only":
        objective = t.lambda1 * nce + t.lambda2 * pld
    elif phase == "seg_only":
        objective = t.lambda3 * bce
    else:
        objective = joint_loss(nce, pld, bce, t.lambda1, t.lambda2, t.lambda3)
    nce_v, pld_v, bce_v = (float(x.detach()) for x in (nce, pld, bce))
    terms = {"nce": nce_v, "pld": pld_v, "bce": bce_v,
             "joint": joint_loss(nce_v, pld_v, bce_v,
                                 t.lambda1, t.lambda2, t.lambda3)}
    if not all(np.isfinite(v) for v in terms.values()):
        raise NonFiniteLossError(terms)

    optimizer.zero_grad()
    objective.backward()
    optimizer.step()
    return StepResult(**terms)


def save_checkpoint(path: Path | str, model: VideoSegNet,
                    optimizer: torch.optim.Optimizer, bank: MemoryBank,
                    clusters: ClusterModel | None, patch_embs_by_id: dict,
                    epoch: int, cfg: RunConfig,
                    data_rng: np.random.Generator) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "bank": bank.state_dict(),
        "clusters": None if clusters is None else {
            "image_centroids": clusters.image_centroids,
            "patch_centroids": clusters.patch_centroids,
            "k": clusters.k,
        },
        "patch_embs": {k: v for k, v in sorted(patch_embs_by_id.items())},
        "epoch": epoch,
        "config": cfg.to_dict(),
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": data_rng.bit_generator.state,
    }
    torch.save(payload, str(path))


def load_checkpoint(path: Path | str) -> dict:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version}")
    return payload


def model_from_checkpoint(path: Path | str) -> tuple[VideoSegNet, RunConfig]:
    payload = load_checkpoint(path)
    cfg = config_from_dict(payload["config"])
    model = build_model(cfg)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, cfg


@dataclass
class FitResult:
    checkpoint_path: Path
    log_path: Path
    log_rows: list[dict]
    model: VideoSegNet
    bank: MemoryBank
    clusters: ClusterModel | None
    patch_embs_by_id: dict = field(default_factory=dict)


def _phase_for_epoch(cfg: RunConfig, epoch: int) -> str:
    mode = cfg.training.ssl_mode
    if mode == "off":
        return "seg_only"
    if mode == "end_to_end":
        return "joint"
    return "ssl_only" if epoch < cfg.ssl.pretrain_epochs else "seg_only"


def fit(cfg: RunConfig, index: DatasetIndex, resume: Path | str | None = None) -> FitResult:
    """Full training loop with per-epoch CSV logging and checkpointing.

    Resuming restores model, optimizer, bank, clusters, and both RNG states,
    so an interrupted-and-resumed run matches an uninterrupted one exactly.
    """
    cfg.validate()
    t = cfg.training
    out_dir = Path(t.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.pt"
    log_path = out_dir / "training_log.csv"

    torch.manual_seed(t.seed)
    data_rng = np.random.default_rng(t.seed)
    model = build_model(cfg).to(torch.device(t.device))
    optimizer = torch.optim.Adam(model.parameters(), lr=t.lr,
                                 weight_decay=t.weight_decay)
    bank = MemoryBank(cfg.ssl.momentum)
    clusters: ClusterModel | None = None
    patch_embs_by_id: dict[str, torch.Tensor] = {}
    start_epoch = 0
    log_rows: list[dict] = []

    if resume is not None:
        payload = load_checkpoint(resume)
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        bank = MemoryBank.from_state_dict(payload["bank"])
        if payload["clusters"] is not None:
            c = payload["clusters"]
            clusters = ClusterModel(c["image_centroids"], c["patch_centroids"], c["k"])
        patch_embs_by_id = dict(payload["patch_embs"])
        start_epoch = int(payload["epoch"])
        torch.set_rng_state(payload["torch_rng"])
        data_rng = np.random.default_rng(t.seed)
        data_rng.bit_generator.state = payload["numpy_rng"]

    case_ids = index.case_ids()
    for epoch in range(start_epoch, t.epochs):
        phase = _phase_for_epoch(cfg, epoch)
        epoch_start = time.perf_counter()
        sums = {"nce": 0.0, "pld": 0.0, "bce": 0.0, "joint": 0.0}
        for it in range(t.iters_per_epoch):
            batch = []
            for _ in range(t.batch_size):
                case = case_ids[int(data_rng.integers(0, len(case_ids)))]
                clip = sample_clip(index, case, data_rng, delta=t.delta)
                batch.append(resize_clip(clip, t.input_size))
            dump = (out_dir / "attention_debug" / f"epoch{epoch:03d}_step{it:04d}.npz"
                    if t.dump_attention else None)
            step = train_step(model, optimizer, batch, bank, clusters, cfg,
                              data_rng, phase, patch_embs_by_id,
                              attention_dump=dump)
            for key in sums:
                sums[key] += getattr(step, key)
        bank.end_epoch()
        if phase != "seg_only" and len(patch_embs_by_id) >= cfg.ssl.cluster_k \
                and len(bank) >= cfg.ssl.cluster_k:
            clusters = fit_clusters(bank, patch_embs_by_id, cfg.ssl.cluster_k, data_rng)
        wall = time.perf_counter() - epoch_start
        row = {"epoch": epoch,
               **{k: sums[k] / max(t.iters_per_epoch, 1) for k in sums},
               "wall_seconds": wall}
        log_rows.append(row)
        if (epoch + 1) % max(t.checkpoint_every, 1) == 0 or epoch == t.epochs - 1:
            save_checkpoint(ckpt_path, model, optimizer, bank, clusters,
                            patch_embs_by_id, epoch + 1, cfg, data_rng)

    if not ckpt_path.exists():
        save_checkpoint(ckpt_path, model, optimizer, bank, clusters,
                        patch_embs_by_id, start_epoch, cfg, data_rng)
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_HEADER)
        writer.writeheader()
        writer.writerows(log_rows)
    return FitResult(ckpt_path, log_path, log_rows, model, bank, clusters,
                     patch_embs_by_id)


@dataclass
class GradCheckEntry:
    name: str
    index: int
    autodiff: float
    finite_diff: float
    rel_err: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    max_rel_err: float
    checked: int


def grad_check(model: torch.nn.Module, loss_fn, rel_tol: float = 1e-3,
               max_params: int = 200, rng: np.random.Generator | None = None,
               step: float = 1e-5) -> GradCheckReport:
    """Finite differences vs autodiff on sampled parameter coordinates.

    Uses a five-point central stencil (O(step^4) truncation) in float64;
    ``loss_fn(model)`` must return a scalar and be deterministic.
    Coordinates where both gradients are ~0 report a relative error of 0.
    """
    rng = rng or np.random.default_rng(0)
    model.double()
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    model.zero_grad()
    loss = loss_fn(model)
    loss.backward()
    grads = {n: (p.grad.detach().clone() if p.grad is not None
                 else torch.zeros_like(p)) for n, p in params}

    coords = [(n, i) for n, p in params for i in range(p.numel())]
    if len(coords) > max_params:
        picks = rng.choice(len(coords), size=max_params, replace=False)
        coords = [coords[int(i)] for i in picks]

    by_name = dict(params)
    entries = []
    with torch.no_grad():
        for name, idx in coords:
            flat = by_name[name].view(-1)
            original = flat[idx].item()

            def eval_at(offset):
                flat[idx] = original + offset
                return float(loss_fn(model))

            f2u = eval_at(2 * step)
            f1u = eval_at(step)
            f1d = eval_at(-step)
            f2d = eval_at(-2 * step)
            flat[idx] = original
            fd = (-f2u + 8.0 * f1u - 8.0 * f1d + f2d) / (12.0 * step)
            ad = float(grads[name].view(-1)[idx])
            denom = max(abs(fd), abs(ad))
            rel = 0.0 if denom < 1e-8 else abs(fd - ad) / denom
            entries.append(GradCheckEntry(name, idx, ad, fd, rel))
    max_rel = max((e.rel_err for e in entries), default=0.0)
    return GradCheckReport(entries=entries, max_rel_err=max_rel, checked=len(entries))


def training_dice(model: VideoSegNet, index: DatasetIndex, cfg: RunConfig) -> float:
    """Mean dice over every frame of every case, at the training input size."""
    t = cfg.training
    scores = []
    for case_id in index.case_ids():
        pairs = index.cases[case_id]
        frames = [cv2.resize(read_frame(f), (t.input_size[1], t.input_size[0]),
                             interpolation=cv2.INTER_LINEAR) for f, _ in pairs]
        masks = [cv2.resize(read_mask(m), (t.input_size[1], t.input_size[0]),
                            interpolation=cv2.INTER_NEAREST) for _, m in pairs]
        probs = predict_case(model, frames_to_tensor(np.stack(frames)), t.delta).numpy()
        for prob, mask in zip(probs, masks):
            scores.append(dice_metric(prob >= 0.5, mask))
    return float(np.mean(scores))
