"""Grouped, query-normalized window attention across frames, and the
global-to-local assembly that fuses branched anchor and neighbour features.

Each attention block splits its channels into N groups.  Per group, every
query position attends to a dilated (2k+1)^2 spatial window replicated over
all T key/value frames; group dilations differ, giving multi-scale windows.
Queries are layer-normalized over the channel axis before the dot product.
Out-of-bounds window slots are excluded from the softmax; the window centre
is always in bounds, so every affinity row has at least one valid entry and
rows sum to one over their valid slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeatureMap, branch


class ConfigMismatchError(Exception):
    """Attention inputs are inconsistent with the block configuration."""


class IndivisibleChannelsError(Exception):
    """Channel count is not divisible by the group count."""


class BranchMismatchError(Exception):
    """Branch pairs fed to the fusion stage do not line up."""


@dataclass
class NSBlockConfig:
    """Shape of one attention block: group count, window kernel, per-group
    dilations, and channel budget."""

    channels: int
    groups: int = 4
    kernel_k: int = 3
    dilations: tuple[int, ...] = (3, 4, 3, 4)
    norm_affine: bool = True
    temperature: float | None = None  # defaults to sqrt(channels / groups)

    def __post_init__(self):
        if self.channels % self.groups:
            raise IndivisibleChannelsError(
                f"channels {self.channels} not divisible by {self.groups} groups")
        if len(self.dilations) != self.groups:
            raise ConfigMismatchError(
                f"need {self.groups} dilations, got {len(self.dilations)}")
        if self.kernel_k < 1 or any(d < 1 for d in self.dilations):
            raise ConfigMismatchError("kernel and dilations must be >= 1")

    @property
    def group_channels(self) -> int:
        return self.channels // self.groups

    @property
    def window(self) -> int:
        return (2 * self.kernel_k + 1) ** 2


def default_dilations(groups: int) -> tuple[int, ...]:
    # fallback rule d_i = 2i - 1 when no explicit list is configured
    return tuple(2 * i - 1 for i in range(1, groups + 1))


@dataclass
class AttentionInternals:
    """Debug record: per-group affinity rows, per-group aggregations, and the
    max-response saliency map used for soft gating."""

    affinity: list[np.ndarray] = field(default_factory=list)
    aggregation: list[np.ndarray] = field(default_factory=list)
    soft_map: np.ndarray | None = None


def sample_neighborhood(feat: torch.Tensor, center: tuple[int, int],
                        kernel_k: int, dilation: int) -> torch.Tensor:
    """Gather one query position's window: rows ordered (t-major, dy, dx).

    ``feat`` is (T, c, h, w); returns (T * (2k+1)^2, c) with zero rows where
    the dilated offset falls outside the map.
    """
    t, c, h, w = feat.shape
    y, x = center
    if not (0 <= y < h and 0 <= x < w):
        raise IndexError(f"center {center} outside {h}x{w} map")
    rows = []
    for ti in range(t):
        for dy in range(-kernel_k, kernel_k + 1):
            for dx in range(-kernel_k, kernel_k + 1):
                yy = y + dilation * dy
                xx = x + dilation * dx
                if 0 <= yy < h and 0 <= xx < w:
                    rows.append(feat[ti, :, yy, xx])
                else:
                    rows.append(feat.new_zeros(c))
    return torch.stack(rows, dim=0)


def gather_windows(feat: torch.Tensor, kernel_k: int,
                   dilation: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Vectorized window gather for every position at once.

    Returns ``(windows, valid)``: windows is (T*(2k+1)^2, c, h, w) in the same
    row order as ``sample_neighborhood``; valid is a boolean (T*(2k+1)^2, h, w)
    marking in-bounds rows.
    """
    t, c, h, w = feat.shape
    pad = kernel_k * dilation
    padded = F.pad(feat, (pad, pad, pad, pad))
    side = 2 * kernel_k + 1
    slices = []
    for oy in range(side):
        for ox in range(side):
            y0 = oy * dilation
            x0 = ox * dilation
            slices.append(padded[:, :, y0:y0 + h, x0:x0 + w])
    # (T, O, c, h, w) -> rows t-major
    stacked = torch.stack(slices, dim=1)
    windows = stacked.reshape(t * side * side, c, h, w)

    ys = torch.arange(h, device=feat.device)[:, None]
    xs = torch.arange(w, device=feat.device)[None, :]
    valid_offsets = []
    for oy in range(side):
        for ox in range(side):
            dy = (oy - kernel_k) * dilation
            dx = (ox - kernel_k) * dilation
            ok = (ys + dy >= 0) & (ys + dy < h) & (xs + dx >= 0) & (xs + dx < w)
            valid_offsets.append(ok)
    valid = torch.stack(valid_offsets, dim=0).repeat(t, 1, 1)
    return windows, valid


class NormalizedAttentionBlock(nn.Module):
    """One grouped window-attention block with soft max-response gating.

    Queries come from ``query_src`` (broadcast over frames when single-frame),
    keys/values from ``kv_src``; the output matches the key/value shape.
    """

    def __init__(self, cfg: NSBlockConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.query_proj = nn.Conv2d(c, c, 1)
        self.key_proj = nn.Conv2d(c, c, 1)
        self.value_proj = nn.Conv2d(c, c, 1)
        self.query_norms = nn.ModuleList(
            nn.LayerNorm(cfg.group_channels, elementwise_affine=cfg.norm_affine)
            for _ in range(cfg.groups)
        )
        # bias-free so zero values aggregate to an exactly zero pre-residual output
        self.out_proj = nn.Conv2d(c, c, 1, bias=False)

    def identity_init_qkv(self) -> None:
        for proj in (self.query_proj, self.key_proj, self.value_proj):
            with torch.no_grad():
                proj.weight.zero_()
                for c in range(proj.out_channels):
                    proj.weight[c, c, 0, 0] = 1.0
                proj.bias.zero_()

    def embed_qkv(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Pointwise query/key/value embeddings of one (T, C, h, w) map."""
        if x.shape[1] != self.cfg.channels:
            raise ConfigMismatchError(
                f"expected {self.cfg.channels} channels, got {x.shape[1]}")
        return self.query_proj(x), self.key_proj(x), self.value_proj(x)

    def _normalize_query(self, q_group: torch.Tensor, index: int) -> torch.Tensor:
        # layernorm over the channel axis per position
        q = q_group.permute(0, 2, 3, 1)
        q = self.query_norms[index](q)
        return q.permute(0, 3, 1, 2)

    def group_and_normalize(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor):
        """Split Q/K/V into groups; queries are layer-normalized per group."""
        cfg = self.cfg
        if q.shape[1] % cfg.groups:
            raise IndivisibleChannelsError(
                f"{q.shape[1]} channels not divisible by {cfg.groups}")
        cg = cfg.group_channels
        out = []
        for i in range(cfg.groups):
            sl = slice(i * cg, (i + 1) * cg)
            out.append((self._normalize_query(q[:, sl], i), k[:, sl], v[:, sl]))
        return out

    def forward(self, query_src: torch.Tensor, kv_src: torch.Tensor,
                return_internals: bool = False):
        cfg = self.cfg
        if query_src.shape[1] != cfg.channels or kv_src.shape[1] != cfg.channels:
            raise ConfigMismatchError(
                f"channel mismatch: query {query_src.shape[1]}, kv {kv_src.shape[1]}, "
                f"config {cfg.channels}")
        if query_src.shape[2:] != kv_src.shape[2:]:
            raise ConfigMismatchError(
                f"spatial mismatch: {tuple(query_src.shape[2:])} vs {tuple(kv_src.shape[2:])}")
        t = kv_src.shape[0]
        if query_src.shape[0] == 1 and t > 1:
            query_src = query_src.expand(t, -1, -1, -1)
        elif query_src.shape[0] != t:
            raise ConfigMismatchError(
                f"query has {query_src.shape[0]} frames, kv has {t}")

        q = self.query_proj(query_src)
        k = self.key_proj(kv_src)
        v = self.value_proj(kv_src)
        groups = self.group_and_normalize(q, k, v)

        _, _, h, w = kv_src.shape
        scale = cfg.temperature if cfg.temperature is not None \
            else float(cfg.group_channels) ** 0.5
        neg_inf = torch.finfo(q.dtype).min
        aggregated = []
        responses = []
        internals = AttentionInternals() if return_internals else None
        for i, (q_hat, k_i, v_i) in enumerate(groups):
            k_win, valid = gather_windows(k_i, cfg.kernel_k, cfg.dilations[i])
            v_win, _ = gather_windows(v_i, cfg.kernel_k, cfg.dilations[i])
            logits = torch.einsum("tchw,rchw->trhw", q_hat, k_win) / scale
            logits = logits.masked_fill(~valid.unsqueeze(0), neg_inf)
            affinity = torch.softmax(logits, dim=1)
            affinity = affinity * valid.unsqueeze(0)
            agg = torch.einsum("trhw,rchw->tchw", affinity, v_win)
            aggregated.append(agg)
            responses.append(affinity.max(dim=1).values)
            if internals is not None:
                r = affinity.shape[1]
                internals.affinity.append(
                    affinity.permute(0, 2, 3, 1).reshape(t * h * w, r)
                    .detach().cpu().numpy())
                internals.aggregation.append(
                    agg.permute(0, 2, 3, 1).reshape(t * h * w, -1)
                    .detach().cpu().numpy())

        fused = torch.cat(aggregated, dim=1)
        soft_map = torch.stack(responses, dim=0).max(dim=0).values
        out = self.out_proj(fused * soft_map.unsqueeze(1))
        if internals is not None:
            internals.soft_map = soft_map.detach().cpu().numpy()
            return out, internals
        return out


class GlobalToLocalFusion(nn.Module):
    """Anchor-queried refinement of neighbour features.

    With branching, each channel half of the anchor queries the matching half
    of the neighbours through its own attention block (residual on the
    neighbour half); the halves are re-concatenated and refined by further
    self-attention blocks, each wrapped in a double residual
    ``block(z, z) + z + z``.  Without branching a single full-width block
    replaces the pair.  ``n_blocks`` counts blocks in the branched layout
    (2 = pair only, 3 = pair + one refinement, 4 = pair + two).
    """

    def __init__(self, channels: int, branching: bool = True, n_blocks: int = 3,
                 groups: int = 4, kernel_k: int = 3,
                 dilations_pair: tuple[int, ...] = (3, 4, 3, 4),
                 dilations_refine: tuple[int, ...] = (1, 2, 1, 2),
                 norm_affine: bool = True):
        super().__init__()
        if n_blocks not in (2, 3, 4):
            raise ConfigMismatchError(f"n_blocks must be 2, 3 or 4, got {n_blocks}")
        if channels % 2:
            raise ConfigMismatchError(f"fusion needs even channels, got {channels}")
        self.channels = channels
        self.branching = branching
        self.n_blocks = n_blocks
        pair_channels = channels // 2 if branching else channels
        pair_cfg = NSBlockConfig(pair_channels, groups, kernel_k,
                                 tuple(dilations_pair), norm_affine)
        self.block1 = NormalizedAttentionBlock(pair_cfg)
        self.block2 = NormalizedAttentionBlock(pair_cfg) if branching else None
        refine_cfg = NSBlockConfig(channels, groups, kernel_k,
                                   tuple(dilations_refine), norm_affine)
        n_refine = max(0, n_blocks - 2)
        self.refine_blocks = nn.ModuleList(
            NormalizedAttentionBlock(refine_cfg) for _ in range(n_refine)
        )

    def forward(self, global_high: FeatureMap, local_high: FeatureMap,
                return_internals: bool = False):
        if global_high.channels != self.channels or local_high.channels != self.channels:
            raise BranchMismatchError(
                f"expected {self.channels} channels, got global {global_high.channels} "
                f"and local {local_high.channels}")
        collected: list[AttentionInternals] = []

        def run(block, q, kv):
            if return_internals:
                out, internals = block(q, kv, return_internals=True)
                collected.append(internals)
                return out
            return block(q, kv)

        if self.branching:
            xg1, xg2 = branch(global_high)
            xl1, xl2 = branch(local_high)
            y1 = run(self.block1, xg1.data, xl1.data) + xl1.data
            y2 = run(self.block2, xg2.data, xl2.data) + xl2.data
            z = torch.cat((y1, y2), dim=1)
        else:
            z = run(self.block1, global_high.data, local_high.data) + local_high.data
        for block in self.refine_blocks:
            z = run(block, z, z) + z + z
        fused = local_high.with_data(z, branch=None)
        if return_internals:
            return fused, collected
        return fused
