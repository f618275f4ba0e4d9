"""Two-stage decoder fusing refined high-level features with low-level
features into per-pixel polyp probabilities, plus the segmentation loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeatureMap


class StrideMismatchError(Exception):
    """Low-level features must sit at half the stride of the high-level ones."""


class ShapeMismatchError(Exception):
    """Prediction and target shapes differ."""


@dataclass
class PredictionMask:
    """Per-pixel probabilities in [0, 1] at input resolution, with the
    pre-sigmoid logits kept for numerically stable loss computation."""

    probs: torch.Tensor
    logits: torch.Tensor | None = None

    @property
    def logit_available(self) -> bool:
        return self.logits is not None


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.SiLU(),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.SiLU(),
    )


class MaskDecoder(nn.Module):
    """Upsample x2, fuse with the low-level skip, upsample x2 again, then
    project to one channel and resize to the requested output size."""

    def __init__(self, high_channels: int, low_channels: int, hidden: int = 32):
        super().__init__()
        self.stage1 = _conv_block(high_channels + low_channels, hidden)
        self.stage2 = _conv_block(hidden, hidden)
        self.head = nn.Conv2d(hidden, 1, 1)

    def forward(self, y_high: torch.Tensor, x_low: torch.Tensor,
                out_size: tuple[int, int]) -> torch.Tensor:
        up = F.interpolate(y_high, scale_factor=2, mode="bilinear", align_corners=False)
        if up.shape[2:] != x_low.shape[2:]:
            raise StrideMismatchError(
                f"upsampled high features {tuple(up.shape[2:])} do not match "
                f"low features {tuple(x_low.shape[2:])}")
        s1 = self.stage1(torch.cat((up, x_low), dim=1))
        s2 = self.stage2(F.interpolate(s1, scale_factor=2, mode="bilinear",
                                       align_corners=False))
        logits = self.head(s2)
        logits = F.interpolate(logits, size=out_size, mode="bilinear",
                               align_corners=False)
        return logits.squeeze(1)


def decode(decoder: MaskDecoder, y_high: FeatureMap, x_low: FeatureMap,
           out_size: tuple[int, int]) -> PredictionMask:
    """Run the decoder on tagged feature maps, checking the stride contract."""
    if x_low.stride * 2 != y_high.stride:
        raise StrideMismatchError(
            f"low stride {x_low.stride} must be half of high stride {y_high.stride}")
    logits = decoder(y_high.data, x_low.data, out_size)
    return PredictionMask(probs=torch.sigmoid(logits), logits=logits)


def bce_loss(pred: PredictionMask | torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over pixels and frames.

    Uses the stored logits when available; a probability-only input is
    clamped to [1e-7, 1 - 1e-7] first.
    """
    if isinstance(pred, PredictionMask):
        logits = pred.logits
        probs = pred.probs
    else:
        logits = None
        probs = pred
    target = target.to(probs.dtype)
    if probs.shape != target.shape:
        raise ShapeMismatchError(f"pred {tuple(probs.shape)} vs target {tuple(target.shape)}")
    if logits is not None:
        return F.binary_cross_entropy_with_logits(logits, target, reduction="mean")
    clamped = probs.clamp(1e-7, 1.0 - 1e-7)
    return F.binary_cross_entropy(clamped, target, reduction="mean")
