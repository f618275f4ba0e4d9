"""The assembled clip-segmentation network.

One shared encoder feeds both streams: the anchor frame ("global") supplies
attention queries, the neighbour frames ("local") supply keys/values and the
decoder skip.  Neighbour predictions come from the fused temporal features;
the anchor's prediction reuses the same decoder on the global pathway.
Contrastive projection heads hang off the raw high-level tap and exist in
every mode, so architecture (and parameter count) varies only with branching
and the attention block count.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import GlobalToLocalFusion
from .backbone import BackboneConfig, ChannelReducer, Encoder, FeatureMap, gap
from .decoder import MaskDecoder, PredictionMask, decode
from .selfsup import PatchCountMismatchError, normalize


@dataclass
class ForwardOutput:
    anchor: PredictionMask
    locals: PredictionMask
    anchor_high_raw: torch.Tensor
    fused: FeatureMap
    attention_internals: list | None = None

    def all_probs(self) -> torch.Tensor:
        """Anchor + neighbour probabilities as (delta+1, H, W)."""
        return torch.cat((self.anchor.probs, self.locals.probs), dim=0)

    def all_logits(self) -> torch.Tensor:
        return torch.cat((self.anchor.logits, self.locals.logits), dim=0)


class VideoSegNet(nn.Module):
    def __init__(self, backbone: BackboneConfig, branching: bool = True,
                 n_blocks: int = 3, groups: int = 4, kernel_k: int = 3,
                 dilations_pair=(3, 4, 3, 4), dilations_refine=(1, 2, 1, 2),
                 embed_dim: int = 128, jigsaw_grid: int = 3,
                 decoder_hidden: int = 32, norm_affine: bool = True):
        super().__init__()
        self.encoder = Encoder(backbone)
        c = backbone.reduced_channels
        if c % 2 or c % groups:
            raise ValueError(
                f"reduced_channels {c} must be divisible by 2 and by {groups} groups")
        self.reduce_high = ChannelReducer(self.encoder.high_channels, c)
        self.fusion = GlobalToLocalFusion(
            c, branching=branching, n_blocks=n_blocks, groups=groups,
            kernel_k=kernel_k, dilations_pair=dilations_pair,
            dilations_refine=dilations_refine, norm_affine=norm_affine)
        self.decoder = MaskDecoder(c, self.encoder.low_channels, decoder_hidden)
        self.jigsaw_grid = jigsaw_grid
        self.image_head = nn.Linear(self.encoder.high_channels, embed_dim)
        self.patch_head = nn.Linear(
            jigsaw_grid * jigsaw_grid * self.encoder.high_channels, embed_dim)

    def forward(self, anchor: torch.Tensor, neighbors: torch.Tensor,
                return_internals: bool = False) -> ForwardOutput:
        """anchor: (1, 3, H, W); neighbors: (delta, 3, H, W)."""
        out_size = (int(anchor.shape[2]), int(anchor.shape[3]))
        g_low, g_high = self.encoder.encode(anchor, stream="global")
        l_low, l_high = self.encoder.encode(neighbors, stream="local")
        g_red = self.reduce_high(g_high)
        l_red = self.reduce_high(l_high)
        internals = None
        if return_internals:
            fused, internals = self.fusion(g_red, l_red, return_internals=True)
        else:
            fused = self.fusion(g_red, l_red)
        local_pred = decode(self.decoder, fused, l_low, out_size)
        anchor_pred = decode(self.decoder, g_red, g_low, out_size)
        return ForwardOutput(
            anchor=anchor_pred,
            locals=local_pred,
            anchor_high_raw=g_high.data,
            fused=fused,
            attention_internals=internals,
        )

    def embed_image(self, high_feat: torch.Tensor) -> torch.Tensor:
        """Project one frame's pooled high-level feature to a unit embedding."""
        pooled = gap(high_feat).squeeze(0) if high_feat.ndim == 4 else high_feat
        return normalize(self.image_head(pooled))

    def embed_patches(self, patches: torch.Tensor) -> torch.Tensor:
        """Project jigsaw patches (G^2, 3, ph, pw), in their shuffled order,
        to one unit embedding via the patch head."""
        expected = self.jigsaw_grid * self.jigsaw_grid
        if patches.shape[0] != expected:
            raise PatchCountMismatchError(
                f"expected {expected} patches, got {patches.shape[0]}")
        _, high = self.encoder.encode(patches, stream="global")
        pooled = gap(high.data).reshape(-1)
        return normalize(self.patch_head(pooled))


def predict_case(model: VideoSegNet, frames: torch.Tensor, delta: int) -> torch.Tensor:
    """Sliding-window inference over one case.

    Windows advance by ``delta + 1`` frames (the last window is clamped to the
    end); each frame keeps the prediction from the first window covering it.
    Returns (N, H, W) probabilities.
    """
    n = frames.shape[0]
    if n < delta + 1:
        raise ValueError(f"case of {n} frames is shorter than delta+1={delta + 1}")
    device = next(model.parameters()).device
    probs = torch.zeros(n, frames.shape[2], frames.shape[3], dtype=frames.dtype)
    done = torch.zeros(n, dtype=torch.bool)
    model.eval()
    with torch.no_grad():
        start = 0
        while True:
            start = min(start, n - delta - 1)
            window = frames[start:start + delta + 1].to(device)
            out = model(window[:1], window[1:])
            window_probs = out.all_probs().cpu()
            for offset in range(delta + 1):
                idx = start + offset
                if not done[idx]:
                    probs[idx] = window_probs[offset]
                    done[idx] = True
            if start == n - delta - 1:
                break
            start += delta + 1
    return probs


def upsample_probs(probs: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of (N, H, W) probabilities to a target size."""
    if tuple(probs.shape[1:]) == tuple(size):
        return probs
    resized = F.interpolate(probs.unsqueeze(1), size=size, mode="bilinear",
                            align_corners=False)
    return resized.squeeze(1).clamp(0.0, 1.0)
