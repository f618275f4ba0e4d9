"""Shared frame encoder with low/high feature taps, channel reduction, and
the channel-split branching that feeds the attention blocks.

One encoder instance serves both the anchor ("global", T=1) and neighbour
("local", T=delta) streams, so their parameters are shared by construction.
Feature tensors are channel-first: (T, C, h, w).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import torch
import torch.nn as nn


class ShapeMismatchError(Exception):
    """Input spatial size is incompatible with the encoder strides."""


class OddChannelsError(Exception):
    """Branching requires an even channel count."""


@dataclass
class FeatureMap:
    """A tagged rank-4 feature volume.

    ``data`` is (T, C, h, w); ``stride`` is the input-to-feature downscale
    factor.  Tags record provenance: level (low/high), stream (global/local),
    and optionally the branch half (b1/b2).
    """

    data: torch.Tensor
    level: str
    stream: str
    stride: int
    branch: str | None = None

    @property
    def frames(self) -> int:
        return int(self.data.shape[0])

    @property
    def channels(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[2])

    @property
    def width(self) -> int:
        return int(self.data.shape[3])

    def with_data(self, data: torch.Tensor, **tag_updates) -> "FeatureMap":
        return replace(self, data=data, **tag_updates)


@dataclass
class BackboneConfig:
    """Encoder selection and channel budget.

    ``reduced_channels`` must be divisible by 2 (branching) and by the
    attention group count.  ``low_tap``/``high_tap`` select stage outputs;
    stage numbering is per encoder kind (toy: 1..4, res2net50: 1..3).
    """

    kind: str = "toy"
    reduced_channels: int = 32
    low_tap: int | None = None
    high_tap: int | None = None
    weights: str | None = None
    toy_widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    toy_stem_stride: int = 2
    toy_stage_strides: tuple[int, int, int, int] = (2, 2, 1, 2)


def _norm(ch: int) -> nn.GroupNorm:
    groups = max(g for g in (4, 2, 1) if ch % g == 0)
    return nn.GroupNorm(groups, ch)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = _norm(out_ch)
        self.act = nn.SiLU()
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.act(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.act(out + self.skip(x))


class ToyBackbone(nn.Module):
    """Small residual encoder preserving the stride-8 / stride-16 tap geometry.

    Stem stride 2 then stage strides (2, 2, 1, 2) give cumulative stage
    strides (4, 8, 8, 16); default taps sit at stages 3 and 4.
    """

    def __init__(self, widths=(16, 32, 64, 128), stem_stride: int = 2,
                 stage_strides=(2, 2, 1, 2)):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, stride=stem_stride, padding=1, bias=False),
            _norm(widths[0]),
            nn.SiLU(),
        )
        in_ch = widths[0]
        stages = []
        strides = [stem_stride]
        for width, stride in zip(widths, stage_strides):
            stages.append(ResidualBlock(in_ch, width, stride))
            strides.append(strides[-1] * stride)
            in_ch = width
        self.stages = nn.ModuleList(stages)
        self.stage_strides = strides[1:]
        self.stage_channels = list(widths)
        self.default_taps = (3, 4)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = self.stem(x)
        taps = []
        for stage in self.stages:
            out = stage(out)
            taps.append(out)
        return taps


class Bottle2neck(nn.Module):
    """Multi-scale residual bottleneck (hierarchical 3x3 splits)."""

    expansion = 4

    def __init__(self, inplanes, planes, stride=1, downsample=None,
                 base_width=26, scale=4, stype="normal"):
        super().__init__()
        width = int(math.floor(planes * (base_width / 64.0)))
        self.conv1 = nn.Conv2d(inplanes, width * scale, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width * scale)
        self.nums = 1 if scale == 1 else scale - 1
        if stype == "stage":
            self.pool = nn.AvgPool2d(3, stride=stride, padding=1)
        self.convs = nn.ModuleList(
            nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
            for _ in range(self.nums)
        )
        self.bns = nn.ModuleList(nn.BatchNorm2d(width) for _ in range(self.nums))
        self.conv3 = nn.Conv2d(width * scale, planes * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample
        self.stype = stype
        self.scale = scale
        self.width = width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        residual = x
        out = self.relu(self.bn1(self.conv1(x)))
        spx = torch.split(out, self.width, 1)
        for i in range(self.nums):
            sp = spx[i] if i == 0 or self.stype == "stage" else sp + spx[i]
            sp = self.relu(self.bns[i](self.convs[i](sp)))
            out = sp if i == 0 else torch.cat((out, sp), 1)
        if self.scale != 1 and self.stype == "normal":
            out = torch.cat((out, spx[self.nums]), 1)
        elif self.scale != 1 and self.stype == "stage":
            out = torch.cat((out, self.pool(spx[self.nums])), 1)
        out = self.bn3(self.conv3(out))
        if self.downsample is not None:
            residual = self.downsample(x)
        return self.relu(out + residual)


class Res2NetBackbone(nn.Module):
    """50-layer multi-scale residual encoder (26w x 4s).

    Stage outputs: stage 1 at stride 4, stage 2 at stride 8 (low tap),
    stage 3 at stride 16 (high tap).  The final stage is constructed so
    ImageNet checkpoints load, but forward stops after stage 3.
    """

    def __init__(self, base_width: int = 26, scale: int = 4):
        super().__init__()
        self.inplanes = 64
        self.base_width = base_width
        self.scale = scale
        self.conv1 = nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layer1 = self._make_layer(64, 3)
        self.layer2 = self._make_layer(128, 4, stride=2)
        self.layer3 = self._make_layer(256, 6, stride=2)
        self.layer4 = self._make_layer(512, 3, stride=2)
        self.stage_strides = [4, 8, 16]
        self.stage_channels = [256, 512, 1024]
        self.default_taps = (2, 3)

    def _make_layer(self, planes: int, blocks: int, stride: int = 1) -> nn.Sequential:
        downsample = None
        if stride != 1 or self.inplanes != planes * Bottle2neck.expansion:
            downsample = nn.Sequential(
                nn.Conv2d(self.inplanes, planes * Bottle2neck.expansion, 1,
                          stride=stride, bias=False),
                nn.BatchNorm2d(planes * Bottle2neck.expansion),
            )
        layers = [Bottle2neck(self.inplanes, planes, stride, downsample,
                              self.base_width, self.scale, stype="stage")]
        self.inplanes = planes * Bottle2neck.expansion
        layers.extend(
            Bottle2neck(self.inplanes, planes, base_width=self.base_width,
                        scale=self.scale)
            for _ in range(1, blocks)
        )
        return nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        t1 = self.layer1(out)
        t2 = self.layer2(t1)
        t3 = self.layer3(t2)
        return [t1, t2, t3]

    def load_weights(self, path: Path | str) -> None:
        state = torch.load(str(path), map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        missing, unexpected = self.load_state_dict(state, strict=False)
        if missing or unexpected:
            warnings.warn(
                f"backbone checkpoint partially loaded: {len(missing)} missing, "
                f"{len(unexpected)} unexpected keys")


class Encoder(nn.Module):
    """Tap-producing wrapper shared by the global and local streams."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        if cfg.kind == "toy":
            self.net = ToyBackbone(cfg.toy_widths, cfg.toy_stem_stride,
                                   cfg.toy_stage_strides)
        elif cfg.kind == "res2net50":
            self.net = Res2NetBackbone()
            if cfg.weights:
                self.net.load_weights(cfg.weights)
            else:
                warnings.warn("res2net50 backbone initialized randomly: "
                              "no weight file supplied")
        else:
            raise ValueError(f"unknown backbone kind {cfg.kind!r}")
        low_tap = cfg.low_tap if cfg.low_tap is not None else self.net.default_taps[0]
        high_tap = cfg.high_tap if cfg.high_tap is not None else self.net.default_taps[1]
        self.low_tap = low_tap
        self.high_tap = high_tap
        self.low_stride = self.net.stage_strides[low_tap - 1]
        self.high_stride = self.net.stage_strides[high_tap - 1]
        if self.high_stride != 2 * self.low_stride:
            raise ValueError(
                f"taps {low_tap}/{high_tap} give strides {self.low_stride}/"
                f"{self.high_stride}; the high stride must be twice the low one")
        self.low_channels = self.net.stage_channels[low_tap - 1]
        self.high_channels = self.net.stage_channels[high_tap - 1]

    def encode(self, frames: torch.Tensor, stream: str) -> tuple[FeatureMap, FeatureMap]:
        """Run T frames (T, 3, H, W) to the low and high taps."""
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ShapeMismatchError(f"expected (T, 3, H, W) frames, got {tuple(frames.shape)}")
        h, w = frames.shape[2], frames.shape[3]
        if h % self.high_stride or w % self.high_stride:
            raise ShapeMismatchError(
                f"input {h}x{w} not divisible by the high-tap stride {self.high_stride}")
        taps = self.net(frames)
        low = FeatureMap(taps[self.low_tap - 1], level="low", stream=stream,
                         stride=self.low_stride)
        high = FeatureMap(taps[self.high_tap - 1], level="high", stream=stream,
                          stride=self.high_stride)
        return low, high

    def forward(self, frames: torch.Tensor, stream: str = "local"):
        return self.encode(frames, stream)


class ChannelReducer(nn.Module):
    """Learned pointwise projection onto the attention channel budget."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, 1)

    def identity_init(self) -> None:
        if self.proj.in_channels != self.proj.out_channels:
            raise ValueError("identity init needs matching channel counts")
        with torch.no_grad():
            self.proj.weight.zero_()
            for c in range(self.proj.out_channels):
                self.proj.weight[c, c, 0, 0] = 1.0
            self.proj.bias.zero_()

    def forward(self, f: FeatureMap) -> FeatureMap:
        return f.with_data(self.proj(f.data))


def branch(f: FeatureMap) -> tuple[FeatureMap, FeatureMap]:
    """Split a map into two contiguous channel halves (parameter-free).

    ``torch.cat((b1.data, b2.data), dim=1)`` reproduces the input exactly.
    """
    c = f.channels
    if c % 2:
        raise OddChannelsError(f"cannot branch {c} channels")
    half = c // 2
    b1 = f.with_data(f.data[:, :half], branch="b1")
    b2 = f.with_data(f.data[:, half:], branch="b2")
    return b1, b2


def gap(feature: torch.Tensor) -> torch.Tensor:
    """Global average pool (T, C, h, w) -> (T, C)."""
    return feature.mean(dim=(2, 3))
