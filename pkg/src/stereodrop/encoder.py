"""Three-level feature pyramid at strides 4, 8 and 16."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import diffcore as dc
from .layers import Conv, ResBlock

STRIDES = {1: 4, 2: 8, 3: 16}
DEFAULT_CHANNELS = (16, 32, 64)


class ShapeError(ValueError):
    pass


@dataclass
class FeaturePyramid:
    levels: dict[int, torch.Tensor]

    def __getitem__(self, level: int) -> torch.Tensor:
        return self.levels[level]

    def stride(self, level: int) -> int:
        return STRIDES[level]

    def channels(self, level: int) -> int:
        return self.levels[level].shape[1]


def check_image_dims(height: int, width: int) -> None:
    if height % 16 or width % 16:
        pad_h, pad_w = -height % 16, -width % 16
        raise ShapeError(
            f"image dims {height}x{width} must be multiples of 16; pad by {pad_h} rows and {pad_w} columns")


class Encoder(nn.Module):
    """Stride-2 stem, then per level a stride-2 conv and one residual block."""

    def __init__(self, channels: tuple[int, int, int] = DEFAULT_CHANNELS, in_ch: int = 3):
        super().__init__()
        self.channels = tuple(channels)
        self.stem = Conv(in_ch, channels[0], 3, stride=2)
        self.down = nn.ModuleList()
        self.res = nn.ModuleList()
        prev = channels[0]
        for ch in channels:
            self.down.append(Conv(prev, ch, 3, stride=2))
            self.res.append(ResBlock(ch))
            prev = ch

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        check_image_dims(image.shape[2], image.shape[3])
        x = dc.relu(self.stem(image))
        levels = {}
        for i, (down, res) in enumerate(zip(self.down, self.res), start=1):
            x = res(dc.relu(down(x)))
            levels[i] = x
        return FeaturePyramid(levels)

    encode = forward


# (kernel, stride, padding) of every spatial layer up to each level's output
def _layer_list(level: int) -> list[tuple[int, int, int]]:
    layers = [(3, 2, 1)]
    for _ in range(level):
        layers += [(3, 2, 1), (3, 1, 1), (3, 1, 1)]
    return layers


def receptive_interval(level: int, lo: int, hi: int | None = None) -> tuple[int, int]:
    """Output cells (along one axis) at ``level`` that input positions lo..hi can influence."""
    hi = lo if hi is None else hi
    for k, s, p in _layer_list(level):
        # output q reads inputs q*s - p .. q*s - p + k - 1
        lo = -((-(lo + p - k + 1)) // s)
        hi = (hi + p) // s
    return lo, hi
