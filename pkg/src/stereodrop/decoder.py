"""Coarse-to-fine aggregation of refined features and RGB projection."""
from __future__ import annotations

import torch
from torch import nn

from . import diffcore as dc
from .layers import Conv, ResBlock


class ResidualBody(nn.Module):
    """Two residual blocks followed by a tail 3x3 conv (zeroing the tail silences the body)."""

    def __init__(self, ch: int, blocks: int = 2):
        super().__init__()
        self.blocks = nn.ModuleList(ResBlock(ch) for _ in range(blocks))
        self.tail = Conv(ch, ch, 3)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.tail(x)


class AggregateStep(nn.Module):
    def __init__(self, p_ch: int, a_ch: int):
        super().__init__()
        self.fuse = Conv(p_ch + a_ch, p_ch, 3)
        self.res = ResidualBody(p_ch)

    def forward(self, p_next: torch.Tensor, a_next: torch.Tensor) -> torch.Tensor:
        return aggregate_step(p_next, a_next, self)


def aggregate_step(p_next: torch.Tensor, a_next: torch.Tensor, step: AggregateStep) -> torch.Tensor:
    if p_next.shape[2:] != a_next.shape[2:]:
        raise ValueError(f"P {tuple(p_next.shape)} and A {tuple(a_next.shape)} are not spatially congruent")
    fused = step.fuse(dc.concat([p_next, a_next], axis=1))
    return dc.bilinear_upsample2x(dc.add(p_next, step.res(fused)))


class Decoder(nn.Module):
    """P3 = F3; three aggregation steps (A3, A2, A1) reach stride 2, then the head upsamples
    once more and projects to RGB.  Output is unbounded; clamp at inference only."""

    def __init__(self, top_channels: int, refined_channels: tuple[int, int, int]):
        super().__init__()
        self.steps = nn.ModuleDict({str(i): AggregateStep(top_channels, refined_channels[i - 1])
                                    for i in (3, 2, 1)})
        self.head = Conv(top_channels, 3, 3)

    def forward(self, top: torch.Tensor, refined: dict[int, torch.Tensor]) -> torch.Tensor:
        p = top
        for i in (3, 2, 1):
            p = self.steps[str(i)](p, refined[i])
        return self.head(dc.bilinear_upsample2x(p))

    def decode(self, pyramid, refined: dict[int, torch.Tensor]) -> torch.Tensor:
        return self.forward(pyramid[3], refined)
