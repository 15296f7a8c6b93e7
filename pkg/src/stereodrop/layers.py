"""Parameter containers shared by the network modules."""
from __future__ import annotations

import math

import torch
from torch import nn

from . import diffcore as dc


class Conv(nn.Module):
    """Biased convolution evaluated through :func:`diffcore.conv2d`, same padding by default."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.stride = stride
        self.dilation = dilation
        self.padding = dc.same_padding(kernel, dilation)
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.empty(out_ch))
        bound = 1.0 / math.sqrt(in_ch * kernel * kernel)
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        nn.init.uniform_(self.bias, -bound, bound)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: torch.Tensor, dilation: int | None = None) -> torch.Tensor:
        d = self.dilation if dilation is None else dilation
        pad = self.padding if dilation is None else dc.same_padding(self.weight.shape[2], d)
        return dc.conv2d(x, self.weight, self.bias, stride=self.stride, dilation=d, padding=pad)

    def zero_(self) -> "Conv":
        with torch.no_grad():
            self.weight.zero_()
            self.bias.zero_()
        return self


class ResBlock(nn.Module):
    """x + conv(relu(conv(x)))."""

    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = Conv(ch, ch, 3)
        self.conv2 = Conv(ch, ch, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return dc.add(x, self.conv2(dc.relu(self.conv1(x))))
