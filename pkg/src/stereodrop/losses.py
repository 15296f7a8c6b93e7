"""Perceptual loss, attention consistency loss and the full objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import diffcore as dc

DEFAULT_LAMBDAS = (1.0, 0.5, 0.4, 1.0)
DEFAULT_ALPHA = 5e-4
EXTRACTOR_CHANNELS = (8, 16, 24, 32)


@dataclass
class LossConfig:
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    alpha: float = DEFAULT_ALPHA
    extractor_seed: int = 0

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if len(self.lambdas) != 4 or any(v < 0 for v in self.lambdas):
            raise ValueError(f"need four non-negative layer weights, got {self.lambdas}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")


class FeatureExtractor(nn.Module):
    """Frozen random conv pyramid with taps at strides 1, 2, 4, 8.

    Weights are drawn from ``numpy.random.default_rng(seed)`` (He-normal, zero
    bias) so they are byte-identical across runs and platforms.
    """

    def __init__(self, seed: int = 0, channels: tuple[int, ...] = EXTRACTOR_CHANNELS, in_ch: int = 3):
        super().__init__()
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.plan: list[tuple[str, int, bool]] = []      # (name, stride, is_tap)
        prev = in_ch
        for stage, ch in enumerate(channels):
            for j, (cin, stride) in enumerate([(prev, 1 if stage == 0 else 2), (ch, 1)]):
                name = f"s{stage}c{j}"
                std = np.sqrt(2.0 / (cin * 9))
                w = rng.normal(0.0, std, size=(ch, cin, 3, 3)).astype(np.float32)
                self.register_buffer(f"{name}_w", torch.from_numpy(w))
                self.register_buffer(f"{name}_b", torch.zeros(ch))
                self.plan.append((name, stride, j == 1))
            prev = ch

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        x = image - 0.5
        for name, stride, is_tap in self.plan:
            w = getattr(self, f"{name}_w").to(x.dtype)
            b = getattr(self, f"{name}_b").to(x.dtype)
            x = dc.relu(dc.conv2d(x, w, b, stride=stride, padding=1))
            if is_tap:
                taps.append(x)
        return taps


def feature_extract(image: torch.Tensor, extractor: FeatureExtractor) -> list[torch.Tensor]:
    return extractor(image)


def perceptual_loss(out_l, out_r, clean_l, clean_r, extractor: FeatureExtractor,
                    lambdas=DEFAULT_LAMBDAS) -> torch.Tensor:
    total = out_l.new_zeros(())
    for out, clean in ((out_l, clean_l), (out_r, clean_r)):
        if out.shape != clean.shape:
            raise ValueError(f"output {tuple(out.shape)} and target {tuple(clean.shape)} differ")
        fo = extractor(out)
        with torch.no_grad():
            fc = extractor(clean)
        for lam, a, b in zip(lambdas, fo, fc):
            total = dc.add(total, dc.scalar_mul(dc.l1_mean(a, b), lam))
    return total


def downsample_gt(disp: torch.Tensor, mask: torch.Tensor, factor: int = 4) -> tuple[torch.Tensor, torch.Tensor]:
    """Full-resolution pixel disparity -> level-1 cells.

    The disparity becomes the block mean over valid pixels divided by
    ``factor``; the mask is the logical AND over each block.
    """
    m = mask.to(disp.dtype)
    valid_sum = F.avg_pool2d(disp * m, factor) * factor * factor
    count = F.avg_pool2d(m, factor) * factor * factor
    d = torch.where(count > 0, valid_sum / count.clamp(min=1), torch.zeros_like(valid_sum)) / factor
    block_and = count == factor * factor
    return d, block_and


def attention_consistency_loss(d_l, d_r, gt_l, gt_r, m_l, m_r) -> torch.Tensor:
    """Masked mean-l1 between predicted and reference disparity, summed over views.

    Empty masks contribute 0 (``EmptyMaskWarning`` is emitted).
    """
    total = d_l.new_zeros(())
    for d, gt, m in ((d_l, gt_l, m_l), (d_r, gt_r, m_r)):
        if d.shape != gt.shape or d.shape != m.shape:
            raise ValueError(f"disparity {tuple(d.shape)}, reference {tuple(gt.shape)} and mask "
                             f"{tuple(m.shape)} must agree")
        total = dc.add(total, dc.l1_mean(d, gt, m))
    return total


def total_loss(loss_p: torch.Tensor, loss_c: torch.Tensor, alpha: float = DEFAULT_ALPHA) -> torch.Tensor:
    if not (torch.isfinite(loss_p).all() and torch.isfinite(loss_c).all()):
        raise dc.NonFiniteError("total_loss")
    return dc.add(loss_p, dc.scalar_mul(loss_c, alpha))
