"""Disparity from attention scores: soft-argmax, coarse-to-fine merge, feature injection.

Disparities are expressed in feature cells of the level they live on.
"""
from __future__ import annotations

import torch
from torch import nn

from . import diffcore as dc
from .layers import Conv
from .rda import AttentionResult, RowWindow, window_coverage


def soft_argmax_disp(scores: torch.Tensor, windows: list[RowWindow], width: int,
                     height: int | None = None) -> torch.Tensor:
    """|query column - expected key column| per query cell, as an (N, 1, H, W) map.

    ``scores`` is (N, n_windows, L, L) with L = rows * width.  The expectation
    runs over every key in the band, each weighted by its own column index.
    """
    n, nw, length, _ = scores.shape
    rows = windows[0].rows
    if rows * width != length or len(windows) != nw:
        raise ValueError(f"scores {tuple(scores.shape)} inconsistent with {nw} windows of {rows}x{width}")
    if height is None:
        height = windows[-1].start_row + rows
    cols = (torch.arange(length) % width).to(scores.dtype)
    expected = dc.matmul(scores, cols.view(length, 1)).squeeze(-1)          # (N, nW, L)
    disp = dc.abs(dc.sub(cols.view(1, 1, length), expected))
    idx = torch.tensor([list(w.row_indices) for w in windows], dtype=torch.long).reshape(-1)
    disp = disp.reshape(n, 1, nw * rows, width)
    summed = torch.zeros(n, 1, height, width, dtype=scores.dtype).index_add(2, idx, disp)
    cov = window_coverage(windows, height).to(scores.dtype).view(1, 1, height, 1)
    return summed / cov


def disparity_from_attention(result: AttentionResult) -> torch.Tensor:
    return soft_argmax_disp(result.scores, result.windows, result.width, result.refined.shape[2])


def upsample_disparity(d: torch.Tensor) -> torch.Tensor:
    """Bilinear x2 with values doubled into the finer level's cell units."""
    return dc.scalar_mul(dc.bilinear_upsample2x(d), 2.0)


def merge_disp(d_next: torch.Tensor, disp: torch.Tensor, fuse: Conv) -> torch.Tensor:
    up = upsample_disparity(d_next)
    if up.shape != disp.shape:
        raise ValueError(f"upsampled coarse disparity {tuple(up.shape)} does not match {tuple(disp.shape)}")
    return fuse(dc.concat([up, disp], axis=1))


def inject_disparity(features: torch.Tensor, d_next: torch.Tensor | None, enabled: bool = True) -> torch.Tensor:
    if not enabled or d_next is None:
        return features
    up = upsample_disparity(d_next)
    if up.shape[2:] != features.shape[2:]:
        raise ValueError(f"disparity {tuple(up.shape)} does not match features {tuple(features.shape)}")
    return dc.concat([features, up], axis=1)


class DisparityMerger(nn.Module):
    """3x3 fusion kernels for levels 1 and 2; level 3 passes its soft-argmax through."""

    def __init__(self):
        super().__init__()
        self.fuse = nn.ModuleDict({str(i): Conv(2, 1, 3) for i in (1, 2)})

    def forward(self, d_next: torch.Tensor | None, disp: torch.Tensor, level: int) -> torch.Tensor:
        if level == 3:
            return disp
        return merge_disp(d_next, disp, self.fuse[str(level)])
