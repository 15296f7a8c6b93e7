"""Row-wise dilated attention (RDA) and the typical 1x1 attention baseline.

Both blocks attend from a query view to a reference view inside bands of
``rows`` feature rows that start every ``stride`` rows.  A query row covered by
several bands receives the mean of its per-band attended values before the
output projection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import diffcore as dc
from .layers import Conv

DILATIONS = (1, 2, 4)


@dataclass(frozen=True)
class RowWindow:
    start_row: int
    rows: int

    @property
    def row_indices(self) -> range:
        return range(self.start_row, self.start_row + self.rows)


def enumerate_windows(height: int, rows: int = 3, stride: int = 2) -> list[RowWindow]:
    if height < 1 or rows < 1 or stride < 1:
        raise ValueError(f"invalid window setup: height={height}, rows={rows}, stride={stride}")
    if height <= rows:
        return [RowWindow(0, height)]
    starts = list(range(0, height - rows + 1, stride))
    if starts[-1] + rows < height:
        starts.append(height - rows)
    return [RowWindow(s, rows) for s in starts]


def window_coverage(windows: list[RowWindow], height: int) -> torch.Tensor:
    cov = torch.zeros(height, dtype=torch.int64)
    for w in windows:
        cov[w.start_row:w.start_row + w.rows] += 1
    return cov


@dataclass
class AttentionResult:
    refined: torch.Tensor
    scores: torch.Tensor          # (N, n_windows, L, L), L = rows * width; rows sum to 1
    windows: list[RowWindow]
    coverage: torch.Tensor        # per query row, number of windows containing it
    width: int


def _flatten_window(x: torch.Tensor, w: RowWindow) -> torch.Tensor:
    n, c, _, width = x.shape
    band = x[:, :, w.start_row:w.start_row + w.rows, :]
    return band.reshape(n, c, w.rows * width).transpose(1, 2)


def attend_window(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                  w: RowWindow) -> tuple[torch.Tensor, torch.Tensor]:
    """Attention restricted to one row band.

    Returns the attended values as an (N, Cv, rows, W) band and the
    (N, L, L) score matrix whose rows index query cells, columns key cells.
    """
    if q.shape[2:] != k.shape[2:] or q.shape[2:] != v.shape[2:]:
        raise ValueError(f"Q/K/V not spatially congruent: {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    n, cv, _, width = v.shape
    qf, kf, vf = (_flatten_window(t, w) for t in (q, k, v))
    logits = dc.scalar_mul(dc.matmul(qf, kf.transpose(1, 2)), 1.0 / math.sqrt(q.shape[1]))
    scores = dc.softmax(logits, axis=-1)
    out = dc.matmul(scores, vf)
    return out.transpose(1, 2).reshape(n, cv, w.rows, width), scores


def windowed_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, rows: int = 3,
                       stride: int = 2) -> tuple[torch.Tensor, torch.Tensor, list[RowWindow], torch.Tensor]:
    """All bands at once; overlapping bands are averaged per query row."""
    if q.shape[2:] != k.shape[2:] or q.shape[2:] != v.shape[2:]:
        raise ValueError(f"Q/K/V not spatially congruent: {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    n, c, height, width = q.shape
    cv = v.shape[1]
    windows = enumerate_windows(height, rows, stride)
    r = windows[0].rows
    idx = torch.tensor([list(w.row_indices) for w in windows], dtype=torch.long)
    nw = len(windows)

    def bands(x):
        ch = x.shape[1]
        # (N, C, nW, r, W) -> (N, nW, r*W, C)
        return x[:, :, idx, :].permute(0, 2, 3, 4, 1).reshape(n, nw, r * width, ch)

    qb, kb, vb = bands(q), bands(k), bands(v)
    logits = dc.scalar_mul(dc.matmul(qb, kb.transpose(2, 3)), 1.0 / math.sqrt(c))
    scores = dc.softmax(logits, axis=-1)
    out = dc.matmul(scores, vb)                                  # (N, nW, L, Cv)
    out = out.reshape(n, nw, r, width, cv).permute(0, 4, 1, 2, 3).reshape(n, cv, nw * r, width)
    summed = torch.zeros(n, cv, height, width, dtype=out.dtype).index_add(2, idx.reshape(-1), out)
    coverage = window_coverage(windows, height)
    averaged = summed / coverage.to(out.dtype).view(1, 1, height, 1)
    return averaged, scores, windows, coverage


class _AttentionBase(nn.Module):
    rows: int
    stride: int

    def make_query(self, f: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def make_key(self, f: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def make_value(self, f: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, f_query: torch.Tensor, f_ref: torch.Tensor) -> AttentionResult:
        if f_query.shape != f_ref.shape:
            raise ValueError(f"query/reference features differ: {tuple(f_query.shape)} vs {tuple(f_ref.shape)}")
        q = self.make_query(f_query)
        k = self.make_key(f_ref)
        v = self.make_value(f_ref)
        attended, scores, windows, coverage = windowed_attention(q, k, v, self.rows, self.stride)
        refined = dc.add(f_query, self.k6(attended))
        return AttentionResult(refined, scores, windows, coverage, f_query.shape[3])


class RowDilatedAttention(_AttentionBase):
    """Query and key from a 1x1 path plus a distilled stack of dilated 3x3 responses.

    One 3x3 kernel per projection is shared by the three dilation branches.
    With ``dilated_value`` the value gets the same two-path structure (the FD
    ablation); by default it is a plain 1x1 projection.
    """

    kind = "rda"

    def __init__(self, channels: int, attn_dim: int | None = None, rows: int = 3, stride: int = 2,
                 dilated_value: bool = False):
        super().__init__()
        d = channels if attn_dim is None else attn_dim
        self.rows, self.stride = rows, stride
        self.dilated_value = dilated_value
        nb = len(DILATIONS)
        self.k1 = Conv(channels, d, 1)
        self.k1p = Conv(channels, channels, 3)
        self.k2 = Conv(nb * channels, d, 1)
        self.k3 = Conv(channels, d, 1)
        self.k2p = Conv(channels, channels, 3)
        self.k4 = Conv(nb * channels, d, 1)
        self.k5 = Conv(channels, d, 1)
        if dilated_value:
            self.k5p = Conv(channels, channels, 3)
            self.k7 = Conv(nb * channels, d, 1)
        self.k6 = Conv(d, channels, 1)

    @staticmethod
    def _two_path(f, point: Conv, dilated: Conv, distill: Conv) -> torch.Tensor:
        stack = dc.concat([dilated(f, dilation=j) for j in DILATIONS], axis=1)
        return dc.add(point(f), distill(stack))

    def make_query(self, f):
        return self._two_path(f, self.k1, self.k1p, self.k2)

    def make_key(self, f):
        return self._two_path(f, self.k3, self.k2p, self.k4)

    def make_value(self, f):
        if self.dilated_value:
            return self._two_path(f, self.k5, self.k5p, self.k7)
        return self.k5(f)


class TypicalAttention(_AttentionBase):
    """Non-local attention with single 1x1 query, key and value projections."""

    kind = "typical"

    def __init__(self, channels: int, attn_dim: int | None = None, rows: int = 3, stride: int = 2):
        super().__init__()
        d = channels if attn_dim is None else attn_dim
        self.rows, self.stride = rows, stride
        self.k1 = Conv(channels, d, 1)
        self.k3 = Conv(channels, d, 1)
        self.k5 = Conv(channels, d, 1)
        self.k6 = Conv(d, channels, 1)

    def make_query(self, f):
        return self.k1(f)

    def make_key(self, f):
        return self.k3(f)

    def make_value(self, f):
        return self.k5(f)


def make_attention(kind: str, channels: int, rows: int = 3, stride: int = 2,
                   dilated_value: bool = False) -> _AttentionBase:
    if kind == "rda":
        return RowDilatedAttention(channels, rows=rows, stride=stride, dilated_value=dilated_value)
    if kind == "typical":
        return TypicalAttention(channels, rows=rows, stride=stride)
    raise ValueError(f"unknown attention kind {kind!r}")


def rda_forward(f_query, f_ref, block: RowDilatedAttention) -> AttentionResult:
    return block(f_query, f_ref)


def typical_attention_forward(f_query, f_ref, block: TypicalAttention) -> AttentionResult:
    return block(f_query, f_ref)
