import numpy as np
import pytest
import torch

from stereodrop import checks
from stereodrop.disparity import (DisparityMerger, inject_disparity, merge_disp, soft_argmax_disp,
                                  upsample_disparity)
from stereodrop.layers import Conv
from stereodrop.rda import RowWindow, enumerate_windows

from oracles import soft_argmax_naive


def _one_band(scores, width):
    return scores.view(1, 1, *scores.shape), [RowWindow(0, scores.shape[0] // width)]


def test_one_hot_attention_gives_column_distance():
    width = 8
    s = torch.zeros(width, width, dtype=torch.float64)
    s[2, 5] = 1.0
    s[torch.arange(width) != 2, 0] = 1.0
    scores, wins = _one_band(s, width)
    d = soft_argmax_disp(scores, wins, width)
    assert d[0, 0, 0, 2].item() == 3.0


def test_uniform_single_row_centre_is_zero():
    s = torch.full((9, 9), 1 / 9, dtype=torch.float64)
    scores, wins = _one_band(s, 9)
    assert soft_argmax_disp(scores, wins, 9)[0, 0, 0, 4].item() == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_random_scores_match_loop_oracle(seed):
    gen = torch.Generator().manual_seed(seed)
    width = 7
    s = torch.softmax(torch.randn(3 * width, 3 * width, generator=gen, dtype=torch.float64), -1)
    scores, wins = _one_band(s, width)
    d = soft_argmax_disp(scores, wins, width).flatten().numpy()
    np.testing.assert_allclose(d, soft_argmax_naive(s.numpy(), width), rtol=0, atol=1e-10)


def test_overlapping_bands_are_averaged():
    gen = torch.Generator().manual_seed(3)
    height, width = 6, 5
    wins = enumerate_windows(height)
    scores = torch.softmax(torch.randn(1, len(wins), 15, 15, generator=gen, dtype=torch.float64), -1)
    d = soft_argmax_disp(scores, wins, width, height)[0, 0].numpy()
    acc, cnt = np.zeros((height, width)), np.zeros((height, 1))
    for wi, w in enumerate(wins):
        acc[w.start_row:w.start_row + 3] += soft_argmax_naive(scores[0, wi].numpy(), width).reshape(3, width)
        cnt[w.start_row:w.start_row + 3] += 1
    np.testing.assert_allclose(d, acc / cnt, rtol=0, atol=1e-12)


def test_nonnegative_and_bounded():
    gen = torch.Generator().manual_seed(4)
    width = 6
    wins = enumerate_windows(7)
    scores = torch.softmax(5 * torch.randn(2, len(wins), 18, 18, generator=gen), -1)
    d = soft_argmax_disp(scores, wins, width, 7)
    assert (d >= 0).all() and (d <= width - 1 + 1e-5).all()


def test_inconsistent_scores_rejected():
    with pytest.raises(ValueError):
        soft_argmax_disp(torch.zeros(1, 1, 10, 10), [RowWindow(0, 3)], 4)


def test_level_three_passes_through():
    merger = DisparityMerger()
    d3 = torch.rand(1, 1, 3, 6)
    assert merger(None, d3, 3) is d3


def test_upsampled_constant_is_doubled():
    up = upsample_disparity(torch.full((1, 1, 3, 4), 3.0, dtype=torch.float64))
    assert up.shape == (1, 1, 6, 8)
    torch.testing.assert_close(up, torch.full_like(up, 6.0), rtol=0, atol=1e-15)


def test_zero_fusion_kernel_gives_zero():
    fuse = Conv(2, 1, 3).double().zero_()
    out = merge_disp(torch.rand(1, 1, 3, 4, dtype=torch.float64), torch.rand(1, 1, 6, 8, dtype=torch.float64), fuse)
    assert not out.any()


def test_merge_rejects_mismatch():
    with pytest.raises(ValueError):
        merge_disp(torch.rand(1, 1, 3, 4), torch.rand(1, 1, 6, 9), Conv(2, 1, 3))


def test_injection_variants():
    f = torch.rand(1, 5, 6, 8, dtype=torch.float64)
    assert inject_disparity(f, torch.rand(1, 1, 3, 4, dtype=torch.float64), enabled=False) is f
    zero = inject_disparity(f, torch.zeros(1, 1, 3, 4, dtype=torch.float64))
    assert zero.shape == (1, 6, 6, 8) and not zero[:, 5].any()
    assert torch.equal(zero[:, :5], f)
    c = inject_disparity(f, torch.full((1, 1, 3, 4), 1.25, dtype=torch.float64))
    torch.testing.assert_close(c[:, 5], torch.full((1, 6, 8), 2.5, dtype=torch.float64), rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_soft_argmax_and_merge_gradcheck(seed):
    res = checks.check_target("soft_argmax_merge", seed)
    assert res.passed, res
