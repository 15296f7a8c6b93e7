import numpy as np
import pytest
import torch

from stereodrop import diffcore as dc
from stereodrop import checks, rda
from stereodrop.disparity import disparity_from_attention

from oracles import conv2d_naive, window_attention_naive


def _block(kind="rda", ch=4, seed=0, **kw):
    torch.manual_seed(seed)
    return rda.make_attention(kind, ch, **kw).double()


def _zero(*convs):
    for c in convs:
        c.zero_()


def _set_identity(conv, scale=1.0):
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.zero_()
        n = min(conv.weight.shape[:2])
        conv.weight[range(n), range(n), conv.weight.shape[2] // 2, conv.weight.shape[3] // 2] = scale


# --- projections --------------------------------------------------------------------

def test_query_reduces_to_point_path_when_dilated_kernel_is_zero():
    b = _block()
    _zero(b.k1p)
    with torch.no_grad():
        b.k2.bias.zero_()
        b.k1.bias.zero_()
    f = torch.randn(2, 4, 6, 9, dtype=torch.float64)
    expected = dc.conv2d(f, b.k1.weight, padding=0)
    torch.testing.assert_close(b.make_query(f), expected, rtol=0, atol=1e-14)


def test_key_reduces_to_point_path_when_dilated_kernel_is_zero():
    b = _block()
    _zero(b.k2p)
    with torch.no_grad():
        b.k4.bias.zero_()
        b.k3.bias.zero_()
    f = torch.randn(2, 4, 6, 9, dtype=torch.float64)
    torch.testing.assert_close(b.make_key(f), dc.conv2d(f, b.k3.weight, padding=0), rtol=0, atol=1e-14)


@pytest.mark.parametrize("proj", ["query", "key"])
def test_projection_receptive_field_is_bounded_by_dilation_four(proj):
    b = _block(seed=1)
    fn = getattr(b, f"make_{proj}")
    base = fn(torch.zeros(1, 4, 15, 15, dtype=torch.float64))
    f = torch.zeros(1, 4, 15, 15, dtype=torch.float64)
    f[0, :, 7, 7] = 1.0
    diff = (fn(f) - base).abs().amax(1)[0]
    ys, xs = torch.nonzero(diff > 1e-12, as_tuple=True)
    cheb = torch.maximum((ys - 7).abs(), (xs - 7).abs())
    assert cheb.max().item() == 4
    far = torch.ones(15, 15, dtype=torch.bool)
    far[3:12, 3:12] = False
    assert diff[far].max().item() == 0.0


def _two_path_oracle(f, point, dilated, distill):
    fn = f.detach().numpy()
    stack = np.concatenate([conv2d_naive(fn, dilated.weight.detach().numpy(), dilated.bias.detach().numpy(),
                                         dilation=j, padding=j) for j in (1, 2, 4)], axis=1)
    out = conv2d_naive(stack, distill.weight.detach().numpy(), distill.bias.detach().numpy())
    return out + conv2d_naive(fn, point.weight.detach().numpy(), point.bias.detach().numpy())


def test_query_and_key_match_composition_oracle():
    b = _block(seed=2, ch=3)
    f = torch.randn(1, 3, 7, 9, dtype=torch.float64)
    np.testing.assert_allclose(b.make_query(f).detach().numpy(), _two_path_oracle(f, b.k1, b.k1p, b.k2),
                               rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.make_key(f).detach().numpy(), _two_path_oracle(f, b.k3, b.k2p, b.k4),
                               rtol=0, atol=1e-12)


def test_value_identity_and_locality():
    b = _block(seed=3)
    _set_identity(b.k5)
    f = torch.randn(1, 4, 5, 6, dtype=torch.float64)
    torch.testing.assert_close(b.make_value(f), f, rtol=0, atol=0)

    b = _block(seed=3)
    g = f.clone()
    g[0, :, 2, 3] += 1.0
    changed = (b.make_value(g) - b.make_value(f)).abs().amax(1)[0] > 0
    assert torch.nonzero(changed).tolist() == [[2, 3]]


def test_value_matches_pointwise_oracle():
    b = _block(seed=4)
    f = torch.randn(2, 4, 5, 6, dtype=torch.float64)
    ref = conv2d_naive(f.numpy(), b.k5.weight.detach().numpy(), b.k5.bias.detach().numpy())
    np.testing.assert_allclose(b.make_value(f).detach().numpy(), ref, rtol=0, atol=1e-12)


def test_value_has_no_dilated_branch_unless_requested():
    assert not hasattr(_block(), "k7")
    fd = _block(dilated_value=True)
    f = torch.zeros(1, 4, 11, 11, dtype=torch.float64)
    g = f.clone()
    g[0, :, 5, 5] = 1.0
    changed = (fd.make_value(g) - fd.make_value(f)).abs().amax(1)[0] > 1e-12
    assert changed.sum().item() > 1


# --- windows ------------------------------------------------------------------------

@pytest.mark.parametrize("h,starts", [(7, [0, 2, 4]), (6, [0, 2, 3]), (2, [0]), (3, [0]), (1, [0]), (4, [0, 1])])
def test_enumerate_windows(h, starts):
    ws = rda.enumerate_windows(h)
    assert [w.start_row for w in ws] == starts
    assert all(w.rows == min(3, h) for w in ws)
    assert (rda.window_coverage(ws, h) >= 1).all()


def test_enumerate_windows_covers_every_row_for_many_heights():
    for rows in (1, 3, 5):
        for h in range(1, 40):
            ws = rda.enumerate_windows(h, rows, 2 if rows > 1 else 1)
            cov = rda.window_coverage(ws, h)
            assert (cov >= 1).all()
            assert ws[-1].start_row + ws[-1].rows == h


def test_enumerate_windows_rejects_bad_height():
    with pytest.raises(ValueError):
        rda.enumerate_windows(0)


# --- attention ----------------------------------------------------------------------

def test_constant_logits_average_values():
    q = torch.zeros(1, 2, 3, 5, dtype=torch.float64)
    v = torch.randn(1, 3, 3, 5, dtype=torch.float64)
    out, scores = rda.attend_window(q, q, v, rda.RowWindow(0, 3))
    expected = v.mean(dim=(2, 3), keepdim=True).expand_as(out)
    torch.testing.assert_close(out, expected, rtol=0, atol=1e-14)


def test_dominant_logit_selects_value():
    c = 1
    q = torch.zeros(1, c, 1, 4, dtype=torch.float64)
    k = torch.zeros(1, c, 1, 4, dtype=torch.float64)
    q[0, 0, 0, 1] = 1.0
    k[0, 0, 0, 3] = 30.0      # logit +30 for query cell 1 against key cell 3, 0 elsewhere
    v = torch.randn(1, 2, 1, 4, dtype=torch.float64)
    out, _ = rda.attend_window(q, k, v, rda.RowWindow(0, 1))
    # three competitors at logit 0 keep a combined weight of about 3e-13
    torch.testing.assert_close(out[0, :, 0, 1], v[0, :, 0, 3], rtol=0, atol=1e-9)


def test_attend_window_matches_brute_force():
    gen = torch.Generator().manual_seed(7)
    q, k, v = (torch.randn(2, 3, 5, 5, generator=gen, dtype=torch.float64) for _ in range(3))
    out, scores = rda.attend_window(q, k, v, rda.RowWindow(1, 3))
    ref_out, ref_scores = window_attention_naive(q.numpy(), k.numpy(), v.numpy(), 1, 3)
    np.testing.assert_allclose(out.numpy(), ref_out, rtol=0, atol=1e-10)
    np.testing.assert_allclose(scores.numpy(), ref_scores, rtol=0, atol=1e-10)


def test_windowed_attention_averages_overlaps():
    gen = torch.Generator().manual_seed(8)
    q, k, v = (torch.randn(1, 2, 6, 4, generator=gen, dtype=torch.float64) for _ in range(3))
    out, scores, windows, cov = rda.windowed_attention(q, k, v, 3, 2)
    assert [w.start_row for w in windows] == [0, 2, 3]
    assert cov.tolist() == [1, 1, 2, 2, 2, 1]
    acc = np.zeros((1, 2, 6, 4))
    for wi, w in enumerate(windows):
        band, s = window_attention_naive(q.numpy(), k.numpy(), v.numpy(), w.start_row, 3)
        acc[:, :, w.start_row:w.start_row + 3] += band
        np.testing.assert_allclose(scores[:, wi].numpy(), s, atol=1e-10)
    np.testing.assert_allclose(out.numpy(), acc / cov.numpy()[None, None, :, None], atol=1e-10)


def test_zero_output_projection_is_residual_identity():
    for kind in ("rda", "typical"):
        b = _block(kind, seed=9)
        b.k6.zero_()
        f = torch.randn(1, 4, 6, 8, dtype=torch.float64)
        res = b(f, torch.randn_like(f))
        assert torch.equal(res.refined, f)


def test_scores_are_normalised_in_float32():
    torch.manual_seed(0)
    b = rda.RowDilatedAttention(8)
    f = torch.randn(2, 8, 7, 12) * 3
    res = b(f, torch.randn_like(f) * 3)
    assert res.scores.dtype == torch.float32
    assert (res.scores.sum(-1) - 1).abs().max().item() <= 1e-6


def test_epipolar_confinement():
    b = _block(seed=10)
    f_q = torch.randn(1, 4, 9, 6, dtype=torch.float64)
    f_r = torch.randn(1, 4, 9, 6, dtype=torch.float64)
    base = b(f_q, f_r).refined
    g = f_r.clone()
    g[0, :, 8] += 5.0          # last reference row; its band is rows 6..8, and RDA taps reach 4 rows up
    changed = ((b(f_q, g).refined - base).abs().amax((0, 1, 3)) > 1e-12).nonzero().flatten().tolist()
    # any row whose windows include reference rows 4..8 may change; rows 0..1 only see rows 0..2
    assert changed and min(changed) >= 2


def test_typical_query_is_pointwise_while_rda_spreads():
    f = torch.zeros(1, 4, 11, 11, dtype=torch.float64)
    g = f.clone()
    g[0, :, 5, 5] = 1.0
    t = _block("typical", seed=11)
    r = _block("rda", seed=11)
    dt = (t.make_query(g) - t.make_query(f)).abs().amax(1)[0] > 0
    dr = (r.make_query(g) - r.make_query(f)).abs().amax(1)[0] > 1e-12
    assert torch.nonzero(dt).tolist() == [[5, 5]]
    assert dr.sum().item() > 9


def test_rda_reduces_to_typical():
    r = _block("rda", seed=12)
    t = _block("typical", seed=13)
    _zero(r.k1p, r.k2p)
    with torch.no_grad():
        r.k2.bias.zero_()
        r.k4.bias.zero_()
        for a, b_ in (("k1", "k1"), ("k3", "k3"), ("k5", "k5"), ("k6", "k6")):
            getattr(r, a).weight.copy_(getattr(t, b_).weight)
            getattr(r, a).bias.copy_(getattr(t, b_).bias)
    f_q, f_r = torch.randn(1, 4, 5, 7, dtype=torch.float64), torch.randn(1, 4, 5, 7, dtype=torch.float64)
    torch.testing.assert_close(r(f_q, f_r).refined, t(f_q, f_r).refined, rtol=0, atol=1e-12)


def test_typical_matches_brute_force():
    t = _block("typical", seed=14)
    f_q, f_r = torch.randn(1, 4, 3, 5, dtype=torch.float64), torch.randn(1, 4, 3, 5, dtype=torch.float64)
    res = t(f_q, f_r)
    q, k, v = t.make_query(f_q), t.make_key(f_r), t.make_value(f_r)
    band, s = window_attention_naive(*(x.detach().numpy() for x in (q, k, v)), 0, 3)
    ref = f_q.numpy() + conv2d_naive(band, t.k6.weight.detach().numpy(), t.k6.bias.detach().numpy())
    np.testing.assert_allclose(res.refined.detach().numpy(), ref, rtol=0, atol=1e-10)
    np.testing.assert_allclose(res.scores[:, 0].detach().numpy(), s, rtol=0, atol=1e-10)


# --- constructed matching -----------------------------------------------------------

def _column_embedding(height, width, shift=0, scale=12.0):
    """One-hot channel per column; the reference view is the query shifted left by ``shift``."""
    f = torch.zeros(1, width + shift, height, width, dtype=torch.float64)
    for x in range(width):
        f[0, x + shift, :, x] = scale
    return f


def _sharp_identity_block(ch, kind="typical"):
    b = _block(kind, ch=ch)
    for name in ("k1", "k3", "k5"):
        _set_identity(getattr(b, name))
    if kind == "rda":
        _zero(b.k1p, b.k2p, b.k2, b.k4)
    return b


@pytest.mark.parametrize("kind", ["rda", "typical"])
def test_self_matching_gives_zero_disparity(kind):
    f = _column_embedding(5, 8)
    b = _sharp_identity_block(f.shape[1], kind)
    d = disparity_from_attention(b(f, f))
    assert d.abs().max().item() < 1e-3


@pytest.mark.parametrize("kind", ["rda", "typical"])
def test_shifted_reference_peaks_at_offset_two(kind):
    s, w = 2, 10
    query = _column_embedding(5, w)
    query = torch.cat([query, torch.zeros(1, s, 5, w, dtype=torch.float64)], 1)  # channels: w + s
    ref = torch.zeros_like(query)
    ref[:, :, :, :w - s] = query[:, :, :, s:]   # ref(x) = query(x + s): query column x matches ref column x - s
    b = _sharp_identity_block(query.shape[1], kind)
    res = b(query, ref)
    width = res.width
    for wi in range(res.scores.shape[1]):
        peak = res.scores[0, wi].argmax(-1) % width
        qcol = torch.arange(res.scores.shape[2]) % width
        visible = qcol >= s
        assert torch.equal(peak[visible], qcol[visible] - s)
    d = disparity_from_attention(res)
    assert (d[0, 0, :, s:] - s).abs().max().item() < 0.1


# --- parameters and gradients -------------------------------------------------------

def test_parameters_shared_between_directions():
    b = _block()
    f_l, f_r = torch.randn(1, 4, 5, 6, dtype=torch.float64), torch.randn(1, 4, 5, 6, dtype=torch.float64)
    touched = []
    hooks = [p.register_hook(lambda g, n=n: touched.append(n)) for n, p in b.named_parameters()]
    (b(f_l, f_r).refined.sum() + b(f_r, f_l).refined.sum()).backward()
    for h in hooks:
        h.remove()
    assert set(touched) == {n for n, _ in b.named_parameters()}
    assert len(list(b.parameters())) == len(dict(b.named_parameters()))


@pytest.mark.parametrize("target", ["rda_forward", "typical_attention_forward"])
def test_attention_gradcheck(target):
    res = checks.check_target(target, seed=0)
    assert res.passed, res


def test_key_bias_gradient_vanishes_by_softmax_invariance():
    # adding a constant to every key shifts each query's logits uniformly
    b = _block(seed=16)
    f_q, f_r = torch.randn(1, 4, 5, 6, dtype=torch.float64), torch.randn(1, 4, 5, 6, dtype=torch.float64)
    base = b(f_q, f_r).refined
    with torch.no_grad():
        b.k3.bias += 0.7
        b.k4.bias -= 0.3
    torch.testing.assert_close(b(f_q, f_r).refined, base, rtol=0, atol=1e-12)


def test_congruence_is_enforced():
    b = _block()
    with pytest.raises(ValueError):
        b(torch.zeros(1, 4, 5, 6, dtype=torch.float64), torch.zeros(1, 4, 5, 7, dtype=torch.float64))
