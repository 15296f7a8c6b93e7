"""Finite-difference gradient checks for every operator and composed block.

Each target builds a small float64 problem from a seed and returns the scalar
loss closure, the inputs to perturb and the subset of those inputs whose exact
gradient is zero by an invariance of the block.  The relative error used by
:func:`diffcore.gradcheck` is meaningless on such inputs (it divides rounding
noise by the 1e-8 floor), so they are checked against an absolute bound instead.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import torch

from . import diffcore as dc
from .decoder import AggregateStep, aggregate_step
from .disparity import merge_disp, soft_argmax_disp
from .layers import Conv
from .losses import FeatureExtractor, attention_consistency_loss, perceptual_loss
from .rda import RowDilatedAttention, TypicalAttention, enumerate_windows, rda_forward, typical_attention_forward

TOLERANCE = 1e-4
ZERO_GRAD_ATOL = 1e-8
DEFAULT_SEEDS = 10


@dataclass
class Problem:
    fn: Callable[[], torch.Tensor]
    inputs: dict[str, torch.Tensor]
    invariant: tuple[str, ...] = ()
    max_elements: int | None = None
    kink_probe: Callable[[], torch.Tensor] | None = None


def _randn(gen, *shape, away_from_zero=False):
    x = torch.randn(*shape, generator=gen, dtype=torch.float64)
    if away_from_zero:
        # keep kinks (relu, abs) further than eps from every sample
        x = x + 0.1 * torch.sign(x)
    return x.requires_grad_()


def _weights(gen, like):
    return torch.randn(like.shape, generator=gen, dtype=torch.float64)


def _seeded_module(module, seed):
    torch.manual_seed(seed)
    return module().double()


# --- single operators ---------------------------------------------------------------

def _op_conv2d(seed):
    g = torch.Generator().manual_seed(seed)
    x, w, b = _randn(g, 1, 3, 6, 7), _randn(g, 2, 3, 3, 3), _randn(g, 2)
    dil = (1, 2)[seed % 2]
    stride = (1, 2)[(seed // 2) % 2]
    out_w = _weights(g, dc.conv2d(x, w, b, stride=stride, dilation=dil))
    return Problem(lambda: (dc.conv2d(x, w, b, stride=stride, dilation=dil) * out_w).sum(), {"x": x, "w": w, "b": b})


def _op_matmul(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = _randn(g, 2, 3, 4), _randn(g, 2, 4, 5)
    ow = torch.randn(2, 3, 5, generator=g, dtype=torch.float64)
    return Problem(lambda: (dc.matmul(a, b) * ow).sum(), {"a": a, "b": b})


def _op_softmax(seed):
    g = torch.Generator().manual_seed(seed)
    x = _randn(g, 3, 6)
    ow = torch.randn(3, 6, generator=g, dtype=torch.float64)
    return Problem(lambda: (dc.softmax(x, axis=seed % 2) * ow).sum(), {"x": x})


def _op_relu(seed):
    g = torch.Generator().manual_seed(seed)
    x = _randn(g, 4, 5, away_from_zero=True)
    ow = torch.randn(4, 5, generator=g, dtype=torch.float64)
    return Problem(lambda: (dc.relu(x) * ow).sum(), {"x": x})


def _binary(op):
    def make(seed):
        g = torch.Generator().manual_seed(seed)
        a, b = _randn(g, 3, 4), _randn(g, 3, 4)
        ow = torch.randn(3, 4, generator=g, dtype=torch.float64)
        return Problem(lambda: (op(a, b) * ow).sum(), {"a": a, "b": b})
    return make


def _op_scalar_mul(seed):
    g = torch.Generator().manual_seed(seed)
    x = _randn(g, 3, 4)
    ow = torch.randn(3, 4, generator=g, dtype=torch.float64)
    s = 0.5 + seed
    return Problem(lambda: (dc.scalar_mul(x, s) * ow).sum(), {"x": x})


def _op_concat(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = _randn(g, 1, 2, 3, 3), _randn(g, 1, 3, 3, 3)
    ow = torch.randn(1, 5, 3, 3, generator=g, dtype=torch.float64)
    return Problem(lambda: (dc.concat([a, b], axis=1) * ow).sum(), {"a": a, "b": b})


def _op_abs(seed):
    g = torch.Generator().manual_seed(seed)
    x = _randn(g, 4, 5, away_from_zero=True)
    ow = torch.randn(4, 5, generator=g, dtype=torch.float64)
    return Problem(lambda: (dc.abs(x) * ow).sum(), {"x": x})


def _op_l1_mean(seed):
    g = torch.Generator().manual_seed(seed)
    a = _randn(g, 2, 3, 4)
    b = (a.detach() + 0.2 * torch.sign(torch.randn(2, 3, 4, generator=g, dtype=torch.float64))
         + 0.3 * torch.randn(2, 3, 4, generator=g, dtype=torch.float64)).requires_grad_()
    mask = torch.rand(2, 3, 4, generator=g) > 0.3
    return Problem(lambda: dc.l1_mean(a, b, mask), {"a": a, "b": b})


def _op_bilinear(seed):
    g = torch.Generator().manual_seed(seed)
    x = _randn(g, 1, 2, 3, 4)
    ow = torch.randn(1, 2, 6, 8, generator=g, dtype=torch.float64)
    return Problem(lambda: (dc.bilinear_upsample2x(x) * ow).sum(), {"x": x})


# --- composed blocks ----------------------------------------------------------------

def _block_inputs(block, prefix=""):
    return {prefix + n: p for n, p in block.named_parameters()}


def _rda_forward(seed):
    block = _seeded_module(lambda: RowDilatedAttention(8), seed)
    g = torch.Generator().manual_seed(seed)
    f_q, f_r = _randn(g, 1, 8, 6, 10), _randn(g, 1, 8, 6, 10)
    ow = torch.randn(1, 8, 6, 10, generator=g, dtype=torch.float64)
    inputs = {"f_q": f_q, "f_r": f_r, **_block_inputs(block)}
    # a per-channel constant added to the key shifts every logit of a query row equally
    invariant = ("k3.bias", "k2p.bias", "k4.bias")
    return Problem(lambda: (rda_forward(f_q, f_r, block).refined * ow).sum(), inputs, invariant, max_elements=24)


def _typical_forward(seed):
    block = _seeded_module(lambda: TypicalAttention(8), seed)
    g = torch.Generator().manual_seed(seed)
    f_q, f_r = _randn(g, 1, 8, 6, 10), _randn(g, 1, 8, 6, 10)
    ow = torch.randn(1, 8, 6, 10, generator=g, dtype=torch.float64)
    inputs = {"f_q": f_q, "f_r": f_r, **_block_inputs(block)}
    return Problem(lambda: (typical_attention_forward(f_q, f_r, block).refined * ow).sum(), inputs,
                   ("k3.bias",), max_elements=24)


def _disparity(seed):
    fuse = _seeded_module(lambda: Conv(2, 1, 3), seed)
    g = torch.Generator().manual_seed(seed)
    height, width = 6, 8
    windows = enumerate_windows(height)
    length = windows[0].rows * width
    logits = _randn(g, 1, len(windows), length, length)
    d_next = _randn(g, 1, 1, height // 2, width // 2)
    ow = torch.randn(1, 1, height, width, generator=g, dtype=torch.float64)

    def fn():
        disp = soft_argmax_disp(dc.softmax(logits, axis=-1), windows, width, height)
        return (merge_disp(d_next, disp, fuse) * ow).sum()
    inputs = {"logits": logits, "d_next": d_next, **_block_inputs(fuse, "fuse.")}
    return Problem(fn, inputs, max_elements=40)


def _aggregate(seed):
    step = _seeded_module(lambda: AggregateStep(4, 5), seed)
    g = torch.Generator().manual_seed(seed)
    p, a = _randn(g, 1, 4, 3, 5), _randn(g, 1, 5, 3, 5)
    ow = torch.randn(1, 4, 6, 10, generator=g, dtype=torch.float64)
    inputs = {"p_next": p, "a_next": a, **_block_inputs(step)}
    return Problem(lambda: (aggregate_step(p, a, step) * ow).sum(), inputs, max_elements=20)


def _perceptual(seed):
    ext = FeatureExtractor(seed=seed).double()
    g = torch.Generator().manual_seed(seed)
    out_l = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64).requires_grad_()
    out_r = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64).requires_grad_()
    clean_l = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
    clean_r = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
    return Problem(lambda: perceptual_loss(out_l, out_r, clean_l, clean_r, ext), {"out_l": out_l, "out_r": out_r},
                   max_elements=40, kink_probe=lambda: _extractor_pattern(ext, (out_l, out_r), (clean_l, clean_r)))


def _extractor_pattern(ext: FeatureExtractor, outputs, cleans) -> torch.Tensor:
    """Signs of every relu input, and of every tapped feature difference, for the outputs."""
    signs = []
    for out, clean in zip(outputs, cleans):
        taps_clean = ext(clean)
        x = out - 0.5
        tap = 0
        for name, stride, is_tap in ext.plan:
            pre = dc.conv2d(x, getattr(ext, f"{name}_w").double(), getattr(ext, f"{name}_b").double(),
                            stride=stride, padding=1)
            signs.append((pre > 0).flatten())
            x = torch.relu(pre)
            if is_tap:
                signs.append(torch.sign(x - taps_clean[tap]).flatten())
                tap += 1
    return torch.cat([s.to(torch.int8) for s in signs])


def _consistency(seed):
    g = torch.Generator().manual_seed(seed)
    d_l, d_r = (torch.rand(1, 1, 6, 8, generator=g, dtype=torch.float64) * 4).requires_grad_(), \
        (torch.rand(1, 1, 6, 8, generator=g, dtype=torch.float64) * 4).requires_grad_()
    gt_l = (d_l.detach() + 0.2 + torch.rand(1, 1, 6, 8, generator=g, dtype=torch.float64)) * \
        torch.sign(torch.randn(1, 1, 6, 8, generator=g, dtype=torch.float64))
    gt_r = d_r.detach() - 0.2 - torch.rand(1, 1, 6, 8, generator=g, dtype=torch.float64)
    m_l = torch.rand(1, 1, 6, 8, generator=g) > 0.3
    m_r = torch.rand(1, 1, 6, 8, generator=g) > 0.3
    return Problem(lambda: attention_consistency_loss(d_l, d_r, gt_l, gt_r, m_l, m_r), {"d_l": d_l, "d_r": d_r})


TARGETS: dict[str, Callable[[int], Problem]] = {
    "conv2d": _op_conv2d,
    "matmul": _op_matmul,
    "softmax": _op_softmax,
    "relu": _op_relu,
    "add": _binary(dc.add),
    "sub": _binary(dc.sub),
    "mul": _binary(dc.mul),
    "scalar_mul": _op_scalar_mul,
    "concat": _op_concat,
    "abs": _op_abs,
    "l1_mean": _op_l1_mean,
    "bilinear_upsample2x": _op_bilinear,
    "rda_forward": _rda_forward,
    "typical_attention_forward": _typical_forward,
    "soft_argmax_merge": _disparity,
    "aggregate_step": _aggregate,
    "perceptual_loss": _perceptual,
    "attention_consistency_loss": _consistency,
}

# grouping used by ``gradcheck --module``
MODULE_TARGETS = {
    "diffcore": [n for n in TARGETS if n not in ("rda_forward", "typical_attention_forward", "soft_argmax_merge",
                                                  "aggregate_step", "perceptual_loss", "attention_consistency_loss")],
    "rda": ["rda_forward", "typical_attention_forward"],
    "disparity": ["soft_argmax_merge"],
    "decoder": ["aggregate_step"],
    "losses": ["perceptual_loss", "attention_consistency_loss"],
}


@dataclass
class TargetResult:
    name: str
    seed: int
    max_error: float
    zero_grad_max: float = 0.0
    failed_node: str | None = None
    skipped: int = 0
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.failed_node is None and self.max_error <= TOLERANCE and self.zero_grad_max <= ZERO_GRAD_ATOL


def check_target(name: str, seed: int, eps: float = 1e-5) -> TargetResult:
    t0 = time.perf_counter()
    prob = TARGETS[name](seed)
    rep = dc.gradcheck(prob.fn, prob.inputs, eps=eps, max_elements=prob.max_elements, seed=seed,
                       kink_probe=prob.kink_probe)
    res = TargetResult(name, seed, 0.0, failed_node=rep.failed_node, skipped=sum(rep.skipped.values()))
    if rep.failed_node is None:
        res.max_error = max((e for n, e in rep.errors.items() if n not in prob.invariant), default=0.0)
        if prob.invariant:
            # the analytic gradient must vanish and the numeric one must be pure rounding noise
            grads = dc.backward(prob.fn(), {n: prob.inputs[n] for n in prob.invariant})
            res.zero_grad_max = max(g.abs().max().item() for g in grads.values())
            res.zero_grad_max = max(res.zero_grad_max, _numeric_zero_grad(prob, eps))
    res.seconds = time.perf_counter() - t0
    return res


def _numeric_zero_grad(prob: Problem, eps: float) -> float:
    worst = 0.0
    with torch.no_grad():
        for n in prob.invariant:
            flat = prob.inputs[n].view(-1)
            for i in range(min(flat.numel(), 4)):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = prob.fn().item()
                flat[i] = orig - eps
                fm = prob.fn().item()
                flat[i] = orig
                worst = max(worst, abs(fp - fm) / (2 * eps))
    return worst


@dataclass
class CheckSummary:
    results: list[TargetResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def worst(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.results:
            out[r.name] = max(out.get(r.name, 0.0), r.max_error if r.failed_node is None else float("inf"))
        return out


def run_checks(targets: list[str] | None = None, seeds: int = DEFAULT_SEEDS, base_seed: int = 0) -> CheckSummary:
    summary = CheckSummary()
    for name in targets or list(TARGETS):
        for s in range(base_seed, base_seed + seeds):
            summary.results.append(check_target(name, s))
    return summary
