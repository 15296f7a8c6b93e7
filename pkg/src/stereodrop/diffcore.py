"""Differentiable operator set and finite-difference gradient checking.

All network code in this package is built from the operators below.  Reverse-mode
propagation is delegated to torch autograd; this module adds the shape contracts,
the finiteness guard that every forward result must pass, and an independent
central-difference checker.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""

    def __init__(self, node: str):
        super().__init__(f"non-finite values produced by '{node}'")
        self.node = node


class EmptyMaskWarning(UserWarning):
    pass


def _finite(out: Tensor, node: str) -> Tensor:
    # NaN/Inf anywhere makes the sum non-finite; overflow of a finite sum is rejected too
    if not math.isfinite(out.detach().sum().item()):
        raise NonFiniteError(node)
    return out


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def same_padding(kernel: int, dilation: int) -> int:
    return dilation * (kernel - 1) // 2


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int | None = None) -> Tensor:
    """Zero-padded cross-correlation.  ``padding=None`` selects "same" padding."""
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError(f"conv2d expects NCHW input and OIHW kernel, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input {tuple(x.shape)} vs kernel {tuple(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d bias {tuple(bias.shape)} does not match kernel {tuple(weight.shape)}")
    if padding is None:
        padding = same_padding(weight.shape[2], dilation)
    h = conv_output_size(x.shape[2], weight.shape[2], stride, dilation, padding)
    w = conv_output_size(x.shape[3], weight.shape[3], stride, dilation, padding)
    if h < 1 or w < 1:
        raise ValueError(
            f"conv2d produces empty output for input {tuple(x.shape)} and kernel {tuple(weight.shape)}")
    out = F.conv2d(x, weight, bias, stride=stride, padding=padding, dilation=dilation)
    return _finite(out, "conv2d")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return _finite(torch.matmul(a, b), "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.dim() <= axis < x.dim():
        raise ValueError(f"softmax axis {axis} invalid for shape {tuple(x.shape)}")
    return _finite(torch.softmax(x, dim=axis), "softmax")


def relu(x: Tensor) -> Tensor:
    return _finite(torch.relu(x), "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    return _finite(a + b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _finite(a - b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _finite(a * b, "mul")


def scalar_mul(a: Tensor, s: float) -> Tensor:
    return _finite(a * s, "scalar_mul")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.dim() != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)):
            raise ValueError(f"concat shape mismatch: {tuple(ref)} vs {tuple(t.shape)} along axis {axis}")
    return _finite(torch.cat(list(tensors), dim=axis), "concat")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the operator name
    return _finite(torch.abs(x), "abs")


def l1_mean(a: Tensor, b: Tensor, mask: Tensor | None = None) -> Tensor:
    """Mean absolute difference over mask-true entries.

    An all-false mask yields a zero loss and an ``EmptyMaskWarning``.
    """
    if a.shape != b.shape:
        raise ValueError(f"l1_mean shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = torch.abs(a - b)
    if mask is None:
        return _finite(diff.mean(), "l1_mean")
    mask = mask.to(dtype=a.dtype).expand_as(diff)
    count = mask.sum()
    if count.item() == 0:
        warnings.warn("l1_mean called with an empty mask; returning 0", EmptyMaskWarning, stacklevel=2)
        return (diff * mask).sum()
    return _finite((diff * mask).sum() / count, "l1_mean")


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling, align-corners-false (half-pixel centres)."""
    if x.dim() != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"bilinear_upsample2x expects non-empty NCHW input, got {tuple(x.shape)}")
    out = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
    return _finite(out, "bilinear_upsample2x")


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Gradients of a scalar loss for every named parameter.

    Parameters the loss does not depend on receive zeros of their own shape.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NonFiniteError("loss")
    names = list(params)
    grads = torch.autograd.grad(loss.reshape(()), [params[n] for n in names], allow_unused=True)
    return {n: torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, grads)}


@dataclass
class GradcheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    failed_node: str | None = None
    skipped: dict[str, int] = field(default_factory=dict)   # elements sitting on a kink

    @property
    def max_error(self) -> float:
        if self.failed_node is not None:
            return math.inf
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.failed_node is None and self.max_error <= tol


def gradcheck(fn: Callable[[], Tensor], inputs: Mapping[str, Tensor], eps: float = 1e-5,
              max_elements: int | None = None, seed: int = 0,
              kink_probe: Callable[[], Tensor] | None = None) -> GradcheckReport:
    """Compare autograd gradients of ``fn()`` against central differences.

    ``inputs`` are float64 leaf tensors with ``requires_grad`` set; ``fn`` closes
    over them.  Per input the report holds
    max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    ``max_elements`` checks a seeded random subset of large inputs.

    ``kink_probe`` returns the activation pattern of the graph (e.g. the signs
    of every relu input).  An element whose +eps and -eps perturbations yield
    different patterns straddles a non-differentiable point; it is skipped and
    counted in ``report.skipped`` instead of being scored.
    """
    for name, t in inputs.items():
        if t.dtype != torch.float64:
            raise TypeError(f"gradcheck needs float64 inputs; '{name}' is {t.dtype}")
    report = GradcheckReport()
    try:
        loss = fn()
        analytic = backward(loss, inputs)
    except NonFiniteError as exc:
        report.failed_node = exc.node
        return report

    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, t in inputs.items():
            flat = t.view(-1)
            idx = torch.arange(flat.numel())
            if max_elements is not None and flat.numel() > max_elements:
                idx = torch.randperm(flat.numel(), generator=gen)[:max_elements]
            a_flat = analytic[name].reshape(-1)
            worst = 0.0
            skipped = 0
            for i in idx.tolist():
                orig = flat[i].item()
                try:
                    flat[i] = orig + eps
                    f_plus = fn().item()
                    pat_plus = kink_probe() if kink_probe else None
                    flat[i] = orig - eps
                    f_minus = fn().item()
                    pat_minus = kink_probe() if kink_probe else None
                except NonFiniteError as exc:
                    report.failed_node = exc.node
                    return report
                finally:
                    flat[i] = orig
                if kink_probe and not torch.equal(pat_plus, pat_minus):
                    skipped += 1
                    continue
                num = (f_plus - f_minus) / (2 * eps)
                ana = a_flat[i].item()
                err = math.fabs(ana - num) / max(math.fabs(ana), math.fabs(num), 1e-8)
                worst = max(worst, err)
            report.errors[name] = worst
            report.skipped[name] = skipped
    return report
