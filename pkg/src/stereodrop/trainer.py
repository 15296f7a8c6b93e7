"""Training loop, Adam, stereo-consistent augmentation, checkpoint restore and inference."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import diffcore as dc
from .checkpoint import Checkpoint
from .container import list_sample_dirs
from .encoder import ShapeError, check_image_dims
from .losses import (DEFAULT_ALPHA, DEFAULT_LAMBDAS, FeatureExtractor, attention_consistency_loss,
                     downsample_gt, perceptual_loss, total_loss)
from .model import StereoDropNet, clamp01, get_variant
from .synthgen import StereoSample, read_sample

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "epoch", "lr", "loss_p", "loss_c", "loss_total")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay_factor: float = 0.1
    epochs: int = 70
    batch: int = 3
    seed: int = 0
    variant: str = "ours"
    alpha: float = DEFAULT_ALPHA
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    data: str = ""
    width: int = 96
    height: int = 48
    channels: tuple[int, ...] = (16, 32, 64)
    extractor_seed: int = 0
    augment: bool = True
    checkpoint_every: int = 0          # epochs between checkpoints; 0 writes only the final one
    max_steps: int = 0                 # 0 = run all epochs
    deterministic: bool = True

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.channels = tuple(int(v) for v in self.channels)
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be at least 1")
        check_image_dims(self.height, self.width)

    @property
    def decay_epoch(self) -> int:
        return round(self.epochs * 50 / 70)

    def lr_at(self, epoch: int) -> float:
        return self.lr * (self.lr_decay_factor if epoch >= self.decay_epoch else 1.0)

    def to_text(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_mapping(cls, mapping: dict[str, str], **overrides) -> "TrainConfig":
        kwargs = {}
        types = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in {**mapping, **{k: v for k, v in overrides.items() if v is not None}}.items():
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(getattr(cls, key), raw, key)
        return cls(**kwargs)


def _coerce(default, raw, key):
    if not isinstance(raw, str):
        return raw
    if key in ("lambdas", "channels"):
        cast = float if key == "lambdas" else int
        return tuple(cast(x) for x in raw.replace(" ", "").split(",") if x)
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def read_config(path: str | Path) -> dict[str, str]:
    from .container import read_manifest
    return read_manifest(path)


# --- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place.  Nothing changes if any gradient is non-finite."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(params[name].shape)}")
        if not torch.isfinite(g).all():
            raise dc.NonFiniteError(f"gradient of {name}")
    state.t += 1
    t = state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return state


# --- augmentation ------------------------------------------------------------------

def _map(sample: StereoSample, fn, swap: bool = False) -> StereoSample:
    arrays = {k: np.ascontiguousarray(fn(v)) for k, v in sample.arrays().items()}
    if swap:
        arrays = {k: arrays[k[:-1] + ("r" if k.endswith("l") else "l")] for k in arrays}
    return StereoSample(**arrays, meta=dict(sample.meta))


def flip_vertical(sample: StereoSample) -> StereoSample:
    return _map(sample, lambda a: a[:, ::-1, :])


def flip_horizontal(sample: StereoSample) -> StereoSample:
    """Mirror columns and swap the views so the left view stays on the left."""
    return _map(sample, lambda a: a[:, :, ::-1], swap=True)


def augment(sample: StereoSample, rng: np.random.Generator) -> StereoSample:
    vflip, hflip = rng.random(2) < 0.5
    if vflip:
        sample = flip_vertical(sample)
    if hflip:
        sample = flip_horizontal(sample)
    return sample


# --- training ---------------------------------------------------------------------

def configure_determinism(enabled: bool = True) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def build_model(cfg: TrainConfig) -> tuple[StereoDropNet, FeatureExtractor]:
    torch.manual_seed(cfg.seed)
    model = StereoDropNet(tuple(cfg.channels), get_variant(cfg.variant))
    return model, FeatureExtractor(cfg.extractor_seed)


def batch_tensors(samples: Sequence[StereoSample]) -> dict[str, torch.Tensor]:
    return {name: torch.from_numpy(np.stack([getattr(s, name) for s in samples]))
            for name in ("I_l", "I_r", "O_l", "O_r", "D_l", "D_r", "M_l", "M_r")}


def compute_losses(model: StereoDropNet, extractor: FeatureExtractor, batch: dict[str, torch.Tensor],
                   lambdas, alpha: float):
    out = model(batch["I_l"], batch["I_r"])
    loss_p = perceptual_loss(out.out_l, out.out_r, batch["O_l"], batch["O_r"], extractor, lambdas)
    gt_l, m_l = downsample_gt(batch["D_l"], batch["M_l"])
    gt_r, m_r = downsample_gt(batch["D_r"], batch["M_r"])
    loss_c = attention_consistency_loss(out.disp_l, out.disp_r, gt_l, gt_r, m_l, m_r)
    return loss_p, loss_c, total_loss(loss_p, loss_c, alpha), out


def make_checkpoint(model, extractor, state: AdamState, epoch: int, cfg: TrainConfig) -> Checkpoint:
    np_ = lambda d: {k: v.detach().cpu().numpy().copy() for k, v in d.items()}  # noqa: E731
    return Checkpoint(np_(dict(model.named_parameters())), np_(dict(extractor.named_buffers())),
                      np_(state.m), np_(state.v), state.t, epoch, cfg.to_text())


def load_samples(data: str | Path, cfg: TrainConfig | None = None) -> list[StereoSample]:
    dirs = list_sample_dirs(data)
    if not dirs:
        raise FileNotFoundError(f"no samples found under {data}")
    samples = [read_sample(d) for d in dirs]
    if cfg is not None:
        for d, s in zip(dirs, samples):
            if (s.height, s.width) != (cfg.height, cfg.width):
                raise ShapeError(f"{d}: sample is {s.height}x{s.width}, config expects {cfg.height}x{cfg.width}")
    return samples


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict[str, float]]
    model: StereoDropNet
    extractor: FeatureExtractor


def train(cfg: TrainConfig, samples: Sequence[StereoSample] | None = None, out: str | Path | None = None,
          metrics_path: str | Path | None = None) -> TrainResult:
    """Minimise L_P + alpha L_C with Adam; returns the final checkpoint and the per-step log.

    On a non-finite loss the last good checkpoint is written to ``out`` and
    :class:`TrainingDiverged` is raised.
    """
    configure_determinism(cfg.deterministic)
    if samples is None:
        samples = load_samples(cfg.data, cfg)
    model, extractor = build_model(cfg)
    variant = model.variant
    alpha = variant.effective_alpha(cfg.alpha)
    params = dict(model.named_parameters())
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    history: list[dict[str, float]] = []
    writer = None
    fh = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
    last_good = make_checkpoint(model, extractor, state, 0, cfg)
    started = time.time()
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            order = rng.permutation(len(samples))
            for start in range(0, len(order), cfg.batch):
                chosen = [samples[i] for i in order[start:start + cfg.batch]]
                if cfg.augment:
                    chosen = [augment(s, rng) for s in chosen]
                batch = batch_tensors(chosen)
                try:
                    loss_p, loss_c, loss, _ = compute_losses(model, extractor, batch, cfg.lambdas, alpha)
                    grads = dc.backward(loss, params)
                    adam_step(params, grads, state, lr)
                except dc.NonFiniteError as exc:
                    if out is not None:
                        last_good.save(out)
                    raise TrainingDiverged(f"step {state.t + 1}: {exc}") from exc
                row = {"step": state.t, "epoch": epoch, "lr": lr, "loss_p": loss_p.item(),
                       "loss_c": loss_c.item(), "loss_total": loss.item()}
                history.append(row)
                if writer is not None:
                    writer.writerow([row[c] if c in ("step", "epoch") else repr(row[c]) for c in METRIC_COLUMNS])
                if cfg.max_steps and state.t >= cfg.max_steps:
                    break
            last_good = make_checkpoint(model, extractor, state, epoch + 1, cfg)
            if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                last_good.save(out)
            log.info("epoch %d step %d loss %.5f (%.1fs)", epoch, state.t, history[-1]["loss_total"],
                     time.time() - started)
            if cfg.max_steps and state.t >= cfg.max_steps:
                break
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        last_good.save(out)
    return TrainResult(last_good, history, model, extractor)


# --- inference --------------------------------------------------------------------

def restore(checkpoint: Checkpoint) -> tuple[StereoDropNet, FeatureExtractor, TrainConfig]:
    cfg = TrainConfig.from_mapping(checkpoint.config)
    model = StereoDropNet(tuple(cfg.channels), get_variant(cfg.variant))
    own = dict(model.named_parameters())
    if set(own) != set(checkpoint.model):
        missing = sorted(set(own) ^ set(checkpoint.model))
        raise KeyError(f"checkpoint does not match model layout: {missing[:5]}")
    with torch.no_grad():
        for name, p in own.items():
            src = checkpoint.model[name]
            if tuple(src.shape) != tuple(p.shape):
                raise ValueError(f"{name}: checkpoint shape {src.shape} vs model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(src))
    extractor = FeatureExtractor(cfg.extractor_seed)
    with torch.no_grad():
        for name, buf in extractor.named_buffers():
            if name in checkpoint.extractor:
                buf.copy_(torch.from_numpy(checkpoint.extractor[name]))
    return model, extractor, cfg


def infer(checkpoint: Checkpoint | StereoDropNet, img_l: np.ndarray, img_r: np.ndarray,
          expect_dims: tuple[int, int] | None = None):
    """Clamped restored pair and merged level-1 disparities (level-1 cells) for (3, H, W) inputs."""
    if isinstance(checkpoint, Checkpoint):
        model, _, cfg = restore(checkpoint)
        expect_dims = (cfg.height, cfg.width)
    else:
        model = checkpoint
    img_l = np.asarray(img_l, dtype=np.float32)
    img_r = np.asarray(img_r, dtype=np.float32)
    if img_l.shape != img_r.shape:
        raise ShapeError(f"views differ in shape: {img_l.shape} vs {img_r.shape}")
    check_image_dims(img_l.shape[-2], img_l.shape[-1])
    if expect_dims is not None and tuple(img_l.shape[-2:]) != tuple(expect_dims):
        raise ShapeError(f"input is {img_l.shape[-2]}x{img_l.shape[-1]}, checkpoint was trained on "
                         f"{expect_dims[0]}x{expect_dims[1]}")
    batched = img_l.ndim == 4
    x_l = torch.from_numpy(img_l if batched else img_l[None])
    x_r = torch.from_numpy(img_r if batched else img_r[None])
    with torch.no_grad():
        out = model(x_l, x_r)
        res = [clamp01(out.out_l), clamp01(out.out_r), out.disp_l, out.disp_r]
    res = [r.numpy() if batched else r[0].numpy() for r in res]
    return tuple(res)


def disparity_to_pixels(disp_cells: np.ndarray, factor: int = 4) -> np.ndarray:
    """Level-1 cell disparity -> full-resolution pixel disparity (nearest upsampling)."""
    return np.repeat(np.repeat(disp_cells, factor, axis=-2), factor, axis=-1) * factor


def evaluate_model(model: StereoDropNet, samples: Sequence[StereoSample], names: Sequence[str] | None = None):
    from .metrics import EvalReport, evaluate_pair
    report = EvalReport(variant=model.variant.name)
    started = time.time()
    names = names or [f"s{i:04d}" for i in range(len(samples))]
    for name, s in zip(names, samples):
        o_l, o_r, _, _ = infer(model, s.I_l, s.I_r)
        report.rows.append(evaluate_pair(o_l, o_r, s.O_l, s.O_r, name))
    report.runtime = time.time() - started
    return report


def input_report(samples: Sequence[StereoSample], names: Sequence[str] | None = None):
    from .metrics import EvalReport, evaluate_pair
    report = EvalReport(variant="input")
    names = names or [f"s{i:04d}" for i in range(len(samples))]
    for name, s in zip(names, samples):
        report.rows.append(evaluate_pair(s.I_l, s.I_r, s.O_l, s.O_r, name))
    return report


def is_finite_history(history) -> bool:
    return all(math.isfinite(r["loss_total"]) for r in history)
