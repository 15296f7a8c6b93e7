"""PSNR and SSIM-family image quality metrics, plus the evaluation report."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_MIN_SIDE = 176


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _as_chw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[None] if img.ndim == 2 else img


def _filter_valid(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    full = ndimage.correlate(x, window, mode="constant")
    r = window.shape[0] // 2
    return full[r:x.shape[0] - r, r:x.shape[1] - r]


def _ssim_terms(a: np.ndarray, b: np.ndarray, window: np.ndarray):
    mu_a, mu_b = _filter_valid(a, window), _filter_valid(b, window)
    var_a = _filter_valid(a * a, window) - mu_a ** 2
    var_b = _filter_valid(b * b, window) - mu_b ** 2
    cov = _filter_valid(a * b, window) - mu_a * mu_b
    luminance = (2 * mu_a * mu_b + C1) / (mu_a ** 2 + mu_b ** 2 + C1)
    cs = (2 * cov + C2) / (var_a + var_b + C2)
    return luminance, cs


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), valid region, channel-averaged.

    Images are (C, H, W) or (H, W) with values in [0, 1].
    """
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[1:]) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[1:]}")
    window = _gaussian_window()
    vals = []
    for ca, cb in zip(a, b):
        lum, cs = _ssim_terms(ca, cb, window)
        vals.append(np.mean(lum * cs))
    return float(np.mean(vals))


def ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Five-scale MS-SSIM with 2x2 average downsampling between scales."""
    a, b = _as_chw(a), _as_chw(b)
    if min(a.shape[1:]) < MS_SSIM_MIN_SIDE:
        raise ValueError(f"ms_ssim needs min side >= {MS_SSIM_MIN_SIDE}, got {a.shape[1:]}")
    window = _gaussian_window()
    per_channel = []
    for ca, cb in zip(a, b):
        value = 1.0
        for scale, weight in enumerate(MS_SSIM_WEIGHTS):
            lum, cs = _ssim_terms(ca, cb, window)
            if scale == len(MS_SSIM_WEIGHTS) - 1:
                value *= max(np.mean(lum * cs), 0.0) ** weight
            else:
                value *= max(np.mean(cs), 0.0) ** weight
                h, w = ca.shape[0] // 2 * 2, ca.shape[1] // 2 * 2
                ca = ca[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
                cb = cb[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
        per_channel.append(value)
    return float(np.mean(per_channel))


def structural_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """MS-SSIM when the image is large enough, single-scale SSIM otherwise."""
    if min(np.shape(a)[-2:]) >= MS_SSIM_MIN_SIDE:
        return ms_ssim(a, b)
    return ssim(a, b)


@dataclass
class EvalRow:
    sample: str
    psnr_l: float
    psnr_r: float
    ssim_l: float
    ssim_r: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    variant: str = ""
    runtime: float = 0.0

    COLUMNS = ("psnr_l", "psnr_r", "ssim_l", "ssim_r")

    def aggregate(self) -> dict[str, float]:
        if not self.rows:
            return {c: float("nan") for c in self.COLUMNS}
        return {c: float(np.mean([getattr(r, c) for r in self.rows])) for c in self.COLUMNS}

    @property
    def mean_psnr(self) -> float:
        agg = self.aggregate()
        return (agg["psnr_l"] + agg["psnr_r"]) / 2

    @property
    def mean_ssim(self) -> float:
        agg = self.aggregate()
        return (agg["ssim_l"] + agg["ssim_r"]) / 2

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("sample",) + self.COLUMNS)
            for r in self.rows:
                writer.writerow([r.sample] + [repr(getattr(r, c)) for c in self.COLUMNS])
            agg = self.aggregate()
            writer.writerow(["aggregate"] + [repr(agg[c]) for c in self.COLUMNS])
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "EvalReport":
        report = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                if rec["sample"] == "aggregate":
                    continue
                report.rows.append(EvalRow(rec["sample"], *(float(rec[c]) for c in cls.COLUMNS)))
        return report


def evaluate_pair(pred_l, pred_r, gt_l, gt_r, name: str) -> EvalRow:
    return EvalRow(name, psnr(pred_l, gt_l), psnr(pred_r, gt_r),
                   structural_similarity(pred_l, gt_l), structural_similarity(pred_r, gt_r))
