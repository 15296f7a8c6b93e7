"""Synthetic stereo waterdrop scenes with exact disparity and occlusion ground truth.

Scenes are stacks of fronto-parallel textured layers at integer disparities,
so a left pixel ``(y, x)`` and its right correspondent ``(y, x - d)`` sample
the same texel.  Waterdrops follow I = (1 - T) * O + T * R per view.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .container import read_arrays, write_arrays

DROP_MODES = ("drops", "mist", "mixed")
ARRAY_NAMES = ("I_l", "I_r", "O_l", "O_r", "T_l", "T_r", "R_l", "R_r", "D_l", "D_r", "M_l", "M_r")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    width: int = 96
    height: int = 48
    n_layers: int = 3
    disparity_range: tuple[int, int] = (2, 10)
    drop_mode: str = "drops"
    drop_index: int = 0               # several corrupted variants share one background
    n_drops: tuple[int, int] = (6, 12)
    drop_radius: tuple[float, float] = (3.0, 8.0)
    drop_peak: tuple[float, float] = (0.7, 0.95)
    n_mist: tuple[int, int] = (150, 250)
    mist_radius: tuple[float, float] = (1.0, 2.5)
    mist_peak: tuple[float, float] = (0.3, 0.6)
    texture_sigma: float = 4.0
    per_channel_t: bool = False
    border: int = 0

    def __post_init__(self):
        if self.width % 16 or self.height % 16:
            raise ValueError(f"image dims {self.width}x{self.height} must be multiples of 16")
        lo, hi = self.disparity_range
        if not 0 <= lo <= hi <= self.width // 4:
            raise ValueError(f"disparity range {self.disparity_range} must lie within [0, {self.width // 4}]")
        if self.drop_mode not in DROP_MODES:
            raise ValueError(f"drop_mode must be one of {DROP_MODES}, got {self.drop_mode!r}")
        if self.n_layers < 1:
            raise ValueError("need at least one layer")


@dataclass
class StereoSample:
    I_l: np.ndarray
    I_r: np.ndarray
    O_l: np.ndarray
    O_r: np.ndarray
    T_l: np.ndarray
    T_r: np.ndarray
    R_l: np.ndarray
    R_r: np.ndarray
    D_l: np.ndarray
    D_r: np.ndarray
    M_l: np.ndarray
    M_r: np.ndarray
    meta: dict = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ARRAY_NAMES}

    @property
    def height(self) -> int:
        return self.I_l.shape[1]

    @property
    def width(self) -> int:
        return self.I_l.shape[2]


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _texture(rng, height, width, sigma) -> np.ndarray:
    noise = rng.normal(size=(3, height, width))
    smooth = ndimage.gaussian_filter(noise, sigma=(0, sigma, sigma), mode="wrap")
    smooth = smooth / (smooth.std(axis=(1, 2), keepdims=True) + 1e-12)
    base = rng.uniform(0.25, 0.75, size=(3, 1, 1))
    contrast = rng.uniform(0.1, 0.2)
    return np.clip(base + contrast * smooth, 0.0, 1.0)


def _support(rng, height, tex_width, width) -> np.ndarray:
    yy, uu = np.mgrid[0:height, 0:tex_width]
    cy, cu = rng.uniform(0, height), rng.uniform(0, width)
    ry, ru = rng.uniform(height / 6, height / 2.5), rng.uniform(width / 8, width / 3)
    if rng.random() < 0.5:
        return ((yy - cy) / ry) ** 2 + ((uu - cu) / ru) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(uu - cu) <= ru)


def _layers(spec: SceneSpec):
    rng = _rng(spec.seed, 0)
    lo, hi = spec.disparity_range
    choices = np.arange(lo, hi + 1)
    replace = spec.n_layers > len(choices)
    disps = np.sort(rng.choice(choices, size=spec.n_layers, replace=replace))
    tex_w = spec.width + hi
    layers = []
    for k, d in enumerate(disps):
        tex = _texture(rng, spec.height, tex_w, spec.texture_sigma)
        sup = np.ones((spec.height, tex_w), bool) if k == 0 else _support(rng, spec.height, tex_w, spec.width)
        layers.append((int(d), tex, sup))
    return layers


def gen_background_pair(spec: SceneSpec):
    """Clean pair, per-view disparity (pixels), and validity masks, all as (C, H, W) float32."""
    h, w = spec.height, spec.width
    layers = _layers(spec)
    o_l = np.zeros((3, h, w))
    o_r = np.zeros((3, h, w))
    id_l = np.full((h, w), -1)
    id_r = np.full((h, w), -1)
    cols = np.arange(w)
    for k, (d, tex, sup) in enumerate(layers):          # back to front
        hit_l = sup[:, cols]
        o_l[:, hit_l] = tex[:, :, cols][:, hit_l]
        id_l[hit_l] = k
        hit_r = sup[:, cols + d]
        o_r[:, hit_r] = tex[:, :, cols + d][:, hit_r]
        id_r[hit_r] = k
    disp = np.array([d for d, _, _ in layers])
    d_l, d_r = disp[id_l], disp[id_r]

    rows = np.arange(h)[:, None]
    xr = cols[None, :] - d_l
    inside = (xr >= 0) & (xr < w)
    m_l = inside & (id_r[rows, np.clip(xr, 0, w - 1)] == id_l)
    xl = cols[None, :] + d_r
    inside = (xl >= 0) & (xl < w)
    m_r = inside & (id_l[rows, np.clip(xl, 0, w - 1)] == id_r)
    if spec.border:
        b = spec.border
        for m in (m_l, m_r):
            m[:b] = m[-b:] = False
            m[:, :b] = m[:, -b:] = False
    f32 = lambda a: np.asarray(a, dtype=np.float32)  # noqa: E731
    return (f32(o_l), f32(o_r), f32(d_l[None]), f32(d_r[None]), f32(m_l[None]), f32(m_r[None]))


def resolve_mode(spec: SceneSpec) -> str:
    if spec.drop_mode != "mixed":
        return spec.drop_mode
    return "drops" if _rng(spec.seed, 1 + spec.drop_index, 99).random() < 0.5 else "mist"


def _blobs(rng, h, w, count, radius, peak):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    clear = np.ones((h, w))
    disp_y = np.zeros((h, w))
    disp_x = np.zeros((h, w))
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(*radius)
        ratio = rng.uniform(0.6, 1.4)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        a = (np.cos(theta) * dx + np.sin(theta) * dy) / (r * ratio)
        b = (-np.sin(theta) * dx + np.cos(theta) * dy) / (r / ratio)
        rho2 = a * a + b * b
        blob = rng.uniform(*peak) * np.exp(-0.5 * rho2 * rho2)       # flat-topped Gaussian profile
        clear *= 1.0 - blob
        # lens-like inversion inside the drop
        disp_y -= 1.5 * dy * blob
        disp_x -= 1.5 * dx * blob
    return 1.0 - clear, disp_y, disp_x


def gen_waterdrops(spec: SceneSpec, view: int, clean: np.ndarray):
    """Transparency T and appearance R for one view (0 = left, 1 = right)."""
    mode = resolve_mode(spec)
    rng = _rng(spec.seed, 1 + spec.drop_index, view)
    _, h, w = clean.shape
    if mode == "drops":
        count, radius, peak = rng.integers(spec.n_drops[0], spec.n_drops[1] + 1), spec.drop_radius, spec.drop_peak
    else:
        count, radius, peak = rng.integers(spec.n_mist[0], spec.n_mist[1] + 1), spec.mist_radius, spec.mist_peak
    t, disp_y, disp_x = _blobs(rng, h, w, int(count), radius, peak)
    t = np.clip(t, 0.0, 0.95)
    if spec.per_channel_t:
        t3 = np.clip(t[None] * rng.uniform(0.9, 1.05, size=(3, 1, 1)), 0.0, 0.95)
    else:
        t3 = np.broadcast_to(t, (3, h, w))
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    coords = np.stack([yy + disp_y, xx + disp_x])
    refr = np.stack([ndimage.map_coordinates(c, coords, order=1, mode="reflect") for c in clean])
    refr = ndimage.gaussian_filter(refr, sigma=(0, 1.5, 1.5))
    r = np.clip(refr + rng.uniform(0.05, 0.15), 0.0, 1.0)
    return np.ascontiguousarray(t3, dtype=np.float32), r.astype(np.float32)


def compose(clean: np.ndarray, t: np.ndarray, r: np.ndarray) -> np.ndarray:
    if clean.shape != t.shape or clean.shape != r.shape:
        raise ValueError(f"shapes differ: O {clean.shape}, T {t.shape}, R {r.shape}")
    if t.min() < 0 or t.max() > 1:
        raise ValueError(f"transparency outside [0, 1]: [{t.min()}, {t.max()}]")
    one = np.asarray(1, dtype=t.dtype)
    return np.clip((one - t) * clean + t * r, 0, 1)


def generate_sample(spec: SceneSpec) -> StereoSample:
    o_l, o_r, d_l, d_r, m_l, m_r = gen_background_pair(spec)
    t_l, r_l = gen_waterdrops(spec, 0, o_l)
    t_r, r_r = gen_waterdrops(spec, 1, o_r)
    meta = {"seed": spec.seed, "drop_mode": resolve_mode(spec), "drop_index": spec.drop_index}
    return StereoSample(compose(o_l, t_l, r_l), compose(o_r, t_r, r_r), o_l, o_r, t_l, t_r, r_l, r_r,
                        d_l, d_r, m_l, m_r, meta)


def generate_dataset(out: str | Path, scenes: int, per_scene: int, mode: str = "mixed", seed: int = 0,
                     **spec_kwargs) -> list[Path]:
    out = Path(out)
    paths = []
    for s in range(scenes):
        for k in range(per_scene):
            spec = SceneSpec(seed=seed * 100003 + s, drop_mode=mode, drop_index=k, **spec_kwargs)
            paths.append(write_sample(generate_sample(spec), out / f"scene{s:04d}_{k:02d}"))
    return paths


def write_sample(sample: StereoSample, directory: str | Path) -> Path:
    return write_arrays(directory, sample.arrays(), sample.meta)


def read_sample(directory: str | Path) -> StereoSample:
    meta, arrays = read_arrays(directory, list(ARRAY_NAMES))
    return StereoSample(**arrays, meta=meta)


def spec_fields() -> list[str]:
    return [f.name for f in fields(SceneSpec)]
