"""Full stereo network and the ablation variant registry."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
from torch import nn

from . import diffcore as dc
from .decoder import Decoder
from .disparity import DisparityMerger, disparity_from_attention, inject_disparity
from .encoder import DEFAULT_CHANNELS, Encoder
from .rda import make_attention


@dataclass(frozen=True)
class VariantSpec:
    name: str = "ours"
    attention: tuple[str, str, str] = ("rda", "rda", "typical")     # levels 1, 2, 3
    dilated_value: bool = False
    rows: int = 3
    stride: int = 2
    mono: bool = False
    concat_disparity: bool = True
    alpha: float | None = None      # overrides the configured consistency weight

    def __post_init__(self):
        if any(a not in ("rda", "typical") for a in self.attention) or len(self.attention) != 3:
            raise ValueError(f"attention must name rda/typical for three levels, got {self.attention}")
        if self.rows < 1 or self.stride < 1:
            raise ValueError("rows and stride must be positive")

    def effective_alpha(self, alpha: float) -> float:
        return alpha if self.alpha is None else self.alpha


VARIANTS: dict[str, VariantSpec] = {
    "ours": VariantSpec(),
    "ttt": VariantSpec("ttt", attention=("typical", "typical", "typical")),
    "rtt": VariantSpec("rtt", attention=("rda", "typical", "typical")),
    "rrr": VariantSpec("rrr", attention=("rda", "rda", "rda")),
    "fd": VariantSpec("fd", dilated_value=True),
    "1row": VariantSpec("1row", rows=1, stride=1),
    "5row": VariantSpec("5row", rows=5, stride=2),
    "mono": VariantSpec("mono", mono=True, alpha=0.0),
    "nocat": VariantSpec("nocat", concat_disparity=False),
    "noac": VariantSpec("noac", alpha=0.0),
}


def get_variant(name: str = "ours", **overrides) -> VariantSpec:
    key = name.lower().removeprefix("ours-")
    if key not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    spec = VARIANTS[key]
    return replace(spec, **overrides) if overrides else spec


@dataclass
class ModelConfig:
    channels: tuple[int, int, int] = DEFAULT_CHANNELS
    variant: VariantSpec = field(default_factory=VariantSpec)


@dataclass
class StereoOutput:
    out_l: torch.Tensor
    out_r: torch.Tensor
    disp_l: torch.Tensor            # merged level-1 map, level-1 cells
    disp_r: torch.Tensor
    refined_l: dict[int, torch.Tensor]
    refined_r: dict[int, torch.Tensor]
    level_disp_l: dict[int, torch.Tensor]
    level_disp_r: dict[int, torch.Tensor]


class StereoDropNet(nn.Module):
    def __init__(self, channels: tuple[int, int, int] = DEFAULT_CHANNELS, variant: VariantSpec | None = None):
        super().__init__()
        self.variant = variant or VariantSpec()
        v = self.variant
        self.channels = tuple(channels)
        self.encoder = Encoder(self.channels)
        # levels 1-2 see one extra disparity channel when injection is on
        att_ch = [c + (1 if (v.concat_disparity and i < 3) else 0) for i, c in enumerate(self.channels, start=1)]
        self.attention = nn.ModuleDict({
            str(i): make_attention(v.attention[i - 1], att_ch[i - 1], rows=v.rows, stride=v.stride,
                                   dilated_value=v.dilated_value and v.attention[i - 1] == "rda")
            for i in (1, 2, 3)
        })
        self.merger = DisparityMerger()
        self.decoder = Decoder(self.channels[2], tuple(att_ch))

    def forward(self, img_l: torch.Tensor, img_r: torch.Tensor) -> StereoOutput:
        if self.variant.mono:
            # each view is paired with itself; both outputs of a self-pair coincide
            both = torch.cat([img_l, img_r], dim=0)
            res = self._stereo(both, both)
            n = img_l.shape[0]
            split = lambda t: (t[:n], t[n:])  # noqa: E731
            out_l, out_r = split(res.out_l)
            d_l, d_r = split(res.disp_l)
            return StereoOutput(out_l, out_r, d_l, d_r,
                                {k: v[:n] for k, v in res.refined_l.items()},
                                {k: v[n:] for k, v in res.refined_l.items()},
                                {k: v[:n] for k, v in res.level_disp_l.items()},
                                {k: v[n:] for k, v in res.level_disp_l.items()})
        return self._stereo(img_l, img_r)

    def _stereo(self, img_l, img_r) -> StereoOutput:
        pyr_l, pyr_r = self.encoder(img_l), self.encoder(img_r)
        d_l = d_r = None
        refined_l, refined_r, level_l, level_r = {}, {}, {}, {}
        for i in (3, 2, 1):
            cat = self.variant.concat_disparity
            f_l = inject_disparity(pyr_l[i], d_l, cat)
            f_r = inject_disparity(pyr_r[i], d_r, cat)
            block = self.attention[str(i)]
            res_l, res_r = block(f_l, f_r), block(f_r, f_l)
            disp_l, disp_r = disparity_from_attention(res_l), disparity_from_attention(res_r)
            level_l[i], level_r[i] = disp_l, disp_r
            d_l = self.merger(d_l, disp_l, i)
            d_r = self.merger(d_r, disp_r, i)
            refined_l[i], refined_r[i] = res_l.refined, res_r.refined
        out_l = self.decoder(pyr_l[3], refined_l)
        out_r = self.decoder(pyr_r[3], refined_r)
        return StereoOutput(out_l, out_r, d_l, d_r, refined_l, refined_r, level_l, level_r)

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())


def clamp01(x: torch.Tensor) -> torch.Tensor:
    return dc._finite(x.clamp(0.0, 1.0), "clamp")
