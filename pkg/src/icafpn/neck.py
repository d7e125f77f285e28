"""The ICAF-FPN neck, its ablation variants, and the plain top-down FPN baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .afw import afw_block
from .autodiff import ParamStore, Tensor
from .ica import IcaConfig, ica_block

VARIANTS = ("fpn-baseline", "ica-only", "afw-only", "ica+afw-no-aff", "full")
LEVELS = (3, 4, 5)


@dataclass(frozen=True)
class NeckConfig:
    width: int = 48
    variant: str = "full"
    use_c2: bool = True
    heads: int = 3
    rates: tuple[int, ...] = (1, 2, 3)
    kernel: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown neck variant {self.variant!r}; choose from {VARIANTS}")

    @property
    def ica(self) -> IcaConfig:
        return IcaConfig(self.width, self.heads, self.rates, self.kernel)

    @property
    def uses_ica(self) -> bool:
        return self.variant in ("ica-only", "ica+afw-no-aff", "full")

    @property
    def uses_afw(self) -> bool:
        return self.variant in ("afw-only", "ica+afw-no-aff", "full")


@dataclass
class Pyramid:
    """Feature levels with their strides, checked against the input image size."""

    levels: dict[int, Tensor]
    image_size: tuple[int, int]
    strides: dict[int, int] = field(init=False)

    def __post_init__(self):
        self.strides = {lvl: 2**lvl for lvl in self.levels}
        ordered = sorted(self.levels)
        if any(self.strides[a] >= self.strides[b] for a, b in zip(ordered, ordered[1:])):
            raise ValueError("pyramid strides must increase strictly")
        for lvl, t in self.levels.items():
            want = tuple(math.ceil(s / self.strides[lvl]) for s in self.image_size)
            if t.shape[2:] != want:
                raise ad.DimensionError(f"level {lvl}: spatial {t.shape[2:]} != expected {want}")

    def __getitem__(self, lvl: int) -> Tensor:
        return self.levels[lvl]


@dataclass
class FusionWeights:
    logits: Tensor  # (3,)

    @property
    def alpha(self) -> Tensor:
        return ad.softmax(self.logits, axis=-1)


def fusion_weights(params: ParamStore, level: int) -> FusionWeights:
    return FusionWeights(params.get(f"neck.aff{level}.logits", (3,), "zeros"))


def lateral(c: Tensor, params: ParamStore, name: str, width: int) -> Tensor:
    return nn.conv1x1(c, params, name, width)


def aff(if_i: Tensor, af_i: Tensor, l_i: Tensor, fw: FusionWeights) -> Tensor:
    """P = a1*IF + a2*AF + a3*L with (a1, a2, a3) = softmax(logits)."""
    if not (if_i.shape == af_i.shape == l_i.shape):
        raise ad.DimensionError(f"aff: shapes {if_i.shape}, {af_i.shape}, {l_i.shape} differ")
    a = fw.alpha
    return a[0] * if_i + a[1] * af_i + a[2] * l_i


def fpn_baseline_forward(c3: Tensor, c4: Tensor, c5: Tensor, params: ParamStore, width: int):
    """Top-down FPN: 1x1 laterals, nearest 2x upsample + add, 3x3 smoothing."""
    inner5 = lateral(c5, params, "fpn.lat5", width)
    inner4 = lateral(c4, params, "fpn.lat4", width) + ad.upsample_nearest(inner5, 2)
    inner3 = lateral(c3, params, "fpn.lat3", width) + ad.upsample_nearest(inner4, 2)
    return tuple(nn.conv(t, params, f"fpn.smooth{lvl}", width, k=3) for lvl, t in zip(LEVELS, (inner3, inner4, inner5)))


def icaf_fpn_forward(feats, params: ParamStore, cfg: NeckConfig = NeckConfig()) -> tuple[Tensor, Tensor, Tensor]:
    """(C2, C3, C4, C5) -> (P3, P4, P5) for the configured variant.

    ``feats`` is a :class:`Pyramid` or a ``{level: Tensor}`` dict.
    """
    if isinstance(feats, Pyramid):
        feats = feats.levels
    if cfg.variant == "fpn-baseline":
        return fpn_baseline_forward(feats[3], feats[4], feats[5], params, cfg.width)

    lat = {lvl: lateral(feats[lvl], params, f"neck.lat{lvl}", cfg.width) for lvl in LEVELS}
    branches = {lvl: [] for lvl in LEVELS}
    if cfg.uses_ica:
        for lvl in LEVELS:
            branches[lvl].append(ica_block(feats[lvl], cfg.ica, params, f"neck.ica{lvl}"))
    if cfg.uses_afw:
        for lvl, af in zip(LEVELS, afw_block(feats, params, cfg.width, cfg.use_c2)):
            branches[lvl].append(af)

    if cfg.variant == "full":
        return tuple(aff(*branches[lvl], lat[lvl], fusion_weights(params, lvl)) for lvl in LEVELS)
    out = []
    for lvl in LEVELS:
        p = lat[lvl]
        for b in branches[lvl]:
            p = p + b
        out.append(p)
    return tuple(out)


def fusion_alphas(params: ParamStore) -> dict[int, list[float]]:
    """Current per-level fusion weights (only present for the full variant)."""
    out = {}
    for lvl in LEVELS:
        key = f"neck.aff{lvl}.logits"
        if key in params:
            z = params[key].data.astype(np.float64)
            e = np.exp(z - z.max())
            out[lvl] = (e / e.sum()).tolist()
    return out
