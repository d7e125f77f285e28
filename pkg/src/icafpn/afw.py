"""Across-layer feature weighting: align, gather with dual-axis attention, gate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor
from .ica import ConfigError


@dataclass
class AlignedSet:
    """Aligned maps keyed by source level, all at the C4 spatial size."""

    maps: dict[int, Tensor]
    strides: dict[int, int]

    def __post_init__(self):
        hw = {t.shape[2:] for t in self.maps.values()}
        widths = {t.shape[1] for t in self.maps.values()}
        if len(hw) != 1 or len(widths) != 1:
            raise ad.DimensionError(
                f"aligned maps disagree: {[(k, t.shape) for k, t in sorted(self.maps.items())]}"
            )

    @property
    def levels(self) -> list[int]:
        return sorted(self.maps)

    def ordered(self) -> list[Tensor]:
        return [self.maps[k] for k in self.levels]


@dataclass
class GateMaps:
    G: Tensor
    W: tuple[Tensor, Tensor, Tensor]  # levels 3, 4, 5


def _log2_ratio(a: int, b: int) -> int:
    big, small = max(a, b), min(a, b)
    if big % small or (big // small) & (big // small - 1):
        raise ValueError(f"size {a} and target {b} are not related by a power of two")
    return int(np.log2(big // small))


def align(c: Tensor, target_hw: tuple[int, int], params: ParamStore, name: str, width: int) -> Tensor:
    """Map one backbone level onto the target grid at neck width.

    Larger maps are average-pooled then 1x1-projected; smaller maps go through
    stacked k=2, s=2 transposed convolutions; equal sizes are projected only.
    """
    h, w = c.shape[2:]
    th, tw = target_hw
    steps = _log2_ratio(h, th)
    if _log2_ratio(w, tw) != steps:
        raise ValueError(f"aspect mismatch aligning {h}x{w} to {th}x{tw}")
    if h > th:
        return nn.conv1x1(ad.avg_pool2d(c, h // th), params, f"{name}.proj", width)
    if h < th:
        x = c
        for s in range(steps):
            x = nn.up2(x, params, f"{name}.up{s}", width)
        return x
    return nn.conv1x1(c, params, f"{name}.proj", width)


def align_all(feats: dict[int, Tensor], params: ParamStore, width: int, name: str = "afw.align") -> AlignedSet:
    target = feats[4].shape[2:]
    maps = {lvl: align(f, target, params, f"{name}{lvl}", width) for lvl, f in sorted(feats.items())}
    return AlignedSet(maps, {lvl: 2**lvl for lvl in feats})


def _axis_attention(q: Tensor, k: Tensor, v: Tensor, axis: str) -> tuple[Tensor, Tensor]:
    """Self-attention inside each column (axis='v') or row (axis='h')."""
    d = q.shape[1]
    # tokens along H for columns, along W for rows; stripes become a batch dim
    perm = (0, 3, 2, 1) if axis == "v" else (0, 2, 3, 1)
    qs, ks, vs = q.transpose(perm), k.transpose(perm), v.transpose(perm)
    logits = (qs @ ks.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
    weights = ad.softmax(logits, axis=-1)
    out = (weights @ vs).transpose(tuple(np.argsort(perm)))
    return out, weights


def dual_axis_attention(x: Tensor, params: ParamStore, name: str = "afw.daa", return_weights: bool = False):
    """X' = X + Proj(Concat(X_v' + V_a, X_h' + V_a)).

    X_v (first channel half) attends within vertical stripes, X_h within
    horizontal stripes; V is one projection of X shared by both axes, and V_a
    is a depthwise 3x3 convolution of V.
    """
    c = x.shape[1]
    if c % 2:
        raise ConfigError(f"dual-axis attention needs an even channel count, got {c}")
    half = c // 2
    xv, xh = ad.split_channels(x, [half, half])
    q1 = nn.conv1x1(xv, params, f"{name}.q1", half)
    k1 = nn.conv1x1(xv, params, f"{name}.k1", half, bias=False)
    q2 = nn.conv1x1(xh, params, f"{name}.q2", half)
    k2 = nn.conv1x1(xh, params, f"{name}.k2", half, bias=False)
    v = nn.conv1x1(x, params, f"{name}.v", half)
    xv_out, wv = _axis_attention(q1, k1, v, "v")
    xh_out, wh = _axis_attention(q2, k2, v, "h")
    va = nn.conv(v, params, f"{name}.va", half, k=3, groups=half)
    mixed = ad.concat_channels([xv_out + va, xh_out + va])
    out = x + nn.conv1x1(mixed, params, f"{name}.proj", c)
    return (out, (wv, wh)) if return_weights else out


def zero_attention_projection(params: ParamStore, name: str = "afw.daa") -> None:
    """Zero the output projection so dual-axis attention returns its input."""
    for suffix in ("weight", "bias"):
        key = f"{name}.proj.{suffix}"
        params.set(key, np.zeros_like(params[key].data))


def afg(aligned: AlignedSet, params: ParamStore, name: str = "afw.daa") -> Tensor:
    return dual_axis_attention(ad.concat_channels(aligned.ordered()), params, name)


def gate_maps(x_prime: Tensor, params: ParamStore, width: int, name: str = "afw.gate") -> GateMaps:
    logits = nn.conv1x1(x_prime, params, name, 4 * width)
    g, w1, w2, w3 = (ad.sigmoid(t) for t in ad.split_channels(logits, [width] * 4))
    return GateMaps(g, (w1, w2, w3))


def weight_levels(aligned: AlignedSet, gates: GateMaps) -> dict[int, Tensor]:
    """AF_i = A_i * G * W_(i-2) for levels 3, 4, 5, still at the C4 size."""
    return {lvl: aligned.maps[lvl] * gates.G * gates.W[lvl - 3] for lvl in (3, 4, 5)}


def restore_resolution(af: dict[int, Tensor], params: ParamStore, width: int, name: str = "afw.restore") -> tuple:
    """Bring AF_3 up (transposed conv) and AF_5 down (average pool) to their level sizes."""
    return (nn.up2(af[3], params, f"{name}3", width), af[4], ad.avg_pool2d(af[5], 2))


def split_fw(x_prime: Tensor, aligned: AlignedSet, params: ParamStore, width: int) -> tuple[Tensor, Tensor, Tensor]:
    gates = gate_maps(x_prime, params, width)
    return restore_resolution(weight_levels(aligned, gates), params, width)


def afw_block(
    feats: dict[int, Tensor], params: ParamStore, width: int, use_c2: bool = True
) -> tuple[Tensor, Tensor, Tensor]:
    """Full AFW path over backbone levels {2,} 3, 4, 5 -> (AF_3, AF_4, AF_5)."""
    levels = (2, 3, 4, 5) if use_c2 else (3, 4, 5)
    aligned = align_all({lvl: feats[lvl] for lvl in levels}, params, width)
    return split_fw(afg(aligned, params), aligned, params, width)
