"""Intra-layer context augmentation: multi-head dilated neighbourhood attention."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class IcaConfig:
    channels: int
    heads: int = 3
    rates: tuple[int, ...] = field(default=(1, 2, 3))
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(int(r) for r in self.rates))
        if self.heads != len(self.rates):
            raise ConfigError(f"{self.heads} heads but {len(self.rates)} dilation rates")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if any(r < 1 for r in self.rates):
            raise ConfigError(f"dilation rates must be >= 1, got {self.rates}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    def reach(self) -> int:
        """Largest per-axis offset any head looks at."""
        return (self.kernel // 2) * max(self.rates)


def receptive_span(kernel: int, rate: int) -> int:
    """Per-axis extent covered by a dilated kernel: (k - 1) * r + 1."""
    return (kernel - 1) * rate + 1


def dilated_attention(q: Tensor, k: Tensor, v: Tensor, kernel: int, rate: int) -> tuple[Tensor, Tensor]:
    """One head: every query attends over its kernel x kernel dilated neighbourhood.

    Returns (output (n, d, h, w), weights (n, kernel**2, h, w)).  Out-of-bounds
    neighbours are masked out of the softmax.
    """
    n, d, h, w = q.shape
    k_nb, valid = ad.unfold_neighbors(k, kernel, rate)
    v_nb, _ = ad.unfold_neighbors(v, kernel, rate)
    logits = (q.reshape(n, d, 1, h, w) * k_nb).sum(axis=1) * (1.0 / np.sqrt(d))
    weights = ad.softmax(logits, axis=1, mask=valid[None])
    out = (weights.reshape(n, 1, kernel * kernel, h, w) * v_nb).sum(axis=2)
    return out, weights


def mhda(x: Tensor, cfg: IcaConfig, params: ParamStore, name: str = "mhda", return_weights: bool = False):
    """Per-head dilated attention on ``x``; returns the concatenated head outputs.

    Head n owns channels [n*c/heads, (n+1)*c/heads) of the shared 1x1 Q/K/V
    projections and uses dilation ``cfg.rates[n]``.
    """
    if x.shape[1] != cfg.channels:
        raise ad.DimensionError(f"mhda: expected {cfg.channels} channels, got {x.shape[1]}")
    c, hd = cfg.channels, cfg.head_dim
    # keys carry no bias: it shifts every logit of a query equally, so it has no effect
    q = nn.conv1x1(x, params, f"{name}.q", c)
    k = nn.conv1x1(x, params, f"{name}.k", c, bias=False)
    v = nn.conv1x1(x, params, f"{name}.v", c)
    outs, weights = [], []
    for i, rate in enumerate(cfg.rates):
        sl = (slice(None), slice(i * hd, (i + 1) * hd))
        o, wts = dilated_attention(q[sl], k[sl], v[sl], cfg.kernel, rate)
        outs.append(o)
        weights.append(wts)
    out = ad.concat_channels(outs)
    return (out, weights) if return_weights else out


def ica_block(c_i: Tensor, cfg: IcaConfig, params: ParamStore, name: str = "ica") -> Tensor:
    """IF = X + MLP(X), with X = C' + Linear(Concat[h_1..h_n]) and C' = conv3x3(C)."""
    c_prime = nn.conv(c_i, params, f"{name}.conv", cfg.channels, k=3)
    heads = mhda(c_prime, cfg, params, f"{name}.mhda")
    x = c_prime + nn.linear(heads, params, f"{name}.proj", cfg.channels)
    return x + nn.mlp(x, params, f"{name}.mlp", 2 * cfg.channels)


def zero_residual_branches(params: ParamStore, name: str = "ica") -> None:
    """Zero the attention output projection and the MLP's second linear."""
    for p in (f"{name}.proj", f"{name}.mlp.fc2"):
        for suffix in ("weight", "bias"):
            key = f"{p}.{suffix}"
            params.set(key, np.zeros_like(params[key].data))
