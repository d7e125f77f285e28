"""Parameterised layer helpers.  Each reads its weights from a ParamStore by name."""

from __future__ import annotations

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


def conv(
    x: Tensor,
    params: ParamStore,
    name: str,
    cout: int,
    k: int = 3,
    stride: int = 1,
    pad: int | None = None,
    dilation: int = 1,
    groups: int = 1,
    bias: bool = True,
    bias_init: str | float = "zeros",
) -> Tensor:
    cin = x.shape[1]
    if pad is None:
        pad = dilation * (k // 2)
    w = params.get(f"{name}.weight", (cout, cin // groups, k, k))
    b = params.get(f"{name}.bias", (cout,), bias_init) if bias else None
    return ad.conv2d(x, w, b, stride=stride, pad=pad, dilation=dilation, groups=groups)


def conv1x1(x: Tensor, params: ParamStore, name: str, cout: int, bias: bool = True) -> Tensor:
    return conv(x, params, name, cout, k=1, pad=0, bias=bias)


def linear(x: Tensor, params: ParamStore, name: str, cout: int) -> Tensor:
    w = params.get(f"{name}.weight", (cout, x.shape[1]))
    b = params.get(f"{name}.bias", (cout,), "zeros")
    return ad.linear(x, w, b)


def up2(x: Tensor, params: ParamStore, name: str, cout: int) -> Tensor:
    """Learned 2x upsampling: transposed conv with kernel 2, stride 2."""
    w = params.get(f"{name}.weight", (x.shape[1], cout, 2, 2))
    b = params.get(f"{name}.bias", (cout,), "zeros")
    return ad.transpose_conv2d(x, w, b, stride=2)


def mlp(x: Tensor, params: ParamStore, name: str, hidden: int) -> Tensor:
    c = x.shape[1]
    h = linear(x, params, f"{name}.fc1", hidden)
    return linear(ad.gelu(h), params, f"{name}.fc2", c)
