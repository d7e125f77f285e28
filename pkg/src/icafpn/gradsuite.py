"""Registry of small float64 fixtures for finite-difference checks of every neck and head block."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .afw import AlignedSet, afg, align_all, dual_axis_attention, split_fw
from .autodiff import ParamStore, Tensor
from .detector import backbone_forward, head_forward
from .ica import IcaConfig, ica_block
from .neck import NeckConfig, aff, fpn_baseline_forward, fusion_weights, icaf_fpn_forward, lateral

THRESHOLD = 1e-4
EPS = 1e-5


@dataclass
class Fixture:
    fn: Callable[[], Tensor]
    inputs: dict[str, Tensor]


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _pyramid_inputs(rng, size: int = 32) -> dict[int, Tensor]:
    return {lvl: _rand(rng, 1, 4 * 2 ** (lvl - 2), size // 2**lvl, size // 2**lvl) for lvl in (2, 3, 4, 5)}


def _with_params(fn, params: ParamStore, inputs: dict[str, Tensor]) -> Fixture:
    fn()  # materialise lazily created parameters
    return Fixture(fn, {**inputs, **dict(params.items())})


def fx_ica(rng, params):
    x = _rand(rng, 1, 4, 8, 8)
    cfg = IcaConfig(channels=6)
    return _with_params(lambda: ica_block(x, cfg, params, "ica"), params, {"input": x})


def fx_dual_axis(rng, params):
    x = _rand(rng, 1, 8, 4, 5)
    return _with_params(lambda: dual_axis_attention(x, params), params, {"input": x})


def fx_split_fw(rng, params):
    aligned = AlignedSet({lvl: _rand(rng, 1, 4, 2, 2) for lvl in (2, 3, 4, 5)}, {lvl: 2**lvl for lvl in (2, 3, 4, 5)})
    maps = {f"A{lvl}": t for lvl, t in aligned.maps.items()}
    x_prime = _rand(rng, 1, 16, 2, 2)
    fn = lambda: ad.concat([o.reshape(-1) for o in split_fw(x_prime, aligned, params, 4)], axis=0)
    return _with_params(fn, params, {"x_prime": x_prime, **maps})


def fx_aff(rng, params):
    shape = (1, 3, 4, 4)
    if_i, af_i, l_i = (_rand(rng, *shape) for _ in range(3))
    params.set("neck.aff3.logits", rng.normal(size=3))
    fn = lambda: aff(if_i, af_i, l_i, fusion_weights(params, 3))
    return _with_params(fn, params, {"IF": if_i, "AF": af_i, "L": l_i})


def fx_lateral(rng, params):
    c = _rand(rng, 1, 5, 4, 4)
    return _with_params(lambda: lateral(c, params, "lat", 3), params, {"input": c})


def fx_head(rng, params):
    feats = [_rand(rng, 1, 4, s, s) for s in (4, 2, 1)]
    # small regression logits keep exp() away from the clip kinks
    fn = lambda: ad.concat(
        [t.reshape(-1) for o in (head_forward(feats, params, 2),) for t in (*o.cls, *o.reg, *o.ctr)], axis=0
    )
    fx = _with_params(fn, params, {f"P{i + 3}": t for i, t in enumerate(feats)})
    params["head.reg.weight"].data *= 0.1
    return fx


def fx_align(rng, params):
    feats = _pyramid_inputs(rng)
    fn = lambda: ad.concat([t.reshape(-1) for t in align_all(feats, params, 4).ordered()], axis=0)
    return _with_params(fn, params, {f"C{lvl}": t for lvl, t in feats.items()})


def fx_afg(rng, params):
    feats = _pyramid_inputs(rng)
    fn = lambda: afg(align_all(feats, params, 4), params)
    return _with_params(fn, params, {f"C{lvl}": t for lvl, t in feats.items()})


def fx_backbone(rng, params):
    x = _rand(rng, 1, 3, 32, 32)
    fn = lambda: ad.concat([t.reshape(-1) for t in backbone_forward(x, params, widths=(2, 3, 3, 3)).values()], axis=0)
    return _with_params(fn, params, {"image": x})


def fx_fpn_baseline(rng, params):
    feats = _pyramid_inputs(rng)
    fn = lambda: ad.concat([t.reshape(-1) for t in fpn_baseline_forward(feats[3], feats[4], feats[5], params, 3)], axis=0)
    return _with_params(fn, params, {f"C{lvl}": feats[lvl] for lvl in (3, 4, 5)})


def fx_icaf_fpn(rng, params):
    feats = _pyramid_inputs(rng)
    cfg = NeckConfig(width=6)
    fn = lambda: ad.concat([o.reshape(-1) for o in icaf_fpn_forward(feats, params, cfg)], axis=0)
    return _with_params(fn, params, {f"C{lvl}": t for lvl, t in feats.items()})


# name -> (fixture builder, entries probed per tensor; None probes all)
REGISTRY: dict[str, tuple[Callable, int | None]] = {
    "ica": (fx_ica, None),
    "dual_axis_attention": (fx_dual_axis, None),
    "split_fw": (fx_split_fw, None),
    "aff": (fx_aff, None),
    "lateral": (fx_lateral, None),
    "head": (fx_head, 60),
    "align": (fx_align, 60),
    "afg": (fx_afg, 40),
    "backbone": (fx_backbone, 40),
    "fpn_baseline": (fx_fpn_baseline, 40),
    "icaf_fpn": (fx_icaf_fpn, 12),
}


@dataclass
class BlockResult:
    name: str
    max_rel_err: float
    worst_tensor: str
    seconds: float
    error: str = ""

    @property
    def passed(self) -> bool:
        return not self.error and self.max_rel_err < THRESHOLD


def run_block(name: str, seed: int = 0) -> BlockResult:
    builder, cap = REGISTRY[name]
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    params = ParamStore(seed=seed, precision=64)
    t0 = time.perf_counter()
    try:
        fx = builder(rng, params)
        err, per = ad.grad_check(fx.fn, fx.inputs, eps=EPS, max_entries=cap, seed=seed)
    except (ArithmeticError, ValueError) as exc:
        return BlockResult(name, float("inf"), "", time.perf_counter() - t0, f"{type(exc).__name__}: {exc}")
    worst = max(per, key=per.get) if per else ""
    return BlockResult(name, err, worst, time.perf_counter() - t0)


def run_suite(names=None, seed: int = 0, log=None) -> list[BlockResult]:
    results = []
    for name in names or REGISTRY:
        r = run_block(name, seed)
        if log is not None:
            log(format_result(r))
        results.append(r)
    return results


def format_result(r: BlockResult) -> str:
    status = "PASS" if r.passed else "FAIL"
    detail = r.error or f"worst={r.worst_tensor}"
    return f"{r.name:<22s} max_rel_err={r.max_rel_err:.3e} {status} ({detail}, {r.seconds:.1f}s)"
