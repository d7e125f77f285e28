"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward


class GradCheckError(ArithmeticError):
    def __init__(self, name: str, msg: str):
        super().__init__(f"{name}: {msg}")
        self.name = name


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> tuple[float, dict[str, float]]:
    """Compare analytic and central-difference gradients of ``fn()``.

    ``fn`` takes no arguments and reads the float64 tensors in ``inputs``,
    which are perturbed in place.  A non-scalar output is reduced with a fixed
    random readout sum(R * out).  Output differences are taken elementwise
    before the readout so that untouched entries cancel exactly.

    Returns the max over entries of |analytic - fd| / max(|analytic|, |fd|, 1e-8)
    and the per-tensor maxima.  ``max_entries`` caps probed entries per tensor.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    for name, t in inputs.items():
        if t.dtype != np.float64:
            raise ValueError(f"grad_check needs 64-bit tensors; {name} is {t.dtype}")
        t.requires_grad = True
        t.grad = None

    rng = np.random.default_rng(seed)
    out = fn()
    if not np.isfinite(out.data).all():
        raise GradCheckError("<output>", "output is not finite")
    readout = np.ones(out.shape) if out.data.size == 1 else rng.normal(size=out.shape)
    backward((out * readout).sum())
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in inputs.items()}

    per_name: dict[str, float] = {}
    for name, t in inputs.items():
        if np.isnan(analytic[name]).any():
            raise GradCheckError(name, "analytic gradient contains NaN")
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            plus = fn().data.copy()
            flat[i] = orig - eps
            minus = fn().data
            flat[i] = orig
            fd = math.fsum((readout * (plus - minus)).ravel()) / (2 * eps)
            if math.isnan(fd):
                raise GradCheckError(name, f"finite difference is NaN at entry {i}")
            a = analytic[name].reshape(-1)[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
        per_name[name] = worst
    return (max(per_name.values()) if per_name else 0.0), per_name
