"""Deterministic SGD training and dataset-level prediction for the desk detector."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ParamStore
from .data import Dataset, hu_window
from .detector import Detector, TrainingDivergence
from .metrics import Detection
from .neck import NeckConfig

WINDOW_LEVEL, WINDOW_WIDTH = 30.0, 300.0


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 900
    batch_size: int = 8
    lr: float = 0.01
    warmup: int = 50
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 35.0  # global L2 norm; <= 0 disables
    # lr x0.1 at these fractions of the budget (the 12-epoch schedule drops at 8 and 11)
    decay_at: tuple[float, ...] = (8 / 12, 11 / 12)
    seed: int = 0
    precision: int = 32

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.warmup < 0:
            raise ValueError("steps >= 0, batch_size >= 1 and warmup >= 0 required")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("lr >= 0, momentum in [0, 1) and weight_decay >= 0 required")


@dataclass
class TrainResult:
    params: ParamStore
    trace: list[tuple[int, float]] = field(default_factory=list)

    def trace_text(self) -> str:
        return "".join(f"{step},{loss!r}\n" for step, loss in self.trace)


def preprocess(hu: np.ndarray, channels: int = 3, dtype=np.float32) -> np.ndarray:
    """HU (n, H, W) -> windowed, centred to [-1, 1], replicated to ``channels``."""
    x = hu_window(hu, WINDOW_LEVEL, WINDOW_WIDTH) * 2.0 - 1.0
    return np.repeat(x[:, None], channels, axis=1).astype(dtype)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate for 1-based ``step``: linear warmup then step decay."""
    lr = cfg.lr
    if cfg.warmup and step <= cfg.warmup:
        lr *= step / cfg.warmup
    for frac in cfg.decay_at:
        if step > math.floor(frac * cfg.steps):
            lr *= 0.1
    return lr


def batch_schedule(n_items: int, steps: int, batch_size: int, seed: int) -> list[np.ndarray]:
    """Index batches drawn from successive seeded permutations (epochs)."""
    rng = np.random.default_rng([seed, 0xBA7C])
    order = np.empty(0, dtype=np.int64)
    need = steps * batch_size
    while len(order) < need:
        order = np.concatenate([order, rng.permutation(n_items)])
    return [order[i * batch_size : (i + 1) * batch_size] for i in range(steps)]


def sgd_step(params: ParamStore, velocity: dict[str, np.ndarray], cfg: TrainConfig, lr: float) -> float:
    """Momentum SGD with coupled weight decay; returns the pre-clip gradient norm."""
    items = [(k, t) for k, t in params.items() if t.grad is not None]
    norm = math.sqrt(math.fsum(float(np.vdot(t.grad, t.grad)) for _, t in items))
    scale = 1.0
    if cfg.grad_clip > 0 and norm > cfg.grad_clip:
        scale = cfg.grad_clip / (norm + 1e-6)
    for name, t in items:
        g = t.grad * scale + cfg.weight_decay * t.data
        v = velocity.get(name)
        v = g if v is None else cfg.momentum * v + g
        velocity[name] = v
        t.data = (t.data - lr * v).astype(t.data.dtype)
    return norm


def load_split(dataset: Dataset, ids: list[int], channels: int = 3, dtype=np.float32) -> np.ndarray:
    if not ids:
        return np.zeros((0, channels, dataset.image_size, dataset.image_size), dtype=dtype)
    return preprocess(np.stack([dataset.hu(i) for i in ids]), channels, dtype)


def train(
    dataset: Dataset,
    neck: NeckConfig,
    cfg: TrainConfig,
    split: str = "train",
    out_dir: str | Path | None = None,
    log=None,
) -> TrainResult:
    """Train a fresh detector; writes ``checkpoint.bin`` and ``loss_trace.txt`` when ``out_dir`` is given.

    Raises TrainingDivergence with the step index on a non-finite loss or gradient.
    """
    ids = dataset.ids(split)
    if not ids:
        raise ValueError(f"dataset split {split!r} is empty")
    params = ParamStore(seed=cfg.seed, precision=cfg.precision)
    det = Detector(params, neck, num_classes=dataset.classes).build(dataset.image_size)
    images = load_split(dataset, ids, det.in_channels, params.dtype)
    gts = [dataset.boxes(i) for i in ids]
    velocity: dict[str, np.ndarray] = {}
    result = TrainResult(params)
    for step, batch in enumerate(batch_schedule(len(ids), cfg.steps, cfg.batch_size, cfg.seed), start=1):
        params.zero_grad()
        try:
            loss, parts = det.loss(ad.Tensor(images[batch]), [gts[j] for j in batch])
            ad.backward(loss)
        except NonFiniteError as exc:
            raise TrainingDivergence(step, str(exc)) from None
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergence(step, "loss")
        norm = sgd_step(params, velocity, cfg, lr_at(step, cfg))
        if not math.isfinite(norm):
            raise TrainingDivergence(step, "gradient norm")
        result.trace.append((step, value))
        if log is not None and (step == 1 or step % 50 == 0 or step == cfg.steps):
            log(f"step {step} loss {value:.4f} cls {parts['cls']:.4f} box {parts['box']:.4f} "
                f"ctr {parts['ctr']:.4f} pos {parts['num_pos']} lr {lr_at(step, cfg):.5f}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        params.save(out / "checkpoint.bin")
        (out / "loss_trace.txt").write_text(result.trace_text())
    return result


def predict_split(
    det: Detector,
    dataset: Dataset,
    ids: list[int],
    batch_size: int = 16,
    score_thresh: float = 0.05,
    iou_thresh: float = 0.6,
) -> dict[int, list[Detection]]:
    preds: dict[int, list[Detection]] = {}
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        x = load_split(dataset, chunk, det.in_channels, det.params.dtype)
        for image_id, dets in zip(chunk, det.predict(ad.Tensor(x), score_thresh=score_thresh, iou_thresh=iou_thresh)):
            preds[image_id] = dets
    return preds
