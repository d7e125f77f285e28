"""Desk-scale anchor-free detector: conv backbone, neck, FCOS-style head, losses, decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor
from .data import GroundTruthBox
from .metrics import Detection, iou_matrix
from .neck import LEVELS, NeckConfig, icaf_fpn_forward

BACKBONE_WIDTHS = (16, 32, 64, 128)
STEM_WIDTH = 8
# FCOS regression ranges for P3-P5 at 800px, rescaled to the input size
FCOS_RANGES = ((0.0, 64.0), (64.0, 128.0), (128.0, math.inf))
FOCAL_ALPHA, FOCAL_GAMMA = 0.25, 2.0
PRIOR_PROB = 0.01
REG_LOGIT_CLIP = 10.0


class TrainingDivergence(FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"loss became non-finite at step {step}{': ' + detail if detail else ''}")
        self.step = step


@dataclass
class HeadOutput:
    """Per level (3, 4, 5): class logits, (l, t, r, b) distances in pixels, centerness logits."""

    cls: list[Tensor]
    reg: list[Tensor]
    ctr: list[Tensor]
    strides: tuple[int, ...] = (8, 16, 32)


@dataclass
class LevelTargets:
    cls: np.ndarray  # (n, h, w) class id, -1 for background
    reg: np.ndarray  # (n, 4, h, w)
    ctr: np.ndarray  # (n, h, w)

    @property
    def positive(self) -> np.ndarray:
        return self.cls >= 0


def backbone_forward(image: Tensor, params: ParamStore, widths=BACKBONE_WIDTHS, name: str = "backbone"):
    """Image (n, c, H, W) -> {2: C2, 3: C3, 4: C4, 5: C5} at strides 4, 8, 16, 32."""
    h, w = image.shape[2:]
    if h % 32 or w % 32:
        raise ValueError(f"image size {h}x{w} must be divisible by 32")
    x = ad.relu(nn.conv(image, params, f"{name}.stem", STEM_WIDTH, k=3, stride=2))
    feats = {}
    for lvl, width in zip((2, 3, 4, 5), widths):
        x = ad.relu(nn.conv(x, params, f"{name}.c{lvl}.down", width, k=3, stride=2))
        x = ad.relu(nn.conv(x, params, f"{name}.c{lvl}.conv", width, k=3))
        feats[lvl] = x
    return feats


def head_forward(feats, params: ParamStore, num_classes: int, strides=(8, 16, 32), name: str = "head") -> HeadOutput:
    """Shared FCOS-style head; distances are stride * exp(scale_l * raw)."""
    cls_out, reg_out, ctr_out = [], [], []
    bias = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
    for lvl, p, stride in zip(LEVELS, feats, strides):
        width = p.shape[1]
        ct = ad.relu(nn.conv(p, params, f"{name}.cls_tower", width, k=3))
        rt = ad.relu(nn.conv(p, params, f"{name}.reg_tower", width, k=3))
        cls_out.append(nn.conv(ct, params, f"{name}.cls", num_classes, k=3, bias_init=bias))
        raw = nn.conv(rt, params, f"{name}.reg", 4, k=3)
        scale = params.get(f"{name}.scale{lvl}", (1,), 1.0)
        reg_out.append(ad.exp(ad.clip(raw * scale, -REG_LOGIT_CLIP, REG_LOGIT_CLIP)) * float(stride))
        ctr_out.append(nn.conv(rt, params, f"{name}.ctr", 1, k=3))
    return HeadOutput(cls_out, reg_out, ctr_out, tuple(strides))


# ---- targets ---------------------------------------------------------------------


def level_ranges(image_size: int) -> list[tuple[float, float]]:
    s = image_size / 800.0
    return [(lo * s, hi * s) for lo, hi in FCOS_RANGES]


def locations(h: int, w: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre image coordinates (xs, ys) of an h x w level grid."""
    xs = np.arange(w) * stride + stride // 2
    ys = np.arange(h) * stride + stride // 2
    return np.meshgrid(xs.astype(np.float64), ys.astype(np.float64))


def centerness(l, t, r, b):
    return np.sqrt((np.minimum(l, r) / np.maximum(l, r)) * (np.minimum(t, b) / np.maximum(t, b)))


def assign_targets(
    gts: list[list[GroundTruthBox]], shapes: list[tuple[int, int]], strides, image_size: int
) -> list[LevelTargets]:
    """FCOS assignment: a location is positive for the smallest box that contains it
    and whose max regression distance falls in the level's range (lo, hi]."""
    n = len(gts)
    ranges = level_ranges(image_size)
    out = []
    for (h, w), stride, (lo, hi) in zip(shapes, strides, ranges):
        cls = -np.ones((n, h, w), dtype=np.int64)
        reg = np.zeros((n, 4, h, w))
        ctr = np.zeros((n, h, w))
        xs, ys = locations(h, w, stride)
        for i, boxes in enumerate(gts):
            best_area = np.full((h, w), np.inf)
            for b in boxes:
                l, t, r, bt = xs - b.x1, ys - b.y1, b.x2 - xs, b.y2 - ys
                m = np.maximum.reduce([l, t, r, bt])
                ok = (np.minimum.reduce([l, t, r, bt]) > 0) & (m > lo) & (m <= hi) & (b.area < best_area)
                best_area[ok] = b.area
                cls[i][ok] = b.class_id
                for k, d in enumerate((l, t, r, bt)):
                    reg[i, k][ok] = d[ok]
            pos = cls[i] >= 0
            ctr[i][pos] = centerness(reg[i, 0][pos], reg[i, 1][pos], reg[i, 2][pos], reg[i, 3][pos])
        out.append(LevelTargets(cls, reg, ctr))
    return out


# ---- loss -------------------------------------------------------------------------


def _flatten(t: Tensor) -> Tensor:
    """(n, c, h, w) -> (n*h*w, c)."""
    n, c, h, w = t.shape
    return t.transpose(0, 2, 3, 1).reshape(n * h * w, c)


def detection_loss(out: HeadOutput, targets: list[LevelTargets], num_classes: int) -> tuple[Tensor, dict]:
    """Focal (class) + -log IoU (box) + BCE (centerness), positives-normalised."""
    cls_logits = ad.concat([_flatten(t) for t in out.cls], axis=0)
    reg = ad.concat([_flatten(t) for t in out.reg], axis=0)
    ctr = ad.concat([_flatten(t) for t in out.ctr], axis=0).reshape(-1)
    cls_t = np.concatenate([t.cls.reshape(-1) for t in targets])
    reg_t = np.concatenate([t.reg.transpose(0, 2, 3, 1).reshape(-1, 4) for t in targets])
    ctr_t = np.concatenate([t.ctr.reshape(-1) for t in targets])
    pos = np.nonzero(cls_t >= 0)[0]
    num_pos = len(pos)
    dtype = cls_logits.dtype

    onehot = np.zeros(cls_logits.shape, dtype=dtype)
    onehot[pos, cls_t[pos]] = 1.0
    p = ad.sigmoid(cls_logits)
    pos_term = ad.log_sigmoid(cls_logits) * ad.power(1 - p, FOCAL_GAMMA) * (-FOCAL_ALPHA * onehot)
    neg_term = ad.log_sigmoid(-cls_logits) * ad.power(p, FOCAL_GAMMA) * (-(1 - FOCAL_ALPHA) * (1 - onehot))
    focal = (pos_term + neg_term).sum() * (1.0 / max(num_pos, 1))

    if num_pos == 0:
        return focal, {"cls": focal.item(), "box": 0.0, "ctr": 0.0, "num_pos": 0}

    pr = reg[pos]
    tr = reg_t[pos].astype(dtype)
    pl, pt, prr, pb = (pr[:, k] for k in range(4))
    tl, tt, trr, tb = (tr[:, k] for k in range(4))
    area_p = (pl + prr) * (pt + pb)
    area_t = (tl + trr) * (tt + tb)
    iw = ad.minimum(pl, tl) + ad.minimum(prr, trr)
    ih = ad.minimum(pt, tt) + ad.minimum(pb, tb)
    inter = iw * ih
    iou = inter / (area_p + area_t - inter)
    box = -(ad.log(iou).sum()) * (1.0 / num_pos)

    c_logit = ctr[pos]
    c_t = ctr_t[pos].astype(dtype)
    bce = -(ad.log_sigmoid(c_logit) * c_t + ad.log_sigmoid(-c_logit) * (1 - c_t)).sum() * (1.0 / num_pos)

    total = focal + box + bce
    return total, {"cls": focal.item(), "box": box.item(), "ctr": bce.item(), "num_pos": num_pos}


# ---- decoding -----------------------------------------------------------------------


def _order_key(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # descending score, then x1, y1, x2, y2 ascending
    return np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in priority order.  A box is dropped when
    its IoU with a kept box exceeds ``iou_thresh``."""
    order = _order_key(boxes, scores)
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_thresh
    return np.array(keep, dtype=np.int64)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode_and_nms(
    out: HeadOutput,
    image_size: int,
    score_thresh: float = 0.05,
    iou_thresh: float = 0.6,
    pre_nms: int = 1000,
    max_dets: int = 100,
) -> list[list[Detection]]:
    """Per image: score = sqrt(p_class * p_centerness), per-class NMS, top ``max_dets``."""
    if not (0 <= score_thresh <= 1 and 0 <= iou_thresh <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    n = out.cls[0].shape[0]
    results = []
    for i in range(n):
        boxes, scores, classes = [], [], []
        for cls_t, reg_t, ctr_t, stride in zip(out.cls, out.reg, out.ctr, out.strides):
            h, w = cls_t.shape[2:]
            xs, ys = locations(h, w, stride)
            prob = _sigmoid(cls_t.data[i].astype(np.float64))
            cent = _sigmoid(ctr_t.data[i, 0].astype(np.float64))
            score = np.sqrt(prob * cent[None])
            k_idx, y_idx, x_idx = np.nonzero(score >= score_thresh)
            if len(k_idx) > pre_nms:
                top = np.argsort(-score[k_idx, y_idx, x_idx], kind="stable")[:pre_nms]
                k_idx, y_idx, x_idx = k_idx[top], y_idx[top], x_idx[top]
            d = reg_t.data[i].astype(np.float64)[:, y_idx, x_idx]
            cx, cy = xs[y_idx, x_idx], ys[y_idx, x_idx]
            bx = np.stack([cx - d[0], cy - d[1], cx + d[2], cy + d[3]], axis=1)
            boxes.append(np.clip(bx, 0, image_size))
            scores.append(score[k_idx, y_idx, x_idx])
            classes.append(k_idx)
        b = np.concatenate(boxes)
        s = np.concatenate(scores)
        c = np.concatenate(classes)
        valid = (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
        b, s, c = b[valid], s[valid], c[valid]
        kept = []
        for k in np.unique(c):
            idx = np.nonzero(c == k)[0]
            kept.extend(idx[nms(b[idx], s[idx], iou_thresh)])
        kept = np.array(kept, dtype=np.int64)
        if len(kept):
            kept = kept[_order_key(b[kept], s[kept])][:max_dets]
        results.append([Detection(*map(float, b[j]), score=float(s[j]), class_id=int(c[j])) for j in kept])
    return results


# ---- model wrapper -------------------------------------------------------------------


@dataclass
class Detector:
    params: ParamStore
    neck: NeckConfig
    num_classes: int = 2
    in_channels: int = 3

    def forward(self, images: Tensor) -> HeadOutput:
        feats = backbone_forward(images, self.params)
        pyramid = icaf_fpn_forward(feats, self.params, self.neck)
        return head_forward(pyramid, self.params, self.num_classes)

    def loss(self, images: Tensor, gts: list[list[GroundTruthBox]]) -> tuple[Tensor, dict]:
        out = self.forward(images)
        shapes = [t.shape[2:] for t in out.cls]
        targets = assign_targets(gts, shapes, out.strides, images.shape[2])
        return detection_loss(out, targets, self.num_classes)

    def predict(self, images: Tensor, **kw) -> list[list[Detection]]:
        with ad.no_grad():
            out = self.forward(images)
        return decode_and_nms(out, images.shape[2], **kw)

    def build(self, image_size: int = 128) -> "Detector":
        """Materialise all parameters with a dummy forward pass."""
        with ad.no_grad():
            self.forward(ad.Tensor(np.zeros((1, self.in_channels, image_size, image_size), dtype=self.params.dtype)))
        return self
