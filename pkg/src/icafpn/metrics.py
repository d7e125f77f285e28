"""COCO-style AP family and FROC sensitivities."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import AnnotationError, GroundTruthBox

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
# j/100 by division so a recall of exactly 7/10 reaches the 0.70 point (linspace overshoots by an ulp)
RECALL_POINTS = np.arange(101) / 100
AREA_RANGES = {"all": (0.0, 1e10), "small": (0.0, 32.0**2), "medium": (32.0**2, 96.0**2), "large": (96.0**2, 1e10)}
FROC_POINTS = (0.5, 1.0, 2.0, 4.0)
MAX_DETS = 100


@dataclass(frozen=True)
class Detection:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float
    class_id: int = 0

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def write_predictions(path, preds: Mapping[int, Sequence[Detection]]) -> None:
    """One ``image_id,class_id,score,x1,y1,x2,y2`` line per detection (repr floats round-trip)."""
    lines = ["# image_id,class_id,score,x1,y1,x2,y2"]
    for image_id in sorted(preds):
        for d in preds[image_id]:
            lines.append(",".join([str(image_id), str(d.class_id)] + [repr(float(v)) for v in (d.score, *d.box)]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_predictions(path) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise AnnotationError(f"line {lineno}: expected 7 fields, got {len(parts)}: {line!r}")
        try:
            image_id, cls = int(parts[0]), int(parts[1])
            score, x1, y1, x2, y2 = (float(v) for v in parts[2:])
        except ValueError as exc:
            raise AnnotationError(f"line {lineno}: {exc}: {line!r}") from None
        if not (x1 < x2 and y1 < y2) or not np.isfinite(score):
            raise AnnotationError(f"line {lineno}: invalid detection: {line!r}")
        out.setdefault(image_id, []).append(Detection(x1, y1, x2, y2, score, cls))
    return out


def iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) box arrays."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def _sorted_dets(dets: Sequence[Detection]) -> list[Detection]:
    # stable: equal scores keep input order
    return sorted(dets, key=lambda d: -d.score)


# ---- AP ---------------------------------------------------------------------------


def _match_image(dets: list[Detection], gts: list[GroundTruthBox], area_rng, thresholds):
    """Greedy COCO matching for one image and class.

    Returns per-threshold arrays (matched, ignored) over ``dets`` and the GT
    ignore flags.  GTs outside the area range are ignored; detections matched
    to them, or unmatched and outside the range, are ignored too.
    """
    lo, hi = area_rng
    gt_ignore = np.array([not (lo <= g.area <= hi) for g in gts], dtype=bool)
    # non-ignored GTs first so they win matches
    gorder = np.argsort(gt_ignore, kind="stable")
    gts = [gts[i] for i in gorder]
    gt_ignore = gt_ignore[gorder]
    ious = iou_matrix(np.array([d.box for d in dets]).reshape(-1, 4), np.array([g.box for g in gts]).reshape(-1, 4))
    t_n, d_n, g_n = len(thresholds), len(dets), len(gts)
    dt_match = np.zeros((t_n, d_n), dtype=bool)
    dt_ignore = np.zeros((t_n, d_n), dtype=bool)
    for ti, t in enumerate(thresholds):
        gt_taken = np.zeros(g_n, dtype=bool)
        for di in range(d_n):
            best, m = min(t, 1 - 1e-10), -1
            for gi in range(g_n):
                if gt_taken[gi]:
                    continue
                # once a real GT is matched, stop before ignored ones
                if m > -1 and not gt_ignore[m] and gt_ignore[gi]:
                    break
                if ious[di, gi] < best:
                    continue
                best, m = ious[di, gi], gi
            if m == -1:
                continue
            gt_taken[m] = True
            dt_match[ti, di] = True
            dt_ignore[ti, di] = gt_ignore[m]
    det_out = np.array([not (lo <= d.area <= hi) for d in dets], dtype=bool)
    dt_ignore |= ~dt_match & det_out[None, :]
    return dt_match, dt_ignore, gt_ignore


def _interp_ap(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from score-sorted TP/FP flags."""
    tps, fps = np.cumsum(tp), np.cumsum(fp)
    recall = tps / n_gt
    precision = tps / np.maximum(tps + fps, np.finfo(np.float64).eps)
    # monotone envelope from the right
    for i in range(len(precision) - 1, 0, -1):
        if precision[i] > precision[i - 1]:
            precision[i - 1] = precision[i]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.array([precision[i] if i < len(precision) else 0.0 for i in idx])
    return float(q.mean())


def ap_table(
    preds: Mapping[int, Sequence[Detection]],
    gts: Mapping[int, Sequence[GroundTruthBox]],
    image_ids: Sequence[int] | None = None,
) -> dict[str, np.ndarray]:
    """AP per (IoU threshold, class) for every area range; -1 marks classes without GTs."""
    if image_ids is None:
        image_ids = sorted(set(preds) | set(gts))
    classes = sorted({g.class_id for v in gts.values() for g in v} | {d.class_id for v in preds.values() for d in v})
    table = {}
    for area_name, rng in AREA_RANGES.items():
        out = -np.ones((len(IOU_THRESHOLDS), len(classes)))
        for ci, c in enumerate(classes):
            scores, matched, ignored, n_gt = [], [], [], 0
            for img in image_ids:
                d = _sorted_dets([x for x in preds.get(img, ()) if x.class_id == c])[:MAX_DETS]
                g = [x for x in gts.get(img, ()) if x.class_id == c]
                if not d and not g:
                    continue
                m, ig, g_ig = _match_image(d, g, rng, IOU_THRESHOLDS)
                n_gt += int((~g_ig).sum())
                scores.append(np.array([x.score for x in d]))
                matched.append(m)
                ignored.append(ig)
            if n_gt == 0:
                continue
            s = np.concatenate(scores) if scores else np.zeros(0)
            order = np.argsort(-s, kind="mergesort")
            m_all = np.concatenate(matched, axis=1)[:, order] if matched else np.zeros((len(IOU_THRESHOLDS), 0), bool)
            i_all = np.concatenate(ignored, axis=1)[:, order] if ignored else np.zeros_like(m_all)
            for ti in range(len(IOU_THRESHOLDS)):
                keep = ~i_all[ti]
                tp = m_all[ti][keep]
                out[ti, ci] = _interp_ap(tp.astype(float), (~tp).astype(float), n_gt)
        table[area_name] = out
    return table


def _mean_valid(a: np.ndarray) -> float | None:
    v = a[a > -1]
    return float(v.mean()) if v.size else None


def average_precision(preds, gts, image_ids=None) -> dict[str, float | None]:
    """AP, AP50, AP75, APS, APM, APL (None where not applicable)."""
    n_gt = sum(len(v) for v in gts.values())
    n_pred = sum(len(v) for v in preds.values())
    keys = ("AP", "AP50", "AP75", "APS", "APM", "APL")
    if n_gt == 0:
        return {k: (0.0 if n_pred else None) for k in keys}
    t = ap_table(preds, gts, image_ids)
    i50 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.5)))
    i75 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.75)))
    return {
        "AP": _mean_valid(t["all"]),
        "AP50": _mean_valid(t["all"][i50]),
        "AP75": _mean_valid(t["all"][i75]),
        "APS": _mean_valid(t["small"]),
        "APM": _mean_valid(t["medium"]),
        "APL": _mean_valid(t["large"]),
    }


# ---- FROC ---------------------------------------------------------------------------


def froc_curve(preds, gts, image_ids: Sequence[int], iou_thresh: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Operating points (FPs per image, sensitivity), one per distinct score, from the origin.

    A detection is a true positive when it takes an unmatched GT of its class
    with IoU >= ``iou_thresh``; images are matched greedily by descending score.
    """
    n_gt = sum(len(gts.get(i, ())) for i in image_ids)
    scores, tps = [], []
    for img in image_ids:
        dets = _sorted_dets(preds.get(img, ()))
        g = list(gts.get(img, ()))
        taken = np.zeros(len(g), dtype=bool)
        ious = iou_matrix(np.array([d.box for d in dets]).reshape(-1, 4), np.array([x.box for x in g]).reshape(-1, 4))
        for di, d in enumerate(dets):
            best, m = iou_thresh, -1
            for gi, gt in enumerate(g):
                if taken[gi] or gt.class_id != d.class_id or ious[di, gi] < best:
                    continue
                best, m = ious[di, gi], gi
            if m >= 0:
                taken[m] = True
            scores.append(d.score)
            tps.append(m >= 0)
    s = np.array(scores, dtype=np.float64)
    tp = np.array(tps, dtype=bool)
    order = np.argsort(-s, kind="mergesort")
    s, tp = s[order], tp[order]
    ctp, cfp = np.cumsum(tp), np.cumsum(~tp)
    # one operating point per distinct score: the last index of each tie group
    last = np.r_[s[1:] != s[:-1], True] if len(s) else np.zeros(0, bool)
    fpi = np.r_[0.0, cfp[last] / max(len(image_ids), 1)]
    sens = np.r_[0.0, ctp[last] / n_gt] if n_gt else np.r_[0.0, np.zeros(int(last.sum()))]
    return fpi, sens


def sensitivity_at(fpi: np.ndarray, sens: np.ndarray, target: float) -> float:
    """Linear interpolation of the FROC curve at ``target`` FPs per image."""
    left = np.nonzero(fpi <= target)[0][-1]
    # highest sensitivity reached at the left FP level
    s_left = sens[left]
    right = left + 1
    if right >= len(fpi):
        return float(s_left)
    f0, f1 = fpi[left], fpi[right]
    return float(s_left + (sens[right] - s_left) * (target - f0) / (f1 - f0))


def froc(preds, gts, image_ids: Sequence[int], fps_points=FROC_POINTS) -> dict:
    n_gt = sum(len(gts.get(i, ())) for i in image_ids)
    fpi, sens = froc_curve(preds, gts, image_ids)
    if n_gt == 0:
        return {"sensitivity": {f: None for f in fps_points}, "mFROC": None, "curve": (fpi, sens)}
    values = {f: sensitivity_at(fpi, sens, f) for f in fps_points}
    return {"sensitivity": values, "mFROC": float(np.mean(list(values.values()))), "curve": (fpi, sens)}


# ---- report ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    AP: float | None
    AP50: float | None
    AP75: float | None
    APS: float | None
    APM: float | None
    APL: float | None
    sensitivity: dict[str, float | None]
    mFROC: float | None
    images: int
    gts: int
    predictions: int
    froc_interpolation: str = "linear"
    warnings: list[str] = field(default_factory=list)
    fusion_alpha: dict[str, list[float]] = field(default_factory=dict)
    froc_curve: list[list[float]] = field(default_factory=list)

    def to_json(self) -> str:
        def fmt(v):
            if isinstance(v, float):
                return round(v, 12)
            if isinstance(v, dict):
                return {k: fmt(x) for k, x in v.items()}
            if isinstance(v, list):
                return [fmt(x) for x in v]
            return v

        return json.dumps(fmt(asdict(self)), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def evaluate(preds, gts, image_ids: Sequence[int]) -> MetricReport:
    image_ids = list(image_ids)
    preds = {i: list(preds.get(i, ())) for i in image_ids}
    gts = {i: list(gts.get(i, ())) for i in image_ids}
    n_gt = sum(map(len, gts.values()))
    n_pred = sum(map(len, preds.values()))
    warnings = []
    if n_gt == 0:
        warnings.append("no ground-truth boxes" + ("; AP set to 0" if n_pred else "; metrics not applicable"))
    ap = average_precision(preds, gts, image_ids)
    fr = froc(preds, gts, image_ids)
    fpi, sens = fr["curve"]
    return MetricReport(
        **ap,
        sensitivity={f"{f:g}": v for f, v in fr["sensitivity"].items()},
        mFROC=fr["mFROC"],
        images=len(image_ids),
        gts=n_gt,
        predictions=n_pred,
        warnings=warnings,
        froc_curve=[[float(a), float(b)] for a, b in zip(fpi, sens)],
    )
