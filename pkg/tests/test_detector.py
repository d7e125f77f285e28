import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icafpn import autodiff as ad
from icafpn.autodiff import ParamStore, Tensor
from icafpn.data import GroundTruthBox
from icafpn.detector import (
    Detector,
    HeadOutput,
    assign_targets,
    backbone_forward,
    centerness,
    decode_and_nms,
    detection_loss,
    level_ranges,
    locations,
    nms,
)
from icafpn.gradsuite import run_block
from icafpn.neck import NeckConfig

from oracles import brute_nms, naive_centerness

STRIDES = (8, 16, 32)


def test_backbone_stride_table():
    feats = backbone_forward(Tensor(np.zeros((1, 3, 128, 128))), ParamStore())
    assert {k: v.shape for k, v in feats.items()} == {
        2: (1, 16, 32, 32), 3: (1, 32, 16, 16), 4: (1, 64, 8, 8), 5: (1, 128, 4, 4)
    }


def test_backbone_rejects_indivisible_size():
    with pytest.raises(ValueError):
        backbone_forward(Tensor(np.zeros((1, 3, 100, 128))), ParamStore())


def test_backbone_deterministic(rng):
    x = Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32))
    a = backbone_forward(x, ParamStore(seed=3))
    b = backbone_forward(x, ParamStore(seed=3))
    for lvl in a:
        np.testing.assert_array_equal(a[lvl].data, b[lvl].data)


def test_backbone_gradcheck():
    # fixture from the gradient suite; its seed keeps pre-activations off the ReLU kinks
    result = run_block("backbone", seed=0)
    assert result.passed, result


# ---- targets --------------------------------------------------------------------------


def test_centerness_at_exact_center_is_one():
    assert centerness(5.0, 7.0, 5.0, 7.0) == 1.0
    assert naive_centerness(3, 2, 3, 2) == 1.0


@settings(max_examples=200, deadline=None)
@given(*(st.floats(0.01, 100) for _ in range(4)))
def test_centerness_range_and_equality_condition(l, t, r, b):
    c = float(centerness(l, t, r, b))
    assert 0.0 <= c <= 1.0
    assert math.isclose(c, naive_centerness(l, t, r, b), rel_tol=1e-12)
    if c == 1.0:
        assert math.isclose(l, r, rel_tol=1e-12) and math.isclose(t, b, rel_tol=1e-12)


def _shapes(size):
    return [(size // s, size // s) for s in STRIDES]


def test_empty_image_has_no_positives():
    targets = assign_targets([[]], _shapes(128), STRIDES, 128)
    assert all(not t.positive.any() for t in targets)


def _brute_assign(boxes, size):
    """Per level: {(i, j): box index} from the definition, pixel by pixel."""
    out = []
    for (lo, hi), s in zip(level_ranges(size), STRIDES):
        n = size // s
        level = {}
        for i in range(n):
            for j in range(n):
                cx, cy = j * s + s // 2, i * s + s // 2
                best = None
                for k, b in enumerate(boxes):
                    d = (cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy)
                    if min(d) > 0 and lo < max(d) <= hi and (best is None or b.area < boxes[best].area):
                        best = k
                if best is not None:
                    level[(i, j)] = best
        out.append(level)
    return out


@pytest.mark.parametrize(
    "boxes",
    [
        [GroundTruthBox(30, 40, 50, 60, 1)],
        [GroundTruthBox(3, 3, 23, 23, 0)],
        [GroundTruthBox(10, 10, 90, 70, 0), GroundTruthBox(20, 20, 40, 44, 1), GroundTruthBox(60, 8, 120, 100, 1)],
    ],
)
def test_assignment_matches_brute_force(boxes):
    targets = assign_targets([boxes], _shapes(128), STRIDES, 128)
    for t, want, s in zip(targets, _brute_assign(boxes, 128), STRIDES):
        got = {(int(i), int(j)) for i, j in zip(*np.nonzero(t.positive[0]))}
        assert got == set(want)
        for (i, j), k in want.items():
            assert t.cls[0, i, j] == boxes[k].class_id
            cx, cy = j * s + s // 2, i * s + s // 2
            b = boxes[k]
            np.testing.assert_array_equal(t.reg[0, :, i, j], [cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy])
            assert t.ctr[0, i, j] == pytest.approx(naive_centerness(*t.reg[0, :, i, j]), rel=1e-12)


def test_regression_ranges_scale_with_image():
    assert level_ranges(800) == [(0.0, 64.0), (64.0, 128.0), (128.0, math.inf)]
    assert level_ranges(128)[0] == (0.0, 64.0 * 0.16)


# ---- loss -------------------------------------------------------------------------------


def _head(rng, n, size, classes=2):
    cls = [Tensor(rng.normal(size=(n, classes, size // s, size // s))) for s in STRIDES]
    reg = [Tensor(np.exp(rng.normal(size=(n, 4, size // s, size // s))) * s) for s in STRIDES]
    ctr = [Tensor(rng.normal(size=(n, 1, size // s, size // s))) for s in STRIDES]
    return HeadOutput(cls, reg, ctr, STRIDES)


def _reference_loss(out, boxes, size, classes=2):
    """Loss from the written-out formulas, one location at a time."""
    alpha, gamma = 0.25, 2.0
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    assign = _brute_assign(boxes, size)
    focal, box_terms, ctr_terms = 0.0, [], []
    for lvl, s in enumerate(STRIDES):
        n = size // s
        for i in range(n):
            for j in range(n):
                k = assign[lvl].get((i, j))
                for c in range(classes):
                    p = sig(out.cls[lvl].data[0, c, i, j])
                    if k is not None and boxes[k].class_id == c:
                        focal += -alpha * (1 - p) ** gamma * math.log(p)
                    else:
                        focal += -(1 - alpha) * p**gamma * math.log(1 - p)
                if k is None:
                    continue
                b = boxes[k]
                cx, cy = j * s + s // 2, i * s + s // 2
                tl, tt, tr, tb = cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy
                pl, pt, pr, pb = out.reg[lvl].data[0, :, i, j]
                inter = (min(pl, tl) + min(pr, tr)) * (min(pt, tt) + min(pb, tb))
                union = (pl + pr) * (pt + pb) + (tl + tr) * (tt + tb) - inter
                box_terms.append(-math.log(inter / union))
                ct = naive_centerness(tl, tt, tr, tb)
                q = sig(out.ctr[lvl].data[0, 0, i, j])
                ctr_terms.append(-(ct * math.log(q) + (1 - ct) * math.log(1 - q)))
    npos = max(len(box_terms), 1)
    return (focal + sum(box_terms) + sum(ctr_terms)) / npos, len(box_terms)


def test_loss_matches_hand_computation_on_two_box_fixture(rng):
    boxes = [GroundTruthBox(8, 6, 30, 28, 0), GroundTruthBox(34, 20, 60, 62, 1)]
    out = _head(rng, 1, 64)
    targets = assign_targets([boxes], _shapes(64), STRIDES, 64)
    loss, parts = detection_loss(out, targets, 2)
    want, npos = _reference_loss(out, boxes, 64)
    assert parts["num_pos"] == npos > 0
    assert abs(loss.item() - want) <= 1e-6 * max(1.0, abs(want))


def test_all_negative_image_is_focal_only(rng):
    out = _head(rng, 1, 64)
    loss, parts = detection_loss(out, assign_targets([[]], _shapes(64), STRIDES, 64), 2)
    want, npos = _reference_loss(out, [], 64)
    assert npos == 0 and parts["box"] == 0.0 and parts["ctr"] == 0.0
    assert loss.item() == pytest.approx(want, rel=1e-9)


def test_perfect_boxes_give_zero_iou_loss(rng):
    boxes = [GroundTruthBox(8, 6, 30, 28, 0)]
    targets = assign_targets([boxes], _shapes(64), STRIDES, 64)
    out = _head(rng, 1, 64)
    for t, r in zip(targets, out.reg):
        r.data[:, :, :, :] = np.where(t.positive[:, None], t.reg, r.data)
    _, parts = detection_loss(out, targets, 2)
    assert parts["num_pos"] > 0 and abs(parts["box"]) < 1e-12


def test_loss_gradcheck(rng):
    boxes = [GroundTruthBox(8, 6, 30, 28, 0), GroundTruthBox(34, 20, 60, 62, 1)]
    out = _head(rng, 1, 64)
    targets = assign_targets([boxes], _shapes(64), STRIDES, 64)
    inputs = {f"{kind}{i}": t for kind in ("cls", "reg", "ctr") for i, t in enumerate(getattr(out, kind))}
    err, _ = ad.grad_check(lambda: detection_loss(out, targets, 2)[0], inputs, max_entries=40)
    assert err < 1e-6


# ---- NMS and decoding -------------------------------------------------------------------


def test_duplicate_boxes_suppressed():
    b = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
    assert nms(b, np.array([0.8, 0.9]), 0.5).tolist() == [1]


def test_disjoint_boxes_kept():
    b = np.array([[0, 0, 10, 10], [20, 20, 30, 30]], dtype=float)
    assert sorted(nms(b, np.array([0.8, 0.9]), 0.5).tolist()) == [0, 1]


@pytest.mark.parametrize("seed", range(20))
def test_nms_matches_brute_force_and_ignores_input_order(seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 40, size=(10, 2))
    wh = rng.uniform(5, 30, size=(10, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    scores = rng.choice([0.3, 0.5, 0.9], size=10) if seed % 2 else rng.uniform(size=10)
    keep = nms(boxes, scores, 0.5)
    assert keep.tolist() == brute_nms(boxes.tolist(), scores.tolist(), 0.5)
    perm = rng.permutation(10)
    keep_p = nms(boxes[perm], scores[perm], 0.5)
    assert sorted(map(tuple, boxes[perm][keep_p])) == sorted(map(tuple, boxes[keep]))


def test_decoded_boxes_valid_and_bounded(rng):
    out = _head(rng, 2, 64)
    for o in out.reg:
        o.data *= 3  # push many boxes past the image border
    dets = decode_and_nms(out, 64, score_thresh=0.0, iou_thresh=0.5)
    assert any(dets)
    for per_image in dets:
        assert len(per_image) <= 100
        for d in per_image:
            assert 0 <= d.x1 < d.x2 <= 64 and 0 <= d.y1 < d.y2 <= 64
            assert 0.0 <= d.score <= 1.0 and math.isfinite(d.score)


def test_decode_rejects_bad_thresholds(rng):
    with pytest.raises(ValueError):
        decode_and_nms(_head(rng, 1, 64), 64, score_thresh=1.5)


def test_locations_are_cell_centres():
    xs, ys = locations(2, 3, 8)
    assert xs[0].tolist() == [4.0, 12.0, 20.0] and ys[:, 0].tolist() == [4.0, 12.0]


# ---- detector wrapper -----------------------------------------------------------------


def test_detector_end_to_end_shapes_and_params():
    det = Detector(ParamStore(seed=0), NeckConfig(width=12), num_classes=2).build(64)
    out = det.forward(Tensor(np.zeros((2, 3, 64, 64), dtype=np.float32)))
    assert [t.shape for t in out.cls] == [(2, 2, 8, 8), (2, 2, 4, 4), (2, 2, 2, 2)]
    assert [t.shape for t in out.reg] == [(2, 4, 8, 8), (2, 4, 4, 4), (2, 4, 2, 2)]
    assert (np.concatenate([t.data.ravel() for t in out.reg]) >= 0).all()
    base = Detector(ParamStore(seed=0), NeckConfig(width=12, variant="fpn-baseline")).build(64)
    assert det.params.count() > base.params.count()
