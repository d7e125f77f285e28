import json

import numpy as np
import pytest

from icafpn.data import AnnotationError, GroundTruthBox
from icafpn.metrics import (
    Detection,
    MetricReport,
    average_precision,
    evaluate,
    froc,
    froc_curve,
    iou,
    load_predictions,
    write_predictions,
)

from oracles import oracle_ap_family, oracle_froc_curve, oracle_sensitivity, random_scene

GT = GroundTruthBox(0, 0, 10, 10, 0)


def det(box, score=0.9, cls=0):
    return Detection(*box, score, cls)


# ---- IoU ----------------------------------------------------------------------------


def test_iou_examples():
    assert iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0  # touching edge
    assert iou((0, 0, 1, 1), (0.5, 0, 1.5, 1)) == pytest.approx(1 / 3, abs=1e-15)


# ---- fixed AP examples -----------------------------------------------------------------


def test_perfect_single_match():
    ap = average_precision({0: [det(GT.box)]}, {0: [GT]})
    assert ap["AP50"] == 1.0 and ap["AP75"] == 1.0 and ap["AP"] == 1.0


def test_iou_gate_between_thresholds():
    pred = det((0, 0, 10, 6))
    assert iou(pred.box, GT.box) == pytest.approx(0.6)
    ap = average_precision({0: [pred]}, {0: [GT]})
    assert ap["AP50"] == 1.0 and ap["AP75"] == 0.0


def test_half_recall_gives_51_of_101():
    gts = {0: [GT, GroundTruthBox(50, 50, 60, 60, 0)]}
    assert average_precision({0: [det(GT.box)]}, gts)["AP50"] == 51 / 101


def test_empty_gt_conventions():
    with_preds = evaluate({0: [det(GT.box)]}, {}, [0])
    assert with_preds.AP == 0.0 and with_preds.warnings
    neither = evaluate({}, {}, [0])
    assert neither.AP is None and neither.mFROC is None and neither.warnings


# ---- oracle equivalence ------------------------------------------------------------------


def _assert_matches_oracle(preds, gts, ids, tol=1e-9):
    got, want = average_precision(preds, gts, ids), oracle_ap_family(preds, gts, ids)
    for key, w in want.items():
        if w is None:
            assert got[key] is None or not any(gts.values()), key
        else:
            assert abs(got[key] - w) <= tol, (key, got[key], w)
    fpi, sens = froc_curve(preds, gts, ids)
    ofpi, osens = oracle_froc_curve(preds, gts, ids)
    np.testing.assert_allclose(fpi, ofpi, rtol=0, atol=tol)
    np.testing.assert_allclose(sens, osens, rtol=0, atol=tol)
    if any(gts.values()):
        report = froc(preds, gts, ids)
        for f, v in report["sensitivity"].items():
            assert abs(v - oracle_sensitivity(ofpi, osens, f)) <= tol


@pytest.mark.parametrize("seed", range(20))
def test_matches_oracle_on_random_scenes(seed):
    rng = np.random.default_rng(seed)
    for _ in range(5):
        _assert_matches_oracle(*random_scene(rng))


@pytest.mark.parametrize("seed", range(5))
def test_froc_matches_oracle_with_tied_scores(seed):
    rng = np.random.default_rng(1000 + seed)
    _assert_matches_oracle(*random_scene(rng, n_images=20, score_decimals=1))


# ---- properties -----------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_report_invariants(seed):
    preds, gts, ids = random_scene(np.random.default_rng(seed), n_images=6)
    if not any(gts.values()):
        pytest.skip("no ground truth in this draw")
    r = evaluate(preds, gts, ids)
    for key in ("AP", "AP50", "AP75", "mFROC"):
        assert 0.0 <= getattr(r, key) <= 1.0
    assert r.AP50 >= r.AP75
    assert abs(r.mFROC - sum(r.sensitivity.values()) / 4) <= 1e-12
    values = [r.sensitivity[k] for k in ("0.5", "1", "2", "4")]
    assert values == sorted(values)
    fpi, sens = np.array(r.froc_curve).T
    assert (np.diff(fpi) >= 0).all() and (np.diff(sens) >= 0).all()


@pytest.mark.parametrize("factor", [0.5, 1e-3])
def test_score_rescaling_changes_nothing(factor):
    preds, gts, ids = random_scene(np.random.default_rng(7), n_images=8)
    scaled = {i: [Detection(*d.box, d.score * factor, d.class_id) for d in v] for i, v in preds.items()}
    a, b = evaluate(preds, gts, ids), evaluate(scaled, gts, ids)
    for key in ("AP", "AP50", "AP75", "APS", "APM", "APL", "mFROC"):
        assert getattr(a, key) == getattr(b, key)


def test_perfect_detector_froc():
    gts = {i: [GroundTruthBox(5 * i, 0, 5 * i + 4, 4, i % 2)] for i in range(4)}
    preds = {i: [det(g.box, 1.0, g.class_id) for g in v] for i, v in gts.items()}
    r = froc(preds, gts, list(gts))
    assert all(v == 1.0 for v in r["sensitivity"].values()) and r["mFROC"] == 1.0


def test_empty_predictions_froc():
    r = froc({}, {0: [GT]}, [0])
    assert all(v == 0.0 for v in r["sensitivity"].values()) and r["mFROC"] == 0.0


def test_froc_is_class_aware():
    r = froc({0: [det(GT.box, cls=1)]}, {0: [GT]}, [0])
    assert r["sensitivity"][0.5] == 0.0


def test_froc_linear_interpolation():
    # one TP at score 0.9, then two FPs at 0.8 and 0.7 on a single image: fpi (0, 0, 1, 2), sens (0, 0.5, 0.5, 0.5)
    gts = {0: [GT, GroundTruthBox(50, 50, 60, 60, 0)]}
    preds = {0: [det(GT.box, 0.9), det((80, 80, 90, 90), 0.8), det((20, 20, 30, 30), 0.7)]}
    fpi, sens = froc_curve(preds, gts, [0])
    assert fpi.tolist() == [0.0, 0.0, 1.0, 2.0] and sens.tolist() == [0.0, 0.5, 0.5, 0.5]
    # a late TP lifts sensitivity at 1 FP/image; the 0.5 budget interpolates between two points at 0.5
    preds[0].append(det((50, 50, 60, 60), 0.75))
    fpi, sens = froc_curve(preds, gts, [0])
    assert fpi.tolist() == [0.0, 0.0, 1.0, 1.0, 2.0] and sens.tolist() == [0.0, 0.5, 0.5, 1.0, 1.0]
    assert froc(preds, gts, [0])["sensitivity"][0.5] == 0.5


# ---- serialisation -------------------------------------------------------------------------


def test_report_json_round_trip_and_determinism():
    preds, gts, ids = random_scene(np.random.default_rng(3), n_images=5)
    a = evaluate(preds, gts, ids).to_json()
    assert a == evaluate(preds, gts, ids).to_json()
    assert MetricReport.from_json(a).to_json() == a
    assert json.loads(a)["froc_interpolation"] == "linear"


def test_prediction_file_round_trip(tmp_path):
    preds, _, _ = random_scene(np.random.default_rng(4), n_images=4)
    path = tmp_path / "p.txt"
    write_predictions(path, preds)
    back = load_predictions(path)
    assert {k: v for k, v in preds.items() if v} == back


def test_prediction_file_errors_name_the_line(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("# header\n0,0,0.5,1,1,4,4\n0,0,0.5,5,1,4,4\n")
    with pytest.raises(AnnotationError, match="line 3"):
        load_predictions(path)
    path.write_text("0,0,0.5,1,1\n")
    with pytest.raises(AnnotationError, match="line 1"):
        load_predictions(path)
