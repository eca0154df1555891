import json
from types import SimpleNamespace

import numpy as np
import pytest

from navseg.geometry import Polygon, rasterize
from navseg.metrics import (
    EvalConfig,
    ExistenceLabel,
    InputMismatchError,
    PredictionRecord,
    SampleEval,
    UndefinedMetricError,
    accuracy,
    evaluate,
    existence_from_count,
    existence_outcome,
    load_predictions,
    msiou,
    precision_at_k,
    sample_iou,
    save_predictions,
    save_report,
    siou_at_k,
)

NO = ExistenceLabel.NO_TARGET
SINGLE = ExistenceLabel.SINGLE_TARGET
MULTI = ExistenceLabel.MULTI_TARGET

SQUARE = Polygon(np.array([[0.1, 0.1], [0.6, 0.1], [0.6, 0.6], [0.1, 0.6]]))
QUARTER_A = Polygon(np.array([[0.0, 0.0], [0.5, 0.0], [0.5, 0.5], [0.0, 0.5]]))
QUARTER_B = Polygon(np.array([[0.5, 0.5], [1.0, 0.5], [1.0, 1.0], [0.5, 1.0]]))


def se(outcome, iou=None, sid="s"):
    gt_pos = outcome in ("TP", "FN")
    pred_pos = outcome in ("TP", "FP")
    if iou is None:
        iou = {"TP": 1.0, "TN": 1.0, "FP": 0.0, "FN": 0.0}[outcome]
    return SampleEval(sample_id=sid, gt_positive=gt_pos, pred_positive=pred_pos, outcome=outcome, iou=iou)


def gt_sample(sid, polys):
    return SimpleNamespace(id=sid, existence=existence_from_count(len(polys)), gt_polygons=polys)


# ---------------------------------------------------------------------------
# existence outcome
# ---------------------------------------------------------------------------

def test_outcome_single_vs_multi_is_tp():
    assert existence_outcome(SINGLE, MULTI) == "TP"


def test_outcome_no_no_is_tn():
    assert existence_outcome(NO, NO) == "TN"


def test_outcome_multi_vs_no_is_fn():
    assert existence_outcome(MULTI, NO) == "FN"


def test_sample_eval_invariants_enforced():
    with pytest.raises(ValueError):
        SampleEval("x", gt_positive=False, pred_positive=False, outcome="TN", iou=0.3)
    with pytest.raises(ValueError):
        SampleEval("x", gt_positive=True, pred_positive=False, outcome="FN", iou=0.2)
    with pytest.raises(ValueError):
        SampleEval("x", gt_positive=True, pred_positive=True, outcome="TN", iou=1.0)


# ---------------------------------------------------------------------------
# sample IoU
# ---------------------------------------------------------------------------

def test_sample_iou_identical():
    assert sample_iou([SQUARE], [SQUARE], raster=(64, 64)) == 1.0


def test_sample_iou_half_of_disjoint_pair():
    # oracle: count pixels directly on the rasters
    gt_mask = rasterize([QUARTER_A, QUARTER_B], 64, 64)
    pred_mask = rasterize([QUARTER_A], 64, 64)
    inter = int(np.logical_and(gt_mask.bits, pred_mask.bits).sum())
    union = int(np.logical_or(gt_mask.bits, pred_mask.bits).sum())
    assert (inter, union) == (1024, 2048)
    got = sample_iou([QUARTER_A, QUARTER_B], [QUARTER_A], raster=(64, 64))
    assert got == inter / union == 0.5


def test_sample_iou_empty_vs_empty():
    assert sample_iou([], [], raster=(32, 32)) == 1.0


# ---------------------------------------------------------------------------
# sIoU@k
# ---------------------------------------------------------------------------

def test_siou_tp_scales_and_caps():
    assert siou_at_k("TP", 0.25, 2) == 0.5


def test_siou_tn_is_one():
    assert siou_at_k("TN", 0.123, 7) == 1.0


def test_siou_fp_is_zero():
    assert siou_at_k("FP", 0.9, 1) == 0.0


def test_siou_monotone_and_dominates_iou():
    for iou in np.linspace(0, 1, 11):
        prev = -1.0
        for k in range(1, 11):
            val = siou_at_k("TP", float(iou), k)
            assert val >= prev
            assert val >= iou
            prev = val
    for k in range(1, 11):
        vals = [siou_at_k("TP", float(i), k) for i in np.linspace(0, 1, 21)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# msIoU
# ---------------------------------------------------------------------------

def test_msiou_perfect_tp():
    assert msiou([se("TP", 1.0)], 0.1) == 1.0


def test_msiou_small_iou_k_half():
    # k = 1, 2: mean(min(0.05,1), min(0.10,1)) = 0.075
    assert msiou([se("TP", 0.05)], 0.5) == pytest.approx(0.075, abs=1e-15)


def test_msiou_always_no_target_on_benchmark_distribution():
    samples = [se("FN", sid=f"p{i}") for i in range(502)] + [se("TN", sid=f"n{i}") for i in range(256)]
    for k in (0.1, 0.2, 0.33, 1.0):
        assert msiou(samples, k) == pytest.approx(256 / 758, abs=1e-9)


def test_msiou_k_one_is_plain_mean():
    samples = [se("TP", 0.3), se("TP", 0.8), se("TN"), se("FN")]
    expected = np.mean([siou_at_k(s.outcome, s.iou, 1) for s in samples])
    assert msiou(samples, 1.0) == pytest.approx(expected, abs=1e-15)


def test_msiou_equals_accuracy_when_tp_iou_is_one():
    samples = [se("TP", 1.0), se("TP", 1.0), se("TN"), se("FP"), se("FN")]
    assert msiou(samples, 0.1) == pytest.approx(accuracy(samples), abs=1e-15)


def test_msiou_positive_only_reduction():
    samples = [se("TP", 0.12), se("TP", 0.4), se("TP", 0.77)]
    k_max = 10
    expected = np.mean([
        np.mean([min(k * s.iou, 1.0) for s in samples]) for k in range(1, k_max + 1)
    ])
    assert msiou(samples, 0.1) == pytest.approx(expected, abs=1e-12)


def test_msiou_bounded_and_empty_raises():
    rng = np.random.default_rng(0)
    samples = [se(rng.choice(["TP", "TN", "FP", "FN"]), iou=None) for _ in range(40)]
    assert 0.0 <= msiou(samples, 0.1) <= 1.0
    with pytest.raises(UndefinedMetricError):
        msiou([], 0.1)


# ---------------------------------------------------------------------------
# P@K and accuracy
# ---------------------------------------------------------------------------

def test_precision_literal_formula():
    samples = [se("TP", 0.05), se("TP", 0.15), se("TN"), se("FN")]
    assert precision_at_k(samples, 0.1) == 0.5


def test_precision_all_tn():
    assert precision_at_k([se("TN") for _ in range(5)], 0.3) == 1.0


def test_precision_all_fp():
    assert precision_at_k([se("FP") for _ in range(5)], 0.1) == 0.0


def test_precision_non_increasing_in_k():
    rng = np.random.default_rng(1)
    samples = [se("TP", float(rng.random())) for _ in range(60)]
    values = [precision_at_k(samples, k) for k in (0.1, 0.2, 0.3, 0.5, 0.8)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_accuracy_benchmark_confusion_counts():
    samples = (
        [se("TP", 0.5, sid=f"tp{i}") for i in range(359)]
        + [se("TN", sid=f"tn{i}") for i in range(175)]
        + [se("FP", sid=f"fp{i}") for i in range(81)]
        + [se("FN", sid=f"fn{i}") for i in range(143)]
    )
    assert accuracy(samples) == pytest.approx(534 / 758, abs=1e-12)


def test_accuracy_extremes():
    assert accuracy([se("TP", 0.1)] * 3) == 1.0
    assert accuracy([se("FN")] * 3) == 0.0
    with pytest.raises(UndefinedMetricError):
        accuracy([])


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def make_split():
    return [
        gt_sample("a", [SQUARE]),
        gt_sample("b", []),
        gt_sample("c", [QUARTER_A, QUARTER_B]),
    ]


def perfect_predictions(split):
    return {
        s.id: PredictionRecord(s.id, s.existence, list(s.gt_polygons)) for s in split
    }


def test_evaluate_perfect():
    split = make_split()
    report = evaluate(split, perfect_predictions(split), EvalConfig(raster_width=64, raster_height=64))
    assert report.msiou == 1.0
    assert report.accuracy == 1.0
    assert all(v == 1.0 for v in report.p_at_k.values())
    assert report.confusion == {"tp": 2, "tn": 1, "fp": 0, "fn": 0}
    assert report.n == 3


def test_evaluate_always_no_target_distribution():
    split = [gt_sample(f"p{i}", [SQUARE]) for i in range(502)] + [
        gt_sample(f"n{i}", []) for i in range(256)
    ]
    preds = {s.id: PredictionRecord(s.id, NO, []) for s in split}
    report = evaluate(split, preds, EvalConfig(raster_width=64, raster_height=64))
    assert report.accuracy == pytest.approx(256 / 758, abs=1e-12)
    assert report.msiou == pytest.approx(256 / 758, abs=1e-9)


def test_evaluate_id_mismatch():
    split = make_split()
    preds = perfect_predictions(split)
    preds["zz"] = preds.pop("a")
    preds["zz"].sample_id = "zz"
    with pytest.raises(InputMismatchError) as err:
        evaluate(split, preds)
    assert "a" in err.value.offending_ids and "zz" in err.value.offending_ids


def test_evaluate_order_invariant():
    split = make_split()
    preds = perfect_predictions(split)
    cfg = EvalConfig(raster_width=32, raster_height=32)
    fwd = evaluate(split, preds, cfg)
    rev = evaluate(list(reversed(split)), preds, cfg)
    assert [s.sample_id for s in fwd.per_sample] == [s.sample_id for s in rev.per_sample]
    assert fwd.to_dict() == rev.to_dict()


# ---------------------------------------------------------------------------
# file round trips
# ---------------------------------------------------------------------------

def test_prediction_file_roundtrip(tmp_path):
    recs = [
        PredictionRecord("a", SINGLE, [SQUARE]),
        PredictionRecord("b", NO, []),
    ]
    path = tmp_path / "preds.jsonl"
    save_predictions(recs, path)
    loaded = load_predictions(path)
    assert set(loaded) == {"a", "b"}
    assert loaded["a"].existence is SINGLE
    np.testing.assert_allclose(loaded["a"].polygons[0].vertices, SQUARE.vertices)


def test_prediction_file_duplicate_ids(tmp_path):
    path = tmp_path / "preds.jsonl"
    line = PredictionRecord("a", NO, []).to_json_line()
    path.write_text(line + "\n" + line + "\n")
    with pytest.raises(InputMismatchError):
        load_predictions(path)


def test_report_file_contains_conventions(tmp_path):
    split = make_split()
    report = evaluate(split, perfect_predictions(split), EvalConfig(raster_width=32, raster_height=32))
    out = tmp_path / "report.json"
    save_report(report, out)
    doc = json.loads(out.read_text())
    assert doc["conventions"]["empty_empty_iou"] == 1.0
    assert doc["config"]["eval.msiou_k"] == 0.1
    assert len(doc["per_sample"]) == 3
