import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semod.datakit.records import Box
from semod.errors import ValidationError
from semod.evalkit import (
    ClassificationReport,
    Detection,
    aggregate_folds,
    average_precision,
    average_recall,
    classification_report,
    iou,
    match_detections,
    pooled_detection_metrics,
)
from semod.taxonomy import FineLabel

A = FineLabel.SEXUAL_ACTIVITY
P = FineLabel.SEXUAL_POSING
N = FineLabel.NEUTRAL


def det(x0, y0, x1, y1, conf, cls="person"):
    return Detection(box=Box(x0, y0, x1, y1), class_id=cls, confidence=conf)


boxes_strategy = st.builds(
    lambda x, y, w, h: Box(x, y, x + w, y + h),
    st.floats(0, 50, allow_nan=False),
    st.floats(0, 50, allow_nan=False),
    st.floats(0.5, 30, allow_nan=False),
    st.floats(0.5, 30, allow_nan=False),
)


# -- iou ----------------------------------------------------------------------


def test_iou_identical():
    box = Box(3.0, 4.0, 10.0, 12.0)
    assert iou(box, box) == 1.0


def test_iou_disjoint():
    assert iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0


def test_iou_partial_overlap_arithmetic():
    # Intersection 1x2 = 2, union 4 + 4 - 2 = 6.
    assert iou(Box(0, 0, 2, 2), Box(1, 0, 3, 2)) == pytest.approx(2 / 6, abs=1e-12)


@settings(max_examples=200)
@given(boxes_strategy, boxes_strategy)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-12)


# -- matching -----------------------------------------------------------------


def test_match_single_exact():
    gt = [Box(0, 0, 10, 10)]
    result = match_detections([det(0, 0, 10, 10, 0.9)], gt, 0.5)
    assert result.tp_flags == (True,)
    assert result.unmatched_gt == 0


def test_match_two_preds_one_gt():
    # Protocol trace: higher confidence wins the GT, the other is a FP.
    gt = [Box(0, 0, 10, 10)]
    preds = [det(0, 0, 10, 10, 0.6), det(1, 0, 10, 10, 0.8)]
    result = match_detections(preds, gt, 0.5)
    assert result.order == (1, 0)
    assert result.tp_flags == (True, False)


def test_match_no_preds():
    result = match_detections([], [Box(0, 0, 5, 5), Box(6, 6, 9, 9)], 0.5)
    assert result.tp_flags == ()
    assert result.unmatched_gt == 2


def test_match_never_double_assigns():
    rng = np.random.default_rng(0)
    for _ in range(50):
        gts = [
            Box(x, y, x + 5, y + 5)
            for x, y in rng.uniform(0, 40, (int(rng.integers(1, 4)), 2))
        ]
        preds = [
            det(x, y, x + 5, y + 5, float(rng.random()))
            for x, y in rng.uniform(0, 40, (int(rng.integers(0, 6)), 2))
        ]
        result = match_detections(preds, gts, 0.5)
        assigned = [j for j in result.matched_gt if j is not None]
        assert len(assigned) == len(set(assigned))
        assert sum(result.tp_flags) + result.unmatched_gt == len(gts)


# -- average precision --------------------------------------------------------


def test_ap_perfect():
    gts = [Box(0, 0, 10, 10), Box(20, 20, 30, 30)]
    preds = [det(0, 0, 10, 10, 0.9), det(20, 20, 30, 30, 0.8)]
    assert average_precision(preds, gts) == 1.0


def test_ap_no_detections():
    assert average_precision([], [Box(0, 0, 10, 10)]) == 0.0


def test_ap_order_dependence():
    gt = [Box(0, 0, 10, 10)]
    tp_first = [det(0, 0, 10, 10, 0.9), det(50, 50, 60, 60, 0.8)]
    fp_first = [det(0, 0, 10, 10, 0.8), det(50, 50, 60, 60, 0.9)]
    assert average_precision(tp_first, gt) == pytest.approx(1.0, abs=1e-12)
    assert average_precision(fp_first, gt) == pytest.approx(0.5, abs=1e-12)


def test_ap_confidence_scale_invariant():
    rng = np.random.default_rng(1)
    gts = [Box(0, 0, 10, 10), Box(20, 0, 30, 10), Box(40, 0, 50, 10)]
    preds = [
        det(x, 0, x + 10, 10, float(c))
        for x, c in zip((0, 20, 40, 60, 80), rng.uniform(0.2, 0.9, 5))
    ]
    base_ap = average_precision(preds, gts)
    base_ar = average_recall(preds, gts)
    scaled = [
        Detection(d.box, d.class_id, d.confidence * 0.5) for d in preds
    ]
    assert average_precision(scaled, gts) == pytest.approx(base_ap, abs=1e-12)
    assert average_recall(scaled, gts) == pytest.approx(base_ar, abs=1e-12)


# -- average recall -----------------------------------------------------------


def test_ar_all_matched():
    gts = [Box(0, 0, 10, 10)]
    assert average_recall([det(0, 0, 10, 10, 0.7)], gts) == 1.0


def test_ar_none_matched():
    assert average_recall([det(50, 50, 60, 60, 0.7)], [Box(0, 0, 10, 10)]) == 0.0


def test_ar_half_matched():
    gts = [Box(0, 0, 10, 10), Box(30, 30, 40, 40)]
    assert average_recall([det(0, 0, 10, 10, 0.7)], gts) == 0.5


def test_ar_coco_range_averages_thresholds():
    # One prediction at IoU ~0.6 with its GT: counted for thresholds
    # 0.5-0.6 only, so the range average is strictly lower.
    gts = [Box(0, 0, 10, 10)]
    preds = [det(0, 0, 10, 12.5, 0.9)]  # IoU = 100/125 = 0.8
    single = average_recall(preds, gts, iou_threshold=0.5)
    ranged = average_recall(preds, gts, coco_range=True)
    assert single == 1.0
    assert ranged == pytest.approx(7 / 10)  # thresholds 0.50..0.80 hit


def test_ar_respects_max_dets():
    gts = [Box(0, 0, 10, 10)]
    preds = [det(50, 50, 60, 60, 0.9), det(0, 0, 10, 10, 0.1)]
    assert average_recall(preds, gts, max_dets=1) == 0.0
    assert average_recall(preds, gts, max_dets=2) == 1.0


# -- classification report ----------------------------------------------------


def test_report_all_correct():
    labels = [A, P, N, A]
    report = classification_report(labels, labels)
    assert report.accuracy_binary == 1.0
    assert report.f1_binary == 1.0
    assert all(v == 1.0 for v in report.tpr_per_fine_class.values())


def test_report_posing_for_activity_keeps_binary_right():
    # Hand confusion: posing prediction is still SE, so binary stays 1.0
    # while the activity TPR drops to zero.
    report = classification_report([P, N], [A, N])
    assert report.accuracy_binary == 1.0
    assert report.tpr_per_fine_class[A] == 0.0
    assert report.tpr_per_fine_class[P] is None
    assert report.confusion[0][1] == 1


def test_report_neutral_mislabeled():
    report = classification_report([A], [N])
    assert report.accuracy_binary == 0.0


def test_report_errors():
    with pytest.raises(ValidationError):
        classification_report([], [])
    with pytest.raises(ValidationError):
        classification_report([A], [A, N])


def test_binary_accuracy_never_below_fine_accuracy():
    rng = np.random.default_rng(7)
    labels = [A, P, N]
    for _ in range(200):
        n = int(rng.integers(1, 30))
        gts = [labels[i] for i in rng.integers(0, 3, n)]
        preds = [labels[i] for i in rng.integers(0, 3, n)]
        report = classification_report(preds, gts)
        assert report.accuracy_binary >= report.accuracy_fine - 1e-12


def test_confusion_rows_sum_to_class_counts():
    gts = [A, A, P, N, N, N]
    preds = [A, P, P, N, A, N]
    report = classification_report(preds, gts)
    assert [sum(row) for row in report.confusion] == [2, 1, 3]


# -- aggregation --------------------------------------------------------------


def _report(acc, f1=0.9):
    return ClassificationReport(
        accuracy_binary=acc,
        f1_binary=f1,
        tpr_per_fine_class={A: 0.5, P: 0.5, N: 0.5},
        confusion=((1, 0, 0), (0, 1, 0), (0, 0, 1)),
    )


def test_aggregate_single_report():
    mean, std = aggregate_folds([_report(0.8)])
    assert mean["accuracy"] == 0.8
    assert std["accuracy"] == 0.0


def test_aggregate_two_reports():
    mean, std = aggregate_folds([_report(0.8), _report(0.9)])
    assert mean["accuracy"] == pytest.approx(0.85)


def test_aggregate_matches_independent_recomputation():
    rng = np.random.default_rng(11)
    accs = [float(a) for a in rng.uniform(0.5, 1.0, 10)]
    f1s = [float(f) for f in rng.uniform(0.5, 1.0, 10)]
    mean, std = aggregate_folds([_report(a, f) for a, f in zip(accs, f1s)])
    # Oracle: spreadsheet-style explicit sums.
    m = sum(accs) / len(accs)
    v = sum((a - m) ** 2 for a in accs) / len(accs)
    assert mean["accuracy"] == pytest.approx(m, abs=1e-12)
    assert std["accuracy"] == pytest.approx(v**0.5, abs=1e-12)
    assert mean["f1_score"] == pytest.approx(sum(f1s) / 10, abs=1e-12)


def test_aggregate_rejects_empty_and_mixed():
    with pytest.raises(ValidationError):
        aggregate_folds([])


def test_detection_report_per_class_and_means():
    from semod.evalkit import DetectionReport, detection_report

    perfect = ([det(0, 0, 10, 10, 0.9)], [Box(0, 0, 10, 10)])
    missed = ([], [Box(0, 0, 10, 10)])
    report = detection_report({"person": [perfect], "face": [missed]})
    assert report.per_class["person"] == {"ap_iou_0_5": 1.0, "ar": 1.0}
    assert report.per_class["face"] == {"ap_iou_0_5": 0.0, "ar": 0.0}
    assert report.ap_at_50 == pytest.approx(0.5)
    assert report.ar == pytest.approx(0.5)

    mean, std = aggregate_folds([report, DetectionReport(ap_at_50=1.0, ar=1.0)])
    assert mean["ap_iou_0_5"] == pytest.approx(0.75)
    assert std["ar"] == pytest.approx(0.25)


def test_aggregate_rejects_mixed_kinds():
    from semod.evalkit import DetectionReport

    with pytest.raises(ValidationError):
        aggregate_folds([_report(0.8), DetectionReport(ap_at_50=1.0, ar=1.0)])


def test_pooled_metrics_ground_truth_detector_is_perfect():
    samples = []
    rng = np.random.default_rng(3)
    for _ in range(5):
        gts = [
            Box(x, y, x + 6, y + 6)
            for x, y in rng.uniform(0, 40, (int(rng.integers(1, 4)), 2))
        ]
        preds = [det(b.x_min, b.y_min, b.x_max, b.y_max, 1.0) for b in gts]
        samples.append((preds, gts))
    ap, ar = pooled_detection_metrics(samples)
    assert ap == 1.0
    assert ar == 1.0
