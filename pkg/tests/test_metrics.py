"""Metrics: AP against a naive exhaustive oracle, relaxed-accuracy rules."""

import numpy as np
import pytest

from chartlab import metrics as M
from chartlab.metrics import Detection, GroundTruth


def rect_mask(h, w, r0, c0, r1, c1):
    m = np.zeros((h, w), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


# -- naive exhaustive oracle ---------------------------------------------------


def naive_ap(dets, gts, thresh):
    """Prefix-exhaustive AP: re-run greedy matching from scratch for every
    top-k prefix, then take the interpolated-precision mean over the fixed
    recall grid. Structurally different from the production path."""
    if not gts:
        return None
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    precisions, recalls = [], []
    for k in range(1, len(order) + 1):
        matched = set()
        tp = 0
        for di in order[:k]:
            det = dets[di]
            best, best_gi = 0.0, -1
            for gi, gt in enumerate(gts):
                if gi in matched or gt.image_id != det.image_id:
                    continue
                inter = np.logical_and(det.mask, gt.mask).sum()
                union = np.logical_or(det.mask, gt.mask).sum()
                iou = inter / union if union else 0.0
                if iou > best:
                    best, best_gi = iou, gi
            if best_gi >= 0 and best >= thresh:
                matched.add(best_gi)
                tp += 1
        precisions.append(tp / k)
        recalls.append(tp / len(gts))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        cands = [p for p, rc in zip(precisions, recalls) if rc >= r]
        total += max(cands) if cands else 0.0
    return total / 101.0


def random_instance(r, n_images=3, n_dets=8, n_gts=5, n_cats=3, size=16):
    gts, dets = [], []
    for _ in range(n_gts):
        img = int(r.integers(0, n_images))
        cat = int(r.integers(1, n_cats + 1))
        r0, c0 = r.integers(0, size - 6, size=2)
        hh, ww = r.integers(3, 6, size=2)
        gts.append(GroundTruth(img, cat, rect_mask(size, size, r0, c0, r0 + hh, c0 + ww)))
    for _ in range(n_dets):
        if r.random() < 0.6 and gts:
            base = gts[int(r.integers(0, len(gts)))]
            shift = int(r.integers(0, 3))
            mask = np.roll(base.mask, shift, axis=1)
            dets.append(Detection(base.image_id, base.category_id, float(r.random()), mask))
        else:
            img = int(r.integers(0, n_images))
            cat = int(r.integers(1, n_cats + 1))
            r0, c0 = r.integers(0, size - 6, size=2)
            hh, ww = r.integers(3, 6, size=2)
            dets.append(Detection(img, cat, float(r.random()),
                                  rect_mask(size, size, r0, c0, r0 + hh, c0 + ww)))
    return dets, gts


# -- average precision ----------------------------------------------------------


def test_ap_single_perfect_detection():
    mask = rect_mask(8, 8, 1, 1, 5, 5)
    dets = [Detection(0, 1, 0.9, mask)]
    gts = [GroundTruth(0, 1, mask.copy())]
    assert M.average_precision(dets, gts, 0.5) == pytest.approx(1.0)


def test_ap_no_detections_is_zero():
    gts = [GroundTruth(0, 1, rect_mask(8, 8, 0, 0, 4, 4))]
    assert M.average_precision([], gts, 0.5) == 0.0


def test_ap_no_ground_truth_is_undefined():
    dets = [Detection(0, 1, 0.5, rect_mask(8, 8, 0, 0, 4, 4))]
    assert M.average_precision(dets, [], 0.5) is None


def test_ap_two_gts_one_hit_one_miss():
    g1 = rect_mask(16, 16, 1, 1, 6, 6)
    g2 = rect_mask(16, 16, 9, 9, 14, 14)
    gts = [GroundTruth(0, 1, g1), GroundTruth(0, 1, g2)]
    dets = [
        Detection(0, 1, 0.9, g1.copy()),                      # perfect
        Detection(0, 1, 0.8, rect_mask(16, 16, 0, 9, 3, 12)),  # disjoint from both
    ]
    ap = M.average_precision(dets, gts, 0.5)
    # PR curve: precision 1.0 up to recall 0.5 -> 51 of 101 grid points
    assert ap == pytest.approx(51 / 101)
    assert ap == pytest.approx(0.5, abs=0.01)
    assert ap == pytest.approx(naive_ap(dets, gts, 0.5))


def test_ap_monotone_in_iou_threshold():
    r = np.random.default_rng(5)
    dets, gts = random_instance(r)
    last = 1.1
    for t in (0.5, 0.6, 0.75, 0.9):
        ap = M.average_precision(dets, gts, t)
        assert ap <= last + 1e-12
        last = ap


def test_ap_equal_score_tie_break_is_input_order():
    g = rect_mask(8, 8, 2, 2, 6, 6)
    gts = [GroundTruth(0, 1, g)]
    bad = rect_mask(8, 8, 0, 0, 2, 2)
    dets_a = [Detection(0, 1, 0.5, g.copy()), Detection(0, 1, 0.5, bad)]
    dets_b = [Detection(0, 1, 0.5, bad), Detection(0, 1, 0.5, g.copy())]
    ap_a = M.average_precision(dets_a, gts, 0.5)
    ap_b = M.average_precision(dets_b, gts, 0.5)
    assert ap_a == pytest.approx(1.0)   # hit ranked first
    assert ap_b == pytest.approx(0.5)   # miss ranked first caps precision at 1/2
    assert ap_a == pytest.approx(naive_ap(dets_a, gts, 0.5))
    assert ap_b == pytest.approx(naive_ap(dets_b, gts, 0.5))


# -- map suite -------------------------------------------------------------------


def test_map_suite_perfect_three_categories():
    gts, dets = [], []
    for cat in (1, 2, 3):
        m = rect_mask(16, 16, cat, cat, cat + 5, cat + 5)
        gts.append(GroundTruth(0, cat, m))
        dets.append(Detection(0, cat, 0.9, m.copy()))
    report = M.map_suite(dets, gts)
    assert report.map == pytest.approx(1.0)
    assert report.map50 == pytest.approx(1.0)
    assert report.map75 == pytest.approx(1.0)
    assert len(report.per_category) == 3


def test_map_suite_map_bounded_by_map50():
    r = np.random.default_rng(6)
    for _ in range(10):
        dets, gts = random_instance(r)
        report = M.map_suite(dets, gts)
        assert report.map <= report.map50 + 1e-12


def test_map_suite_empty_gt_rejected():
    with pytest.raises(M.MetricsError):
        M.map_suite([], [])


def test_map_suite_matches_naive_oracle():
    r = np.random.default_rng(7)
    for trial in range(30):
        dets, gts = random_instance(r, n_images=int(r.integers(1, 4)),
                                    n_dets=int(r.integers(0, 9)),
                                    n_gts=int(r.integers(1, 6)))
        report = M.map_suite(dets, gts)
        cats = sorted({g.category_id for g in gts})
        for t, field in ((0.5, report.map50), (0.75, report.map75)):
            oracle = np.mean([
                naive_ap([d for d in dets if d.category_id == c],
                         [g for g in gts if g.category_id == c], t)
                for c in cats
            ])
            assert abs(field - oracle) < 1e-9, f"trial {trial} thresh {t}"


def test_map_suite_ignores_categories_without_gt():
    m = rect_mask(8, 8, 1, 1, 5, 5)
    gts = [GroundTruth(0, 1, m)]
    dets = [Detection(0, 1, 0.9, m.copy()), Detection(0, 2, 0.99, m.copy())]
    report = M.map_suite(dets, gts)
    assert report.map50 == pytest.approx(1.0)
    assert list(report.per_category) == ["1"]


# -- relaxed accuracy --------------------------------------------------------------


@pytest.mark.parametrize("pred,gold,expected", [
    ("34", "33", True),        # 3.03% off
    ("35", "33", False),       # 6.06% off
    ("33", "33", True),
    ("105", "100", True),      # exactly 5%: boundary inclusive
    ("105.001", "100", False),
    ("95", "100", True),
    ("94.999", "100", False),
    ("0", "0", True),
    ("0.001", "0", False),     # gold 0 demands exact 0
    ("female presidents", "Female Presidents", True),
    ("  Female Presidents ", "female presidents", True),
    ("female president", "female presidents", False),
    ("$42", "42", True),
    ("42%", "42", True),
    ("%42", "42", True),
    ("41", "42%", True),       # 2.4% off after stripping
    ("five", "5", False),      # mixed numeric/text falls to string rule
    ("-10", "-10.4", True),
    ("12.5", "12", True),      # 4.17% off
])
def test_relaxed_accuracy_truth_table(pred, gold, expected):
    assert M.relaxed_accuracy(pred, gold) is expected


def test_relaxed_accuracy_case_symmetric():
    assert M.relaxed_accuracy("ABC def", "abc DEF")
    assert M.relaxed_accuracy("abc DEF", "ABC def")
