import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitoseg.evaluation import (
    ClsReport,
    Detection,
    MatchResult,
    SingleClass,
    balanced_accuracy,
    detection_report,
    f1_from_pr,
    match_detections,
    micro_f1,
    pr_curve,
    threshold_sweep,
)
from oracles import all_matchings, ba_dense, matching_bruteforce

coords = st.lists(st.tuples(st.floats(0, 60), st.floats(0, 60)), max_size=6)


# --------------------------------------------------------------------------- matching

def test_boundary_inclusive():
    assert match_detections([(15.0, 0.0)], [(0.0, 0.0)], spacing_um=0.5).tp == 1


def test_just_outside():
    r = match_detections([(15.2, 0.0)], [(0.0, 0.0)], spacing_um=0.5)
    assert (r.tp, r.fp, r.fn) == (0, 1, 1)


def test_empty_sides():
    assert (match_detections([], [(1, 1)], 0.5).fn, match_detections([(1, 1)], [], 0.5).fp) == (1, 1)


def test_greedy_would_fail():
    # greedy nearest-first pairs (9, 5) and strands the other two
    preds = [(9.0, 0.0), (0.0, 0.0)]
    gts = [(5.0, 0.0), (16.0, 0.0)]
    r = match_detections(preds, gts, spacing_um=1.0)
    assert r.tp == 2


def test_line_instances_vs_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n_p, n_g = rng.integers(0, 11, size=2)
        preds = [(x, 0.0) for x in rng.uniform(0, 100, n_p)]
        gts = [(x, 0.0) for x in rng.uniform(0, 100, n_g)]
        r = match_detections(preds, gts, spacing_um=1.0)
        top, dist = matching_bruteforce(preds, gts, 1.0, 7.5)
        assert r.tp == top
        assert sum(d for *_, d in r.pairs) == pytest.approx(dist, abs=1e-9)


def test_small_instances_vs_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(30):
        preds = rng.uniform(0, 20, size=(4, 2))
        gts = rng.uniform(0, 20, size=(3, 2))
        best = 0
        for m in all_matchings(4, 3):
            if all(np.hypot(*(preds[p] - gts[g])) <= 7.5 for p, g in m):
                best = max(best, len(m))
        assert match_detections(preds, gts, 1.0).tp == best


@settings(max_examples=100, deadline=None)
@given(coords, coords)
def test_matching_invariants(preds, gts):
    r = match_detections(preds, gts, spacing_um=0.5)
    assert r.tp + r.fn == len(gts) and r.tp + r.fp == len(preds)
    assert r.tp == len(r.pairs)
    assert len({p for p, _, _ in r.pairs}) == r.tp == len({g for _, g, _ in r.pairs})
    assert all(d <= 7.5 for *_, d in r.pairs)
    assert match_detections(gts, preds, spacing_um=0.5).tp == r.tp


def test_detection_score_range():
    with pytest.raises(ValueError):
        Detection(0, 0, 1.2)


def test_bad_spacing():
    with pytest.raises(ValueError):
        match_detections([], [], 0.0)


# --------------------------------------------------------------------------- F1

def test_f1_table_rows():
    assert round(f1_from_pr(0.8264, 0.7139), 4) == 0.7660
    assert round(f1_from_pr(0.8932, 0.7076), 4) == 0.7896


def test_f1_zero_flag():
    rep = micro_f1([MatchResult(0, 0, 0)])
    assert (rep.precision, rep.recall, rep.f1, rep.zero_denominator) == (0, 0, 0, True)


def test_f1_pooling():
    rep = micro_f1([MatchResult(3, 1, 2), MatchResult(1, 0, 0)])
    assert (rep.tp, rep.fp, rep.fn) == (4, 1, 2)
    assert rep.precision == 0.8 and rep.recall == pytest.approx(4 / 6)
    assert not rep.zero_denominator


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(*[st.integers(0, 20)] * 3), min_size=1, max_size=5),
       st.lists(st.tuples(*[st.integers(0, 20)] * 3), min_size=1, max_size=5))
def test_pooling_associative(a, b):
    ra = [MatchResult(*t) for t in a]
    rb = [MatchResult(*t) for t in b]
    both = micro_f1(ra + rb)
    pa, pb = micro_f1(ra), micro_f1(rb)
    assert (both.tp, both.fp, both.fn) == (pa.tp + pb.tp, pa.fp + pb.fp, pa.fn + pb.fn)


def test_detection_report_layout():
    results = [MatchResult(2, 1, 0, case_id="a"), MatchResult(0, 0, 1, case_id="b")]
    rep = detection_report(results, {"a": 0, "b": 1})
    assert rep["pooled"]["tp"] == 2 and len(rep["per_case"]) == 2
    assert set(rep["per_domain"]) == {"0", "1"}
    assert rep["per_domain"]["1"]["recall"] == 0.0


def test_pr_curve_matches_rematching():
    dets = [[Detection(0, 0, 0.9), Detection(50, 50, 0.4)], [Detection(3, 0, 0.7)]]
    gts = [[(1, 0)], [(3, 1), (40, 40)]]
    curve = pr_curve(dets, gts, spacing_um=0.5)
    assert [t for t, _, _ in curve] == [0.9, 0.7, 0.4]
    assert curve[0][1:] == (1.0, pytest.approx(1 / 3))
    assert curve[1][1:] == (1.0, pytest.approx(2 / 3))
    assert curve[2][1:] == (pytest.approx(2 / 3), pytest.approx(2 / 3))


# --------------------------------------------------------------------------- balanced accuracy

def test_ba_table_rows():
    assert round(0.5 * (0.9155 + 0.7682), 5) == 0.84185
    assert round(0.5 * (0.8627 + 0.8893), 4) == 0.8760


def test_ba_counts():
    rep = balanced_accuracy([0.1, 0.6, 0.59, 0.8], [0, 1, 1, 0], 0.59)
    assert isinstance(rep, ClsReport)
    assert (rep.tp, rep.fn, rep.tn, rep.fp) == (2, 0, 1, 1)
    assert rep.balanced_accuracy == (rep.sensitivity + rep.specificity) / 2 == 0.75


def test_ba_perfect():
    for t in (0.2, 0.5, 0.9):
        assert balanced_accuracy([0.1, 0.9], [0, 1], t).balanced_accuracy == 1.0


def test_ba_single_class_flag():
    rep = balanced_accuracy([0.2, 0.7], [1, 1], 0.5)
    assert rep.single_class and rep.specificity == 0.0 and rep.sensitivity == 0.5


def test_sweep_two_points():
    t, ba, _ = threshold_sweep([0.1, 0.9], [0, 1])
    assert t == 0.5 and ba == 1.0


def test_sweep_single_class():
    with pytest.raises(SingleClass):
        threshold_sweep([0.1, 0.4], [0, 0])


def test_sweep_vs_dense_grid():
    rng = np.random.default_rng(2)
    grid = np.linspace(0, 1, 1000)
    for _ in range(50):
        # scores on a 0.01 lattice, so every gap between adjacent scores holds a grid point
        scores = np.round(rng.random(20), 2)
        labels = rng.integers(0, 2, 20)
        if len(set(labels)) < 2:
            continue
        _, best, _ = threshold_sweep(scores, labels)
        assert abs(best - max(ba_dense(scores, labels, grid))) <= 1e-9


def test_sweep_ties_lowest():
    _, _, curve = threshold_sweep([0.2, 0.4, 0.6, 0.8], [0, 1, 0, 1])
    t, ba, _ = threshold_sweep([0.2, 0.4, 0.6, 0.8], [0, 1, 0, 1])
    assert t == min(x for x, b in curve if b == ba)


def test_sweep_adjacent_floats():
    lo = 0.25
    hi = np.nextafter(lo, 1.0)
    t, ba, _ = threshold_sweep([lo, hi], [0, 1])
    assert ba == 1.0 and lo < t <= hi


def test_sweep_flipped_labels():
    scores = np.linspace(0.05, 0.95, 10)
    labels = (scores < 0.5).astype(int)
    assert threshold_sweep(scores, labels)[1] >= 0.5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1000).map(lambda k: k / 1000), min_size=4, max_size=20), st.integers(0, 10 ** 6))
def test_sweep_monotone_invariant(scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, len(scores))
    labels[0], labels[1] = 0, 1
    s = np.asarray(scores)
    _, a, _ = threshold_sweep(s, labels)
    for transformed in (np.sqrt(s), 0.1 + 0.5 * s):
        assert threshold_sweep(transformed, labels)[1] == pytest.approx(a, abs=1e-12)
