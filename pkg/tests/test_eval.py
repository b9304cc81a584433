from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pediarr.evaluation import (METRIC_NAMES, MetricReport, class_compactness, confusion,
                                export_heatmap, export_similarity_series, macro_metrics,
                                per_class_metrics, read_similarity_series, write_compactness,
                                write_report)


def _naive_report(cm) -> dict[str, float]:
    """Per-class recount from expanded (true, pred) pairs with plain Python arithmetic."""
    c = len(cm)
    pairs = [(t, p) for t in range(c) for p in range(c) for _ in range(int(cm[t][p]))]
    per = {k: [] for k in ("spec", "p", "r", "f1", "f2")}
    for k in range(c):
        tp = sum(1 for t, p in pairs if t == k and p == k)
        fp = sum(1 for t, p in pairs if t != k and p == k)
        fn = sum(1 for t, p in pairs if t == k and p != k)
        tn = sum(1 for t, p in pairs if t != k and p != k)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        per["spec"].append(tn / (tn + fp) if tn + fp else 0.0)
        per["p"].append(prec)
        per["r"].append(rec)
        per["f1"].append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        per["f2"].append(5 * prec * rec / (4 * prec + rec) if prec + rec else 0.0)
    mean = {k: 100.0 * sum(v) / c for k, v in per.items()}
    acc = 100.0 * sum(1 for t, p in pairs if t == p) / len(pairs)
    return {"top1_acc": acc, "macro_specificity": mean["spec"], "macro_precision": mean["p"],
            "macro_recall": mean["r"], "macro_f1": mean["f1"], "macro_f2": mean["f2"]}


def _random_cms(n, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        c = int(rng.integers(2, 7))
        cm = rng.integers(0, 12, (c, c)) * (rng.random((c, c)) < 0.7)
        if cm.sum() == 0:
            cm[0, 0] = 1
        yield cm


def test_confusion_examples():
    labels = np.array([1, 2, 3, 4, 5, 6, 1, 2])
    np.testing.assert_array_equal(confusion(labels, labels), np.diag([2, 2, 1, 1, 1, 1]))
    cm = confusion(np.ones(8, int), labels)
    assert np.count_nonzero(cm[:, 1:]) == 0 and cm[:, 0].sum() == 8
    rng = np.random.default_rng(1)
    t, p = rng.integers(1, 7, 100), rng.integers(1, 7, 100)
    cm = confusion(p, t)
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(t - 1, minlength=6))
    assert cm.sum() == 100


def test_confusion_errors():
    with pytest.raises(ValueError):
        confusion([1, 7], [1, 1])
    with pytest.raises(ValueError):
        confusion([1], [1, 2])


def test_perfect_matrix_gives_hundred():
    rep = macro_metrics(np.diag([5, 3, 1, 1, 2, 9]))
    assert all(v == 100.0 for v in rep.as_dict().values())


def test_two_class_hand_example():
    rep = macro_metrics(np.array([[8, 2], [3, 7]]))
    assert rep.top1_acc == pytest.approx(75.0, abs=1e-12)
    pc = per_class_metrics(np.array([[8, 2], [3, 7]]))
    np.testing.assert_allclose(pc["precision"], [8 / 11, 7 / 9], atol=1e-15)
    np.testing.assert_allclose(pc["recall"], [0.8, 0.7], atol=1e-15)
    # F1 per class = 2TP / (2TP + FP + FN): 16/21 and 14/19
    assert rep.macro_f1 == pytest.approx(100 * (16 / 21 + 14 / 19) / 2, abs=1e-12)
    assert rep.macro_f1 == pytest.approx(74.92, abs=0.05)


def test_f2_equals_f1_when_precision_equals_recall():
    cm = np.array([[5, 1], [1, 5]])
    pc = per_class_metrics(cm)
    np.testing.assert_allclose(pc["precision"], pc["recall"])
    np.testing.assert_allclose(pc["f2"], pc["f1"], atol=1e-15)
    np.testing.assert_allclose(pc["f1"], pc["precision"], atol=1e-15)


def test_macro_metrics_match_naive_recount_on_random_matrices():
    for cm in _random_cms(200):
        got = macro_metrics(cm).as_dict()
        ref = _naive_report(cm.tolist())
        for k in METRIC_NAMES:
            assert abs(got[k] - ref[k]) <= 1e-12, (k, cm)


def test_macro_aggregates_permutation_invariant():
    rng = np.random.default_rng(3)
    for cm in _random_cms(50, seed=4):
        perm = rng.permutation(len(cm))
        a, b = macro_metrics(cm), macro_metrics(cm[np.ix_(perm, perm)])
        for k in METRIC_NAMES:
            assert getattr(a, k) == pytest.approx(getattr(b, k), abs=1e-12)
        pa, pb = per_class_metrics(cm), per_class_metrics(cm[np.ix_(perm, perm)])
        np.testing.assert_allclose(pa["f1"][perm], pb["f1"], atol=1e-15)


def test_f2_vs_f1_follows_recall_vs_precision():
    for cm in _random_cms(100, seed=5):
        pc = per_class_metrics(cm)
        for p, r, f1, f2 in zip(pc["precision"], pc["recall"], pc["f1"], pc["f2"]):
            if p + r == 0 or abs(r - p) < 1e-12:
                continue
            assert (f2 >= f1) == (r >= p)


def test_accuracy_is_one_minus_off_diagonal_mass():
    for cm in _random_cms(50, seed=6):
        off = cm.sum() - np.trace(cm)
        assert macro_metrics(cm).top1_acc == pytest.approx(100 * (1 - off / cm.sum()), abs=1e-12)


def test_zero_support_class_counts_as_zero():
    cm = np.array([[3, 0, 1], [0, 0, 0], [1, 0, 2]])
    pc = per_class_metrics(cm)
    assert pc["precision"][1] == 0 and pc["recall"][1] == 0 and pc["f1"][1] == 0
    assert macro_metrics(cm).macro_recall == pytest.approx(100 * (0.75 + 0 + 2 / 3) / 3)


def test_metric_ranges_and_empty_matrix():
    for cm in _random_cms(30, seed=7):
        assert all(0 <= v <= 100 for v in macro_metrics(cm).as_dict().values())
    with pytest.raises(ValueError):
        macro_metrics(np.zeros((3, 3), int))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=40))
def test_confusion_then_metrics_property(pairs):
    t = np.array([a for a, _ in pairs])
    p = np.array([b for _, b in pairs])
    cm = confusion(p, t, 4)
    got = macro_metrics(cm).as_dict()
    ref = _naive_report(cm.tolist())
    assert all(abs(got[k] - ref[k]) <= 1e-12 for k in METRIC_NAMES)


def test_report_formatting_half_up(tmp_path):
    rep = MetricReport(97.765, 99.0, 0.125, 12.3449, 100.0, 0.0)
    assert rep.to_text().splitlines()[:4] == ["top1_acc=97.77", "macro_specificity=99.00",
                                              "macro_precision=0.13", "macro_recall=12.34"]
    write_report(rep, np.eye(2, dtype=int), tmp_path / "r.txt")
    assert (tmp_path / "r.txt").read_text().endswith("confusion=1,0;0,1\n")


# ---------------------------------------------------------------------------
# compactness and exports


def test_compactness_identical_samples():
    z = np.tile([1.0, 2.0, -1.0], (4, 1))
    st_ = class_compactness(z, np.ones(4, int))
    np.testing.assert_allclose(st_.similarities[1], 1.0, atol=1e-15)
    assert st_.quartiles[1] == pytest.approx((1.0, 1.0, 1.0))


def test_compactness_antipodal_pair_is_flagged():
    z = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    st_ = class_compactness(z, np.array([1, 1, 2]))
    assert st_.flagged[1] == 2 and st_.similarities[1].size == 0
    assert st_.flagged[2] == 0


def test_compactness_matches_brute_force():
    rng = np.random.default_rng(8)
    z = rng.standard_normal((50, 8)) + 2.0
    labels = rng.integers(1, 4, 50)
    st_ = class_compactness(z, labels)
    for c in np.unique(labels):
        members = [z[i] for i in range(50) if labels[i] == c]
        centroid = [sum(v[d] for v in members) / len(members) for d in range(8)]
        cn = sum(x * x for x in centroid) ** 0.5
        ref = [sum(v[d] * centroid[d] for d in range(8)) / (sum(x * x for x in v) ** 0.5 * cn)
               for v in members]
        np.testing.assert_allclose(st_.similarities[int(c)], ref, atol=1e-12)
        assert st_.quartiles[int(c)][1] == pytest.approx(float(np.median(ref)), abs=1e-12)
        assert np.all(np.abs(st_.similarities[int(c)]) <= 1 + 1e-12)


def test_compactness_export(tmp_path):
    st_ = class_compactness(np.eye(3) + 1, np.array([1, 1, 2]))
    write_compactness(st_, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "class,cosine_to_centroid" and len(lines) == 4


def test_similarity_series_rows_and_round_trip(tmp_path):
    snaps = [np.eye(2), np.array([[1.0, -0.25], [-0.25, 0.9]])]
    export_similarity_series(snaps, tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()[1:]
    assert len(rows) == 8
    off = [r for r in rows if r.startswith("0,") and r.split(",")[1] != r.split(",")[2]]
    assert all(float(r.split(",")[3]) == 0.0 for r in off)
    back = read_similarity_series(tmp_path / "s.csv")
    assert len(back) == 2
    for a, b in zip(snaps, back):
        np.testing.assert_array_equal(a, b)
    rng = np.random.default_rng(9)
    snaps = [rng.uniform(-1, 1, (6, 6)) for _ in range(4)]
    export_similarity_series(snaps, tmp_path / "r.csv")
    for a, b in zip(snaps, read_similarity_series(tmp_path / "r.csv")):
        np.testing.assert_array_equal(a, b)


def test_similarity_series_errors(tmp_path):
    with pytest.raises(ValueError):
        export_similarity_series([], tmp_path / "x.csv")
    with pytest.raises(ValueError):
        export_similarity_series([np.eye(2), np.eye(3)], tmp_path / "x.csv")


def test_heatmap_export(tmp_path):
    S = np.random.default_rng(10).uniform(-1, 1, (6, 6))
    export_heatmap(S, tmp_path / "h.csv")
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "h.csv", delimiter=","), S)
