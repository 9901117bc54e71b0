import math

import numpy as np
import pytest
from sklearn.metrics import confusion_matrix as sk_confusion, f1_score

from nlbench import metrics
from nlbench.dataman import DatasetManifest, GroupingMap, Record
from nlbench.metrics import EmbeddingMatrix, MetricReport, RobustnessCurve


def test_macro_f1_perfect():
    assert metrics.macro_f1([0, 1, 2], [0, 1, 2], 3)[0] == 1.0


def test_macro_f1_hand_example():
    f1, per = metrics.macro_f1([0, 0, 1, 1], [0, 1, 1, 1], 2)
    np.testing.assert_allclose(per, [2 / 3, 4 / 5], atol=1e-15)
    assert f1 == pytest.approx(11 / 15, abs=1e-15)


def test_macro_f1_constant_predictor():
    labels = [0, 1, 2] * 10
    f1, _ = metrics.macro_f1([0] * 30, labels, 3)
    assert f1 == pytest.approx(1 / 6, abs=1e-15)


def test_macro_f1_absent_class_counts_zero():
    f1, per = metrics.macro_f1([0, 1], [0, 1], 3)
    assert per[2] == 0 and f1 == pytest.approx(2 / 3)


def test_macro_f1_length_mismatch():
    with pytest.raises(ValueError):
        metrics.macro_f1([0, 1], [0], 2)


def test_macro_f1_matches_sklearn_random():
    rng = np.random.default_rng(0)
    for _ in range(300):
        c = int(rng.integers(2, 6))
        n = int(rng.integers(1, 40))
        y, p = rng.integers(0, c, n), rng.integers(0, c, n)
        ref = f1_score(y, p, labels=list(range(c)), average="macro", zero_division=0)
        assert metrics.macro_f1(p, y, c)[0] == pytest.approx(ref, abs=1e-12)


def test_confusion_matrix():
    cm = metrics.confusion_matrix([0, 1, 1, 2], [0, 1, 2, 2], 3)
    np.testing.assert_array_equal(cm, sk_confusion([0, 1, 2, 2], [0, 1, 1, 2], labels=[0, 1, 2]))
    assert cm.sum() == 4
    np.testing.assert_array_equal(cm.sum(axis=1), [1, 1, 2])
    np.testing.assert_array_equal(metrics.confusion_matrix([0, 1], [0, 1], 2), np.eye(2))


def test_relabel_equivariance():
    rng = np.random.default_rng(1)
    y, p = rng.integers(0, 4, 100), rng.integers(0, 4, 100)
    perm = np.array([2, 0, 3, 1])
    cm = metrics.confusion_matrix(p, y, 4)
    cm2 = metrics.confusion_matrix(perm[p], perm[y], 4)
    np.testing.assert_array_equal(cm2[np.ix_(perm, perm)], cm)
    assert metrics.macro_f1(perm[p], perm[y], 4)[0] == pytest.approx(metrics.macro_f1(p, y, 4)[0], abs=1e-15)


def entry(epoch, v):
    return metrics.EpochMetrics(epoch, v, [v], [[1]])


def test_track_best_last():
    r = MetricReport()
    for i, v in enumerate([0.5, 0.9, 0.6, 0.6, 0.6, 0.6, 0.6]):
        metrics.track(r, entry(i, v))
    assert r.best == 0.9 and r.last == pytest.approx(0.6, abs=1e-15)


def test_track_single_and_monotone():
    r = metrics.track(MetricReport(), entry(0, 0.4))
    assert r.best == r.last == 0.4
    r = MetricReport()
    for i, v in enumerate(np.linspace(0.1, 0.9, 9)):
        metrics.track(r, entry(i, float(v)))
    assert r.best == pytest.approx(0.9) and r.last <= r.best


def test_track_rejects_out_of_order():
    r = metrics.track(MetricReport(), entry(3, 0.4))
    with pytest.raises(ValueError):
        metrics.track(r, entry(3, 0.5))


def test_track_incremental_equals_recompute():
    rng = np.random.default_rng(2)
    r = MetricReport()
    for i in range(40):
        metrics.track(r, entry(i, float(rng.random())))
        assert r.best == max(r.series)
        tail = r.series[-5:]
        assert r.last == sum(tail) / len(tail)


def test_robustness_hand_curve_exact():
    assert metrics.robustness_score([(0, 0.9), (0.2, 0.8), (0.4, 0.7)]).value == 10


def test_robustness_constant_curve_sentinel():
    res = metrics.robustness_score([(0, 0.8), (0.5, 0.8)])
    assert math.isinf(res.value) and res.flagged


def test_robustness_needs_zero_point():
    with pytest.raises(ValueError):
        metrics.robustness_score([(0.1, 0.8), (0.5, 0.7)])


def test_robustness_homogeneity():
    base = [(0, 0.9), (0.2, 0.85), (0.4, 0.7)]
    doubled = [(e, 0.9 - 2 * (0.9 - tp)) for e, tp in base]
    assert metrics.robustness_score(doubled).value == pytest.approx(metrics.robustness_score(base).value / 2)


def test_robustness_direct_oracle():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        tps = np.concatenate([[rng.uniform(0.5, 1)], rng.uniform(0, 0.5, k - 1)])
        curve = list(zip(np.linspace(0, 0.8, k), tps))
        direct = k / sum(tps[0] - t for t in tps)
        assert metrics.robustness_score(curve).value == pytest.approx(direct, rel=1e-12)


def test_fisher_identical_means_zero():
    x = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    assert metrics.fisher_css(EmbeddingMatrix(x, [0, 0, 1, 1])).value == 0


def scatter_oracle(x, y):
    classes = sorted(set(y.tolist()))
    n, c = len(y), len(classes)
    mu = x.mean(axis=0)
    sb = np.zeros((x.shape[1], x.shape[1]))
    sw = np.zeros_like(sb)
    for k in classes:
        xk = x[y == k]
        d = (xk.mean(axis=0) - mu)[:, None]
        sb += len(xk) * d @ d.T
        for row in xk:
            e = (row - xk.mean(axis=0))[:, None]
            sw += e @ e.T
    return (np.trace(sb) / (c - 1)) / (np.trace(sw) / (n - c))


def test_fisher_separable_vs_overlapping():
    rng = np.random.default_rng(4)
    n = 1000
    noise = rng.standard_normal(2 * n)
    y = np.repeat([0, 1], n)
    sep = np.where(y == 0, -5.0, 5.0) + noise
    ovl = np.where(y == 0, -0.5, 0.5) + noise
    s = metrics.fisher_css(EmbeddingMatrix(sep[:, None], y)).value
    o = metrics.fisher_css(EmbeddingMatrix(ovl[:, None], y)).value
    assert s == pytest.approx(scatter_oracle(sep[:, None], y), rel=1e-10)
    assert o == pytest.approx(scatter_oracle(ovl[:, None], y), rel=1e-10)
    assert s > 10 * o


def test_fisher_rotation_invariant():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((60, 4)) + np.repeat(rng.standard_normal((3, 4)) * 3, 20, axis=0)
    y = np.repeat([0, 1, 2], 20)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    a = metrics.fisher_css(EmbeddingMatrix(x, y)).value
    b = metrics.fisher_css(EmbeddingMatrix(x @ q, y)).value
    assert a == pytest.approx(b, rel=1e-10)


def test_fisher_grows_with_mean_scaling():
    rng = np.random.default_rng(6)
    y = np.repeat([0, 1, 2], 30)
    means = rng.standard_normal((3, 5))
    eps = rng.standard_normal((90, 5))
    prev = -1.0
    for scale in [0.5, 1.0, 2.0, 4.0]:
        x = np.repeat(means * scale, 30, axis=0) + eps
        v = metrics.fisher_css(EmbeddingMatrix(x, y)).value
        assert v > prev
        prev = v


def test_fisher_errors_and_sentinel():
    with pytest.raises(ValueError):
        EmbeddingMatrix(np.zeros((3, 2)), [0, 0, 1])
    res = metrics.fisher_css(EmbeddingMatrix(np.array([[0.0], [0.0], [1.0], [1.0]]), [0, 0, 1, 1]))
    assert math.isinf(res.value) and res.flagged


def test_fisher_random_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        c = int(rng.integers(2, 5))
        y = np.repeat(np.arange(c), rng.integers(2, 6))
        x = rng.standard_normal((len(y), int(rng.integers(1, 5))))
        assert metrics.fisher_css(EmbeddingMatrix(x, y)).value == pytest.approx(scatter_oracle(x, y), rel=1e-9)


def _manifest(name, counts):
    recs = []
    for k, n in enumerate(counts):
        recs += [Record(f"{k}_{i}", "p", k, "train") for i in range(n)]
        recs += [Record(f"t{k}", "p", k, "test")]
    return DatasetManifest(tuple(recs), tuple(f"c{k}" for k in range(len(counts))), name=name)


def test_difficulty_sweep_size_axis_caps():
    data = {"small": _manifest("small", [20, 20, 20]), "big": _manifest("big", [100, 100, 100])}
    table = metrics.difficulty_sweep(data, lambda m: len(m.train) / 1000, axis="size",
                                     values=[30, 60, 200], num_folds=2)
    got = {(r["dataset"], r["value"]) for r in table.rows}
    assert got == {("small", 30), ("small", 60), ("big", 30), ("big", 60), ("big", 200)}
    assert [(s["dataset"], s["value"]) for s in table.skipped] == [("small", 200)]
    assert all(r["folds"] == 2 for r in table.rows)


def test_difficulty_sweep_class_axis():
    three = _manifest("three", [10, 10, 10])
    six = _manifest("six", [10] * 6)
    g3 = GroupingMap(("a", "b", "c"), {0: 0, 1: 0, 2: 1, 3: 1, 4: 2, 5: 2})
    table = metrics.difficulty_sweep({"three": three, "six": six}, lambda m: m.num_classes / 10,
                                     axis="classes", values=[3, 6, 7], groupings={"six": {3: g3}}, n=12, num_folds=2)
    rows = {(r["dataset"], r["value"]): r["mean"] for r in table.rows}
    assert rows == {("three", 3): 0.3, ("six", 3): 0.3, ("six", 6): 0.6}
    assert len(table.rows) + len(table.skipped) == 6
