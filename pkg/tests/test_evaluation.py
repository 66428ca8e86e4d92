import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from signxai.errors import DataError
from signxai.evaluation import (
    ConfusionMatrix,
    aggregate,
    confusion_colors,
    confusion_matrix,
    metrics_report,
    per_class_metrics,
    read_confusion_csv,
    render_confusion,
)


def counting_oracle(y_true, y_pred, k):
    counts = [[0] * k for _ in range(k)]
    for t, p in zip(y_true, y_pred):
        counts[t][p] += 1
    return counts


def tally_oracle(y_true, y_pred, k):
    """Per-class precision/recall/F1 straight from TP/FP/FN tallies over samples."""
    out = []
    for c in range(k):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append((prec, rec, f1, tp, fp, fn, tp + fn))
    return out


def aggregate_oracle(y_true, y_pred, k):
    rows = tally_oracle(y_true, y_pred, k)
    n = len(y_true)
    macro = [sum(r[i] for r in rows) / k for i in range(3)]
    weighted = [sum(r[i] * r[6] for r in rows) / n for i in range(3)]
    tp, fp, fn = (sum(r[i] for r in rows) for i in (3, 4, 5))
    mp, mr = tp / (tp + fp), tp / (tp + fn)
    micro = [mp, mr, 2 * mp * mr / (mp + mr) if mp + mr else 0.0]
    accuracy = sum(1 for t, p in zip(y_true, y_pred) if t == p) / n
    return {"macro": macro, "weighted": weighted, "micro": micro}, accuracy


def test_perfect_prediction():
    assert confusion_matrix([0, 1], [0, 1], 2).counts.tolist() == [[1, 0], [0, 1]]


def test_hand_count():
    assert confusion_matrix([0, 0, 1], [1, 0, 1], 2).counts.tolist() == [[1, 1], [0, 1]]


def test_random_pairs_match_counting_oracle():
    rng = np.random.default_rng(0)
    y_true, y_pred = rng.integers(0, 10, 500), rng.integers(0, 10, 500)
    cm = confusion_matrix(y_true, y_pred, 10)
    assert cm.counts.tolist() == counting_oracle(y_true.tolist(), y_pred.tolist(), 10)
    assert cm.total == 500
    assert cm.counts.sum(axis=1).tolist() == np.bincount(y_true, minlength=10).tolist()


@pytest.mark.parametrize("y_true,y_pred", [([0, 1], [0]), ([0, 2], [0, 1]), ([0, -1], [0, 0])])
def test_contract_errors(y_true, y_pred):
    with pytest.raises(DataError):
        confusion_matrix(y_true, y_pred, 2)


def test_diagonal_metrics():
    pc = per_class_metrics(ConfusionMatrix(np.diag([3, 4, 5]), ["a", "b", "c"]))
    for arr in (pc.precision, pc.recall, pc.f1):
        assert np.all(arr == 1.0)


def test_hand_arithmetic():
    pc = per_class_metrics(ConfusionMatrix(np.array([[5, 5], [0, 10]]), ["a", "b"]))
    assert pc.precision[0] == 1.0
    assert pc.recall[0] == 0.5
    assert pc.f1[0] == pytest.approx(2 / 3, abs=1e-15)


def test_zero_denominators_are_flagged():
    # class 2 never occurs and is never predicted
    pc = per_class_metrics(ConfusionMatrix(np.array([[2, 1, 0], [0, 3, 0], [0, 0, 0]]), list("abc")))
    assert pc.precision[2] == pc.recall[2] == pc.f1[2] == 0.0
    assert pc.undefined["precision"] == [2]
    assert pc.undefined["recall"] == [2]
    assert 2 in pc.undefined["f1"]


def test_random_matrix_matches_tally_oracle():
    rng = np.random.default_rng(1)
    y_true, y_pred = rng.integers(0, 10, 400).tolist(), rng.integers(0, 10, 400).tolist()
    pc = per_class_metrics(confusion_matrix(y_true, y_pred, 10))
    for c, (p, r, f, *_rest) in enumerate(tally_oracle(y_true, y_pred, 10)):
        assert abs(pc.precision[c] - p) <= 1e-12
        assert abs(pc.recall[c] - r) <= 1e-12
        assert abs(pc.f1[c] - f) <= 1e-12


def test_constant_metrics_aggregate_identically():
    pc = per_class_metrics(ConfusionMatrix(np.array([[8, 2], [2, 8]]), ["a", "b"]))
    results = [aggregate(pc, s) for s in ("macro", "micro", "weighted")]
    for key in ("precision", "recall", "f1"):
        assert {round(r[key], 15) for r in results} == {0.8}


def test_random_aggregates_match_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        k = int(rng.integers(2, 12))
        n = int(rng.integers(1, 300))
        y_true, y_pred = rng.integers(0, k, n).tolist(), rng.integers(0, k, n).tolist()
        pc = per_class_metrics(confusion_matrix(y_true, y_pred, k))
        expected, accuracy = aggregate_oracle(y_true, y_pred, k)
        for strategy, vals in expected.items():
            got = aggregate(pc, strategy)
            assert abs(got["accuracy"] - accuracy) <= 1e-12
            for key, want in zip(("precision", "recall", "f1"), vals):
                assert abs(got[key] - want) <= 1e-12


def test_unknown_strategy():
    pc = per_class_metrics(ConfusionMatrix(np.eye(2, dtype=int), ["a", "b"]))
    with pytest.raises(ValueError):
        aggregate(pc, "harmonic")


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12).flatmap(lambda k: st.tuples(
    st.just(k),
    st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=80))))
def test_metric_identities(args):
    k, pairs = args
    y_true, y_pred = zip(*pairs)
    report = metrics_report(confusion_matrix(y_true, y_pred, k))
    micro = report.aggregates["micro"]
    assert micro["recall"] == micro["accuracy"]
    assert abs(micro["precision"] - micro["accuracy"]) <= 1e-15
    pc = report.per_class
    assert np.array_equal(pc.f1 == 0, pc.tp == 0)
    lo = np.minimum(pc.precision, pc.recall)
    hi = np.maximum(pc.precision, pc.recall)
    assert np.all((pc.f1 >= lo - 1e-15) & (pc.f1 <= hi + 1e-15))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8).flatmap(lambda k: st.tuples(
    st.just(k), st.permutations(range(k)),
    st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=60))))
def test_permutation_equivariance(args):
    k, perm, pairs = args
    perm = np.array(perm)
    y_true, y_pred = map(np.array, zip(*pairs))
    base = confusion_matrix(y_true, y_pred, k)
    moved = confusion_matrix(perm[y_true], perm[y_pred], k)
    inv = np.argsort(perm)
    assert np.array_equal(moved.counts, base.counts[np.ix_(inv, inv)])
    assert np.array_equal(per_class_metrics(moved).f1, per_class_metrics(base).f1[inv])


def test_report_json(tmp_path):
    report = metrics_report(confusion_matrix([0, 1, 1], [0, 1, 0], 2, ["x", "y"]))
    report.save_json(tmp_path / "m.json")
    import json

    doc = json.loads((tmp_path / "m.json").read_text())
    assert set(doc["aggregates"]) == {"macro", "micro", "weighted"}
    assert [r["class"] for r in doc["per_class"]] == ["x", "y"]
    assert doc["accuracy"] == pytest.approx(2 / 3)


def test_render_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    cm = confusion_matrix(rng.integers(0, 10, 300), rng.integers(0, 10, 300), 10, [f"d{i}" for i in range(10)])
    png, csv_path = render_confusion(cm, tmp_path / "cm")
    assert Image.open(png).size[0] > 0
    back = read_confusion_csv(csv_path)
    assert np.array_equal(back.counts, cm.counts)
    assert back.class_names == cm.class_names


def test_all_zero_matrix_is_white(tmp_path):
    cm = ConfusionMatrix(np.zeros((2, 2), dtype=np.int64), ["a", "b"])
    colors = confusion_colors(cm)
    assert np.allclose(colors[..., :3], 1.0)
    render_confusion(cm, tmp_path / "zero")


def test_diagonal_cells_are_darkest():
    counts = np.full((4, 4), 1) + np.diag([20, 30, 25, 40])
    colors = confusion_colors(ConfusionMatrix(counts, list("abcd")))
    brightness = colors[..., :3].sum(axis=-1)
    off = brightness[~np.eye(4, dtype=bool)]
    assert brightness.diagonal().max() < off.min()
    # darker with larger count
    assert np.argmin(brightness.diagonal()) == 3


def test_render_unwritable(tmp_path):
    from signxai.errors import ArtifactIOError

    with pytest.raises(ArtifactIOError):
        render_confusion(ConfusionMatrix(np.eye(2, dtype=int), ["a", "b"]), tmp_path / "missing" / "cm")
