import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from toydata import easy_dataset, tiny_config
from lesionfuse import evaluation as ev
from lesionfuse.errors import ContractError
from lesionfuse.model import build_model


def brute_metrics(labels, preds, k):
    """Counts each quantity sample by sample, no matrix algebra."""
    out = []
    for c in range(k):
        tp = sum(1 for y, p in zip(labels, preds) if y == c and p == c)
        fn = sum(1 for y, p in zip(labels, preds) if y == c and p != c)
        fp = sum(1 for y, p in zip(labels, preds) if y != c and p == c)
        tn = sum(1 for y, p in zip(labels, preds) if y != c and p != c)
        rec = tp / (tp + fn) if tp + fn else 0.0
        prec = tp / (tp + fp) if tp + fp else 0.0
        spec = tn / (tn + fp) if tn + fp else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append((rec, prec, spec, f1))
    acc = sum(1 for y, p in zip(labels, preds) if y == p) / len(labels)
    return out, acc


def brute_auc(scores, positives):
    pos = [s for s, p in zip(scores, positives) if p]
    neg = [s for s, p in zip(scores, positives) if not p]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


class TestConfusion:
    def test_perfect(self):
        cm = ev.confusion([0, 1, 2, 2], [0, 1, 2, 2], 3)
        np.testing.assert_array_equal(cm.counts, np.diag([1, 1, 2]))

    def test_single(self):
        cm = ev.confusion([0], [1], 2)
        np.testing.assert_array_equal(cm.counts, [[0, 1], [0, 0]])

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            ev.confusion([0, 3], [0, 1], 3)


class TestMetrics:
    def test_table_bacc(self):
        assert ev.bacc_from_class_accuracies([87.70, 85.11, 88.88, 95.00, 50.00, 92.31]) == \
            pytest.approx(0.832, abs=5e-4)

    def test_f1_examples(self):
        assert ev.f1_score(0.40, 0.50) == pytest.approx(0.44, abs=5e-3)
        assert ev.f1_score(0.90, 0.88) == pytest.approx(0.89, abs=5e-3)
        assert ev.f1_score(0.0, 0.0) == 0.0

    def test_undefined_precision_flagged(self):
        m = ev.metrics(ev.confusion([0, 1], [0, 0], 2, ["a", "b"]))
        assert m["per_class"]["b"]["precision"] == 0.0 and "b.precision" in m["undefined"]

    def test_random_matrices_match_brute_force(self):
        r = np.random.default_rng(7)
        for _ in range(200):
            k = int(r.integers(2, 7))
            n = int(r.integers(1, 40))
            y, p = r.integers(0, k, n), r.integers(0, k, n)
            m = ev.metrics(ev.confusion(y, p, k))
            ref, acc = brute_metrics(y, p, k)
            assert abs(m["acc"] - acc) <= 1e-12
            for c in range(k):
                got = m["per_class"][str(c)]
                for key, val in zip(("recall", "precision", "specificity", "f1"), ref[c]):
                    assert abs(got[key] - val) <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40),
           st.integers(0, 3), st.integers(2, 4))
    def test_bacc_invariant_to_class_duplication(self, pairs, cls, times):
        y, p = map(np.array, zip(*pairs))
        base = ev.metrics(ev.confusion(y, p, 4))
        extra = y == cls
        y2 = np.concatenate([y] + [y[extra]] * (times - 1))
        p2 = np.concatenate([p] + [p[extra]] * (times - 1))
        assert ev.metrics(ev.confusion(y2, p2, 4))["bacc"] == pytest.approx(base["bacc"], abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
    def test_acc_is_support_weighted_recall(self, pairs):
        y, p = map(np.array, zip(*pairs))
        m = ev.metrics(ev.confusion(y, p, 4))
        weighted = sum(v["recall"] * v["support"] for v in m["per_class"].values()) / len(y)
        assert m["acc"] == pytest.approx(weighted, abs=1e-12)
        assert m["bacc"] == pytest.approx(np.mean([v["recall"] for v in m["per_class"].values()]), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=2, max_size=40),
           st.integers(0, 3))
    def test_specificity_is_complement_recall(self, pairs, c):
        y, p = map(np.array, zip(*pairs))
        m = ev.metrics(ev.confusion(y, p, 4))
        collapsed = ev.metrics(ev.confusion((y != c).astype(int), (p != c).astype(int), 2))
        if (y != c).any():
            assert m["per_class"][str(c)]["specificity"] == pytest.approx(collapsed["per_class"]["1"]["recall"])

    def test_empty(self):
        with pytest.raises(ContractError):
            ev.metrics(ev.confusion([], [], 2))


class TestAUC:
    def test_separated(self):
        assert ev.binary_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert ev.binary_auc([0.3] * 5, [1, 0, 1, 0, 0]) == 0.5

    def test_hand_case(self):
        assert ev.binary_auc([0.9, 0.8, 0.3], [1, 0, 1]) == 0.5

    def test_random_sets_match_pair_counting(self):
        r = np.random.default_rng(3)
        for _ in range(200):
            n = int(r.integers(2, 30))
            pos = r.random(n) < 0.5
            pos[0], pos[1] = True, False
            scores = r.integers(0, 6, n) / 5.0 if r.random() < 0.5 else r.random(n)
            assert abs(ev.binary_auc(scores, pos) - brute_auc(scores, pos)) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-40, 40), min_size=4, max_size=30), st.integers(0, 2 ** 31))
    def test_monotone_invariance(self, scores, seed):
        # grid scores keep the transform strictly monotone in floating point
        s = np.array(scores) / 8.0
        pos = np.random.default_rng(seed).random(len(s)) < 0.5
        pos[0], pos[1] = True, False
        assert ev.binary_auc(np.exp(s) * 3 + 1, pos) == pytest.approx(ev.binary_auc(s, pos), abs=1e-12)

    def test_one_class_only(self):
        with pytest.raises(ContractError):
            ev.binary_auc([0.1, 0.2], [1, 1])
        with pytest.raises(ContractError):
            ev.roc_auc_ovr(np.ones((3, 2)) / 2, [0, 0, 0], 1)

    def test_ovr_macro_and_weighted(self):
        scores = np.array([[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.3, 0.3, 0.4], [0.6, 0.3, 0.1]])
        labels = np.array([0, 1, 2, 1])
        out = ev.roc_auc_ovr(scores, labels)
        per = [brute_auc(scores[:, c], labels == c) for c in range(3)]
        assert out["macro"] == pytest.approx(np.mean(per))
        assert out["weighted"] == pytest.approx((per[0] + 2 * per[1] + per[2]) / 4)

    def test_roc_points(self):
        pts = ev.roc_points([0.9, 0.5, 0.5, 0.1], [1, 1, 0, 0])
        assert pts[0][:2] == (0.0, 0.0) and pts[-1][:2] == (1.0, 1.0)
        assert [p[2] for p in pts[1:]] == [0.9, 0.5, 0.1]


def fitted():
    bundle = build_model(tiny_config(seed=1))
    return bundle, easy_dataset(n=18)


class TestReport:
    def test_identities_and_round_trip(self):
        bundle, data = fitted()
        rep = ev.evaluate(bundle, data)
        assert rep.bacc == pytest.approx(np.mean([v["recall"] for v in rep.per_class.values()]))
        assert set(rep.per_class) == set(data.class_names) and rep.n_samples == 18
        assert ev.EvalReport.from_json(rep.to_json()) == ev.EvalReport.from_json(rep.to_json())
        assert ev.EvalReport.from_json(rep.to_json()).to_json() == rep.to_json()

    def test_report_files(self, tmp_path):
        bundle, data = fitted()
        rep = ev.evaluate(bundle, data)
        paths = ev.write_report_files(rep, tmp_path / "a")
        ev.write_report_files(ev.evaluate(bundle, data), tmp_path / "b")
        for name, p in paths.items():
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
        rows = list(csv.reader(open(paths["confusion"])))
        assert rows[0][1:] == data.class_names and len(rows) == 4
        roc = list(csv.reader(open(paths["roc"])))
        assert roc[0] == ["class", "fpr", "tpr", "threshold"] and roc[1][3] == "inf"

    def test_embeddings(self, tmp_path):
        bundle, data = fitted()
        ev.export_embeddings(bundle, data, tmp_path / "e1.csv")
        ev.export_embeddings(bundle, data, tmp_path / "e2.csv")
        rows = list(csv.reader(open(tmp_path / "e1.csv")))
        assert len(rows) == 1 + len(data)
        assert all(len(r) == 2 + bundle.config.fusion_dim for r in rows)
        assert (tmp_path / "e1.csv").read_bytes() == (tmp_path / "e2.csv").read_bytes()

    def test_empty_partition(self):
        bundle, data = fitted()
        with pytest.raises(ContractError):
            ev.evaluate(bundle, data.subset([]))

    def test_figures(self, tmp_path):
        from lesionfuse.plotting import render_report
        bundle, data = fitted()
        rep = ev.evaluate(bundle, data)
        hist = [{"epoch": 0, "loss_final": 1.0, "loss_wce": 1.2, "loss_sr": 0.4, "val_bacc": 0.3, "val_acc": 0.4}]
        paths = render_report(rep, tmp_path, hist)
        assert sorted(paths) == ["confusion", "history", "roc"]
        assert all(p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n" for p in paths.values())
