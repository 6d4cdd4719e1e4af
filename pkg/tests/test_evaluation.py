import csv
import json

import numpy as np
import pytest

from aikd.evaluation import (EvaluationError, RoundMetrics, aggregate, emit_report, load_report,
                             top_k_accuracy)

from oracles import topk_by_enumeration


class TestTopK:
    def test_k_equals_classes(self, rng):
        logits = rng.normal(size=(10, 5))
        assert top_k_accuracy(logits, rng.integers(0, 5, 10), list(range(5)), k=5) == 100.0

    def test_scaled_onehot(self):
        labels = np.array([2, 0, 1, 2])
        logits = np.eye(3)[labels] * 7.0
        assert top_k_accuracy(logits, labels, [0, 1, 2], 1) == 100.0

    def test_tie_case_matches_enumeration(self):
        logits = np.array([[1.0, 1.0, 0.0], [0.5, 2.0, 2.0], [3.0, 0.0, 1.0]])
        labels = np.array([1, 1, 2])
        for k in (1, 2, 3):
            assert top_k_accuracy(logits, labels, [0, 1, 2], k) == pytest.approx(
                topk_by_enumeration(logits, [1, 1, 2], k))
        # sample 0 ties with column 0, which ranks first
        assert top_k_accuracy(logits, labels, [0, 1, 2], 1) == pytest.approx(100 / 3)

    def test_global_class_ids(self):
        logits = np.array([[0.0, 5.0], [5.0, 0.0]])
        assert top_k_accuracy(logits, [42, 17], [17, 42], 1) == 100.0

    def test_random_against_enumeration(self, rng):
        logits = rng.integers(0, 3, size=(40, 6)).astype(float)
        labels = rng.integers(0, 6, 40)
        for k in range(1, 7):
            assert top_k_accuracy(logits, labels, list(range(6)), k) == pytest.approx(
                topk_by_enumeration(logits, labels, k))

    def test_unknown_label(self):
        with pytest.raises(EvaluationError):
            top_k_accuracy(np.zeros((1, 2)), [5], [0, 1], 1)

    def test_bad_k(self):
        with pytest.raises(EvaluationError):
            top_k_accuracy(np.zeros((1, 2)), [0], [0, 1], 3)


def rounds(*top1):
    return [RoundMetrics(i, 2 * (i + 1), t, min(100.0, t + 10)) for i, t in enumerate(top1)]


class TestAggregate:
    def test_single_round(self):
        r = aggregate({0: rounds(55.0)})
        assert r.seeds[0].avg == r.seeds[0].last == 55.0

    def test_two_rounds(self):
        s = aggregate({0: rounds(80.0, 60.0)}).seeds[0]
        assert (s.avg, s.last) == (70.0, 60.0)

    def test_seed_statistics(self):
        r = aggregate({1: rounds(70.0), 2: rounds(72.0), 3: rounds(74.0)})
        assert r.mean_avg == pytest.approx(72.0)
        assert r.std_avg == pytest.approx(np.sqrt(((70 - 72) ** 2 + 0 + (74 - 72) ** 2) / 3))

    def test_permutation_invariant(self):
        a = aggregate({1: rounds(70.0, 50.0), 2: rounds(90.0, 10.0), 3: rounds(60.0, 40.0)})
        b = aggregate({3: rounds(60.0, 40.0), 1: rounds(70.0, 50.0), 2: rounds(90.0, 10.0)})
        assert a.to_dict() == b.to_dict()

    def test_ragged(self):
        with pytest.raises(EvaluationError):
            aggregate({0: rounds(1.0), 1: rounds(1.0, 2.0)})


class TestEmit:
    def test_files(self, tmp_path):
        rep = aggregate({0: rounds(80.0, 60.0, 50.0), 1: rounds(82.0, 58.0, 49.0)}, "abc")
        emit_report(rep, tmp_path)
        assert load_report(tmp_path / "metrics.json").to_dict() == rep.to_dict()
        d = json.loads((tmp_path / "metrics.json").read_text())
        assert {"version", "config_hash", "seeds", "mean_avg", "std_avg", "mean_last", "std_last"} <= set(d)
        assert set(d["seeds"][0]) == {"seed", "rounds", "avg", "last"}
        assert set(d["seeds"][0]["rounds"][0]) == {"round", "classes_seen", "top1", "top5"}
        with open(tmp_path / "metrics.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 2 * 3
        xs = [int(l.split("\t")[0]) for l in (tmp_path / "curve.tsv").read_text().splitlines()[1:]]
        assert xs == sorted(set(xs)) and len(xs) == 3

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            emit_report(aggregate({0: rounds(1.0)}), blocker / "sub")
