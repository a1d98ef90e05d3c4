from __future__ import annotations

import numpy as np
import pytest
from sklearn.metrics import f1_score

from conftest import dataset_from_counts
from oracles import metrics_reference
from raredistill.evaluation import (
    Report,
    TaskResult,
    accuracy,
    confusion_matrix,
    format_cell,
    macro_f1,
    render_table,
    run_protocol,
)


class TestAccuracy:
    def test_worked_example(self):
        assert accuracy([1, 2, 3, 1], [1, 2, 1, 1]) == pytest.approx(0.75)

    def test_all_wrong(self):
        assert accuracy([2, 2], [1, 1]) == 0.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        pred = rng.integers(1, 4, size=30)
        true = rng.integers(1, 4, size=30)
        perm = rng.permutation(30)
        assert accuracy(pred, true) == accuracy(pred[perm], true[perm])

    def test_validation(self):
        with pytest.raises(ValueError):
            accuracy([1, 2], [1])
        with pytest.raises(ValueError):
            accuracy([], [])


class TestConfusionMatrix:
    def test_worked_example(self):
        pred = [1, 2, 2, 3]
        true = [1, 1, 2, 3]
        mat = confusion_matrix(pred, true, 3)
        assert mat.tolist() == [[1, 1, 0], [0, 1, 0], [0, 0, 1]]

    def test_row_sums_are_true_counts(self):
        rng = np.random.default_rng(1)
        true = rng.integers(1, 5, size=50)
        pred = rng.integers(1, 5, size=50)
        mat = confusion_matrix(pred, true, 4)
        assert mat.sum(axis=1).tolist() == np.bincount(true, minlength=5)[1:].tolist()
        assert mat.sum() == 50

    def test_rejects_out_of_range_labels(self):
        with pytest.raises(ValueError):
            confusion_matrix([0, 1], [1, 1], 2)
        with pytest.raises(ValueError):
            confusion_matrix([1, 1], [1, 3], 2)


class TestMacroF1:
    def test_worked_example(self):
        pred = [1, 1, 2, 2, 2, 3, 2]
        true = [1, 1, 2, 2, 3, 3, 3]
        f1, per_class = macro_f1(pred, true, 3)
        # class 1: P=1, R=1 -> 1; class 2: P=1/2, R=1 -> 2/3;
        # class 3: P=1, R=1/3 -> 1/2; macro = 13/18
        assert f1 == pytest.approx(13.0 / 18.0, abs=1e-12)
        assert per_class.tolist() == pytest.approx([1.0, 2.0 / 3.0, 0.5], abs=1e-12)

    def test_absent_class_contributes_zero(self):
        # class 3 never appears in pred or truth
        pred = [1, 2, 1, 2]
        true = [1, 2, 2, 1]
        f1, per_class = macro_f1(pred, true, 3)
        assert per_class[2] == 0.0

    def test_perfect_predictions(self):
        true = [1, 2, 3, 1, 2, 3]
        f1, per_class = macro_f1(true, true, 3)
        assert f1 == 1.0 and np.array_equal(per_class, np.ones(3))

    def test_matches_sklearn_and_reference_on_random_sets(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n_classes = int(rng.integers(2, 6))
            n = int(rng.integers(5, 60))
            pred = rng.integers(1, n_classes + 1, size=n)
            true = rng.integers(1, n_classes + 1, size=n)
            f1, per_class = macro_f1(pred, true, n_classes)
            acc = accuracy(pred, true)
            ref_acc, ref_f1, ref_per = metrics_reference(pred, true, n_classes)
            assert acc == pytest.approx(ref_acc, abs=1e-12)
            assert f1 == pytest.approx(ref_f1, abs=1e-9)
            assert np.allclose(per_class, ref_per, atol=1e-9)
            skl = f1_score(true, pred, labels=list(range(1, n_classes + 1)),
                           average="macro", zero_division=0)
            assert f1 == pytest.approx(skl, abs=1e-9)

    def test_relabeling_permutes_per_class(self):
        pred = np.array([1, 1, 2, 3, 3])
        true = np.array([1, 2, 2, 3, 1])
        f1_a, per_a = macro_f1(pred, true, 3)
        swap = {1: 2, 2: 1, 3: 3}
        f1_b, per_b = macro_f1([swap[x] for x in pred], [swap[x] for x in true], 3)
        assert f1_a == pytest.approx(f1_b, abs=1e-12)
        assert per_b.tolist() == [per_a[1], per_a[0], per_a[2]]


class TestRunProtocol:
    class Oracle:
        """Peeks at the current task to hit an exact target accuracy."""

        def __init__(self, rare, n_way, k_shot, seeds, hit_rates):
            from raredistill.data import sample_task

            self.answers = []
            for seed, rate in zip(seeds, hit_rates):
                task = sample_task(rare, n_way, k_shot, seed)
                labels = task.query_labels.copy()
                n_wrong = round(len(labels) * (1 - rate))
                for i in range(n_wrong):
                    labels[i] = labels[i] % n_way + 1  # guaranteed wrong
                self.answers.append(labels)
            self.i = 0

        def predict(self, query_images):
            out = self.answers[self.i]
            self.i += 1
            return out

    def test_mean_and_population_std_worked_example(self):
        rare = dataset_from_counts((20, 20, 20), image_size=2, seed=0)
        seeds = [0, 1, 2]
        # 45 queries per task; accuracies 0.8, 0.6, 0.4 -> mean 0.6,
        # population std sqrt(0.08/3)
        method = self.Oracle(rare, 3, 5, seeds, [0.8, 0.6, 0.4])
        report = run_protocol(method, rare, 3, 5, n_tasks=3, seeds=seeds, method_id="oracle")
        assert report.mean_acc == pytest.approx(0.6, abs=1e-9)
        assert report.std_acc == pytest.approx(np.sqrt(0.08 / 3.0), abs=1e-9)

    def test_seed_count_mismatch(self):
        rare = dataset_from_counts((9, 9, 9))
        with pytest.raises(ValueError):
            run_protocol(object(), rare, 3, 2, n_tasks=3, seeds=[0, 1])

    def test_fit_called_per_task(self):
        rare = dataset_from_counts((9, 9, 9), image_size=2, seed=1)

        class Counting:
            def __init__(self):
                self.fits = 0

            def fit(self, si, sl):
                self.n_way = len(set(sl.tolist()))
                self.fits += 1

            def predict(self, qi):
                return np.ones(len(qi), dtype=np.int64)

        m = Counting()
        run_protocol(m, rare, 3, 2, n_tasks=3)
        assert m.fits == 3


class TestReport:
    def make_report(self):
        per_task = [
            TaskResult(task_seed=s, accuracy=a, f1=f, per_class_f1=[f] * 3,
                       confusion=[[1, 0, 0], [0, 1, 0], [0, 0, 1]])
            for s, a, f in [(0, 0.9, 0.85), (1, 0.8, 0.75), (2, 0.7, 0.65)]
        ]
        return Report.from_tasks("demo", 3, 5, per_task)

    def test_aggregates(self):
        r = self.make_report()
        assert r.mean_acc == pytest.approx(0.8)
        assert r.std_acc == pytest.approx(np.std([0.9, 0.8, 0.7]))
        assert r.metadata == {"f1_averaging": "macro", "std": "population"}

    def test_json_roundtrip(self, tmp_path):
        r = self.make_report()
        p = r.save(tmp_path / "report.json")
        again = Report.load(p)
        assert again == r

    def test_format_cell(self):
        assert format_cell(0.6190, 0.0292) == "61.90 (2.92)"

    def test_render_table_contains_cells(self):
        r = self.make_report()
        table = render_table([r])
        assert "demo" in table
        assert format_cell(r.mean_acc, r.std_acc) in table
        assert "(3, 5)" in table
