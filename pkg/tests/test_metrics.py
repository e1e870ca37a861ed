"""
Unit tests for confusion matrices, F1 scores, group projection and result tables.
"""

import json

import numpy as np
import pandas as pd
import pytest

from resident.data_pipeline import TASK_A, Dataset, Example, GroupTable, LabelVocab
from resident.exceptions import ConfigurationError, ContractViolation
from resident.metrics import (
    ConfusionMatrix,
    baseline_accuracy,
    baseline_row,
    confusion_matrix,
    cross_group_rate,
    format_results_table,
    group_confusion,
    metrics,
    project_predictions,
    project_to_group,
    report_record,
    result_row,
    results_table,
    write_report_jsonl,
)

TASK_A_ORDER = [
    "es-ar", "es-es", "es-mx", "fr-ca", "fr-fr", "id", "my", "pt-br", "pt-pt", "hr", "bs", "sr",
]  # fmt: skip

# Closed run 3 on the newswire test set (rows gold, columns predicted)
TASK_A_COUNTS = [
    [824, 77, 94, 0, 1, 1, 0, 2, 1, 0, 0, 0],
    [90, 778, 127, 0, 1, 0, 0, 1, 2, 0, 1, 0],
    [210, 269, 520, 0, 0, 0, 0, 1, 0, 0, 0, 0],
    [0, 0, 0, 956, 44, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 93, 905, 0, 0, 1, 0, 1, 0, 0],
    [0, 0, 0, 0, 0, 951, 48, 0, 0, 0, 0, 1],
    [0, 0, 0, 0, 0, 30, 970, 0, 0, 0, 0, 0],
    [0, 0, 1, 0, 0, 0, 0, 891, 107, 1, 0, 0],
    [0, 1, 0, 0, 0, 0, 0, 78, 920, 0, 1, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 823, 150, 27],
    [0, 0, 0, 0, 1, 0, 0, 1, 0, 143, 730, 125],
    [0, 0, 0, 0, 1, 0, 0, 0, 0, 15, 67, 917],
]

B_ORDER = ["pt-br", "pt-pt", "hr", "bs", "sr"]

# Twitter test sets with limited (B1, run 3) and maximal (B2, run 2) data per user
B1_COUNTS = [
    [74, 24, 1, 0, 1],
    [31, 67, 1, 0, 1],
    [0, 0, 60, 31, 9],
    [1, 0, 20, 62, 17],
    [4, 0, 5, 10, 81],
]
B2_COUNTS = [
    [54, 40, 3, 2, 1],
    [15, 80, 5, 0, 0],
    [0, 0, 75, 20, 5],
    [0, 0, 31, 56, 13],
    [2, 0, 8, 6, 84],
]


def _cm(order, counts):
    return ConfusionMatrix(LabelVocab(order), np.array(counts))


class TestSharedTaskMatrices:
    """Test suite reproducing the published scores from their confusion matrices."""

    def test_task_a_run3(self):
        """Test accuracy 0.84875 and macro F1 0.8467 on the newswire matrix."""
        report = metrics(_cm(TASK_A_ORDER, TASK_A_COUNTS))
        assert report.accuracy == 10185 / 12000
        assert report.accuracy == pytest.approx(0.8488, abs=5e-5)
        assert report.f1_micro == report.accuracy
        assert report.f1_macro == pytest.approx(0.8467, abs=5e-5)
        assert report.f1_weighted == pytest.approx(report.f1_macro, rel=1e-12)

    def test_b1_run3(self):
        """Test B1 accuracy 0.688 and macro F1 0.6868."""
        report = metrics(_cm(B_ORDER, B1_COUNTS))
        assert report.accuracy == pytest.approx(0.688)
        assert report.f1_macro == pytest.approx(0.6868, abs=5e-5)

    def test_b2_run2(self):
        """Test B2 accuracy 0.698 and macro F1 0.6942."""
        report = metrics(_cm(B_ORDER, B2_COUNTS))
        assert report.accuracy == pytest.approx(0.698)
        assert report.f1_macro == pytest.approx(0.6942, abs=5e-5)

    def test_cross_group_confusion_is_near_zero(self):
        """Test few newswire errors leave their language group."""
        cm = _cm(TASK_A_ORDER, TASK_A_COUNTS)
        grouped = group_confusion(cm, TASK_A)
        assert grouped.total == 12000
        assert cross_group_rate(cm, TASK_A) < 0.002


class TestMetrics:
    """Test suite for metric definitions."""

    def test_micro_f1_equals_accuracy_on_random_labelings(self):
        """Test micro F1 equals accuracy exactly."""
        rng = np.random.default_rng(0)
        labels = LabelVocab(["a", "b", "c", "d"])
        for _ in range(100):
            golds = [labels.code(i) for i in rng.integers(0, 4, size=30)]
            preds = [labels.code(i) for i in rng.integers(0, 4, size=30)]
            report = metrics(confusion_matrix(golds, preds, labels))
            assert report.f1_micro == report.accuracy

    def test_zero_support_class_counts_in_macro(self):
        """Test a class never seen nor predicted scores F1 0 in the macro average."""
        labels = LabelVocab(["a", "b", "c"])
        report = metrics(confusion_matrix(["a", "b"], ["a", "b"], labels))
        assert report.accuracy == 1.0
        assert report.f1_macro == pytest.approx(2.0 / 3.0)
        assert report.f1_weighted == 1.0
        assert report.per_class.loc["c", "f1"] == 0.0

    def test_per_class_frame(self):
        """Test precision, recall and support per class."""
        labels = LabelVocab(["a", "b"])
        report = metrics(confusion_matrix(["a", "a", "b"], ["a", "b", "b"], labels))
        assert report.per_class.loc["a", "precision"] == 1.0
        assert report.per_class.loc["a", "recall"] == 0.5
        assert report.per_class.loc["b", "precision"] == 0.5
        assert list(report.per_class["support"]) == [2, 1]
        assert report.as_dict()["per_class"]["a"]["support"] == 2

    def test_empty_matrix_raises(self):
        """Test scoring an empty matrix is rejected."""
        with pytest.raises(ContractViolation):
            metrics(ConfusionMatrix(LabelVocab(["a", "b"]), np.zeros((2, 2))))

    def test_length_mismatch_raises(self):
        """Test gold and predictions must align."""
        with pytest.raises(ContractViolation):
            confusion_matrix(["a"], ["a", "b"], LabelVocab(["a", "b"]))


class TestConfusionMatrix:
    """Test suite for confusion matrix views."""

    def test_tsv_layout(self, tmp_path):
        """Test the TSV header row and gold-label rows."""
        cm = _cm(["a", "b"], [[3, 1], [0, 2]])
        path = tmp_path / "cm.tsv"
        text = cm.to_tsv(path)
        assert text == "gold\\predicted\ta\tb\na\t3\t1\nb\t0\t2\n"
        assert path.read_text(encoding="utf-8") == text

    def test_permute_reorders_rows_and_columns(self):
        """Test permutation keeps each count with its label pair."""
        cm = _cm(["a", "b"], [[3, 1], [0, 2]]).permute(["b", "a"])
        np.testing.assert_array_equal(cm.counts, [[2, 0], [1, 3]])

    def test_group_confusion_pools_unknown_labels(self):
        """Test labels outside every group pool under other."""
        groups = GroupTable({"g": ["a", "b"]})
        cm = _cm(["a", "b", "z"], [[1, 1, 0], [0, 1, 1], [1, 0, 1]])
        grouped = group_confusion(cm, groups)
        assert list(grouped.labels) == ["g", "other"]
        np.testing.assert_array_equal(grouped.counts, [[3, 1], [1, 1]])
        assert cross_group_rate(cm, groups) == pytest.approx(2 / 6)


class TestGroupProjection:
    """Test suite for the out-of-group fallback."""

    def test_in_group_kept_other_mapped_to_fallback(self):
        """Test in-group predictions pass and others map to hr."""
        group = frozenset({"hr", "bs", "sr"})
        assert project_to_group("bs", group) == "bs"
        assert project_to_group("es-ar", group) == "hr"

    def test_fallback_must_be_in_group(self):
        """Test a fallback outside the group is rejected."""
        with pytest.raises(ConfigurationError):
            project_to_group("bs", {"pt-br", "pt-pt"}, "hr")

    def test_project_predictions_counts_changes(self):
        """Test the number of remapped predictions is reported."""
        preds, remapped = project_predictions(["hr", "id", "my"], frozenset({"hr", "bs"}))
        assert preds == ["hr", "hr", "hr"]
        assert remapped == 2


class TestBaselinesAndTables:
    """Test suite for baselines and the results table."""

    def _dataset(self):
        codes = ["a"] * 3 + ["b"] + ["c"] * 2
        return Dataset.from_examples(Example.from_text("x", c) for c in codes)

    def test_uniform_and_majority_baselines(self):
        """Test uniform is 1/K and majority is the top class share."""
        dataset = self._dataset()
        assert baseline_accuracy(dataset, "uniform") == pytest.approx(1 / 3)
        assert baseline_accuracy(dataset, "majority") == pytest.approx(0.5)

    def test_twelve_class_uniform_baseline(self):
        """Test the newswire baseline is 1/12."""
        dataset = Dataset.from_examples(Example.from_text("x", c) for c in TASK_A_ORDER)
        assert baseline_accuracy(dataset, "uniform") == pytest.approx(0.0833, abs=5e-5)

    def test_results_table_layout(self):
        """Test columns, empty baseline F1 cells and four-decimal formatting."""
        report = metrics(_cm(B_ORDER, B1_COUNTS))
        table = results_table([result_row("B1", "run3", report), baseline_row("B1", 0.02)])
        assert list(table.columns) == [
            "Test Set",
            "Run",
            "Accuracy",
            "F1 (micro)",
            "F1 (macro)",
            "F1 (weighted)",
        ]
        assert pd.isna(table.loc[1, "F1 (macro)"])
        text = format_results_table(table)
        assert "0.6880" in text
        assert "0.6868" in text
        assert "Baseline" in text

    def test_report_jsonl(self, tmp_path):
        """Test one sorted-key JSON object per report."""
        report = metrics(_cm(B_ORDER, B2_COUNTS))
        path = tmp_path / "report.jsonl"
        write_report_jsonl([report_record("B2", "run2", report)], path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 1
        record = json.loads(lines[0])
        assert record["run"] == "run2"
        assert record["accuracy"] == pytest.approx(0.698)
        assert set(record["per_class"]) == set(B_ORDER)
