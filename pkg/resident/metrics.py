"""
Evaluation Metrics

Confusion matrices (rows = gold, columns = predicted), accuracy and
micro/macro/weighted F1, chance baselines, the out-of-group fallback used for
the Twitter subtasks, group-level confusion, and the shared-task style
results table.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from resident.config import FALLBACK_LABEL
from resident.data_pipeline import Dataset, GroupTable, LabelVocab
from resident.exceptions import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RESULT_COLUMNS = ["Test Set", "Run", "Accuracy", "F1 (micro)", "F1 (macro)", "F1 (weighted)"]
OTHER_GROUP = "other"


@dataclass
class ConfusionMatrix:
    """K x K integer counts; rows are gold labels, columns predicted labels."""

    labels: LabelVocab
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.labels)
        if self.counts.shape != (k, k):
            raise ContractViolation(f"counts must be {k}x{k}, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ContractViolation("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def trace(self) -> int:
        return int(np.trace(self.counts))

    @property
    def supports(self) -> np.ndarray:
        """Gold examples per class (row sums)."""
        return self.counts.sum(axis=1)

    def to_frame(self) -> pd.DataFrame:
        codes = list(self.labels)
        frame = pd.DataFrame(self.counts, index=codes, columns=codes)
        frame.index.name = "gold\\predicted"
        return frame

    def to_tsv(self, path: Optional[PathLike] = None) -> str:
        """TSV with a label header row and column; written to ``path`` when given."""
        text = self.to_frame().to_csv(sep="\t", lineterminator="\n")
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
            logger.info(f"✓ Wrote {len(self.labels)}-label confusion matrix to {path}")
        return text

    def permute(self, order: Sequence[str]) -> "ConfusionMatrix":
        """The same matrix with labels (rows and columns) in ``order``."""
        if sorted(order) != sorted(self.labels):
            raise ContractViolation(f"{list(order)} is not a permutation of {list(self.labels)}")
        idx = [self.labels.index(code) for code in order]
        return ConfusionMatrix(LabelVocab(order), self.counts[np.ix_(idx, idx)])


def confusion_matrix(
    golds: Sequence[str], preds: Sequence[str], labels: LabelVocab
) -> ConfusionMatrix:
    """
    Count (gold, predicted) pairs.

    Raises:
        ContractViolation: If the sequences differ in length or use unknown labels
    """
    if len(golds) != len(preds):
        raise ContractViolation(f"{len(golds)} gold labels but {len(preds)} predictions")
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    rows = [labels.index(g) for g in golds]
    cols = [labels.index(p) for p in preds]
    np.add.at(counts, (rows, cols), 1)
    return ConfusionMatrix(labels, counts)


@dataclass
class MetricsReport:
    """Aggregate scores plus a per-class precision/recall/F1/support frame."""

    accuracy: float
    f1_micro: float
    f1_macro: float
    f1_weighted: float
    per_class: pd.DataFrame

    def as_dict(self) -> Dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "f1_micro": self.f1_micro,
            "f1_macro": self.f1_macro,
            "f1_weighted": self.f1_weighted,
            "per_class": {
                code: {k: (int(v) if k == "support" else float(v)) for k, v in row.items()}
                for code, row in self.per_class.to_dict(orient="index").items()
            },
        }


def _ratio(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    """Elementwise division with 0/0 defined as 0."""
    out = np.zeros(numerator.shape, dtype=np.float64)
    np.divide(numerator, denominator, out=out, where=denominator > 0)
    return out


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """
    Score a confusion matrix.

    Per-class F1 is 2TP / (2TP + FP + FN); macro F1 averages it over every
    vocabulary class (zero-support classes included), weighted F1 weights it
    by gold support, and micro F1 pools the counts, which makes it equal to
    accuracy.

    Raises:
        ContractViolation: If the matrix is empty
    """
    total = cm.total
    if total == 0:
        raise ContractViolation("cannot score an empty confusion matrix")

    tp = np.diag(cm.counts)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    support = cm.supports

    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)

    tp_all, fp_all, fn_all = int(tp.sum()), int(fp.sum()), int(fn.sum())
    per_class = pd.DataFrame(
        {"precision": precision, "recall": recall, "f1": f1, "support": support},
        index=pd.Index(list(cm.labels), name="label"),
    )
    return MetricsReport(
        accuracy=cm.trace / total,
        f1_micro=(2 * tp_all) / (2 * tp_all + fp_all + fn_all),
        f1_macro=float(f1.mean()),
        f1_weighted=float((f1 * support).sum() / total),
        per_class=per_class,
    )


def project_to_group(pred: str, group: Iterable[str], fallback: str = FALLBACK_LABEL) -> str:
    """
    Keep an in-group prediction, replace any other with ``fallback``.

    Raises:
        ConfigurationError: If the fallback is not itself in the group
    """
    group = frozenset(group)
    if fallback not in group:
        raise ConfigurationError(f"fallback {fallback!r} is not in group {sorted(group)}")
    return pred if pred in group else fallback


def project_predictions(
    preds: Sequence[str], group: FrozenSet[str], fallback: str = FALLBACK_LABEL
) -> Tuple[List[str], int]:
    """Project every prediction; returns the projected list and how many changed."""
    projected = [project_to_group(p, group, fallback) for p in preds]
    remapped = sum(1 for before, after in zip(preds, projected) if before != after)
    if remapped:
        logger.warning(f"Remapped {remapped} out-of-group prediction(s) to {fallback}")
    return projected, remapped


class BaselineKind(Enum):
    UNIFORM = "uniform"
    MAJORITY = "majority"


def baseline_accuracy(dataset: Dataset, kind: Union[BaselineKind, str]) -> float:
    """
    Accuracy of a label-blind guesser.

    Uniform guessing scores 1/K over the dataset's label vocabulary; always
    answering the most frequent gold class scores its share of the data.
    """
    if len(dataset) == 0:
        raise ContractViolation("baseline of an empty dataset is undefined")
    kind = BaselineKind(kind)
    if kind is BaselineKind.UNIFORM:
        return 1.0 / len(dataset.labels)
    counts = pd.Series(dataset.gold_labels()).value_counts()
    return int(counts.iloc[0]) / len(dataset)


def group_confusion(cm: ConfusionMatrix, groups: GroupTable) -> ConfusionMatrix:
    """
    Collapse a label-level matrix into a group-level one.

    Labels outside every group are pooled under "other", which only appears
    when such labels exist.
    """
    names = list(groups.names)
    owners = [groups.group_of(code) or OTHER_GROUP for code in cm.labels]
    if OTHER_GROUP in owners and OTHER_GROUP not in names:
        names.append(OTHER_GROUP)
    vocab = LabelVocab(names)

    member = np.zeros((len(cm.labels), len(vocab)), dtype=np.int64)
    member[np.arange(len(cm.labels)), [vocab.index(o) for o in owners]] = 1
    return ConfusionMatrix(vocab, member.T @ cm.counts @ member)


def cross_group_rate(cm: ConfusionMatrix, groups: GroupTable) -> float:
    """Share of examples predicted outside their gold label's group."""
    grouped = group_confusion(cm, groups)
    if grouped.total == 0:
        raise ContractViolation("cannot score an empty confusion matrix")
    return (grouped.total - grouped.trace) / grouped.total


def result_row(test_set: str, run: str, report: MetricsReport) -> Dict[str, Any]:
    return {
        "Test Set": test_set,
        "Run": run,
        "Accuracy": report.accuracy,
        "F1 (micro)": report.f1_micro,
        "F1 (macro)": report.f1_macro,
        "F1 (weighted)": report.f1_weighted,
    }


def baseline_row(test_set: str, accuracy: float) -> Dict[str, Any]:
    return {"Test Set": test_set, "Run": "Baseline", "Accuracy": accuracy}


def results_table(rows: Iterable[Dict[str, Any]]) -> pd.DataFrame:
    """Rows in the shared-task column order; baseline rows leave the F1 columns empty."""
    return pd.DataFrame(list(rows), columns=RESULT_COLUMNS)


def format_results_table(table: pd.DataFrame) -> str:
    return table.to_string(index=False, na_rep="", float_format=lambda v: f"{v:.4f}")


def report_record(test_set: str, run: str, report: MetricsReport) -> Dict[str, Any]:
    return {"test_set": test_set, "run": run, **report.as_dict()}


def write_report_jsonl(records: Iterable[Dict[str, Any]], path: PathLike) -> None:
    """One JSON object per line, keys sorted."""
    lines = [json.dumps(record, sort_keys=True) + "\n" for record in records]
    Path(path).write_text("".join(lines), encoding="utf-8")
    logger.info(f"✓ Wrote {len(lines)} report record(s) to {path}")
