"""Accuracy / macro-F1 metrics and the multi-task evaluation protocol.

The protocol samples a handful of random episodes, applies a method to
each, and reports the mean and population standard deviation over tasks in
the "mean (std)" table format.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, EpisodeTask, sample_task


def accuracy(pred_labels, true_labels) -> float:
    """Fraction of exact matches."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError("prediction/truth length mismatch")
    if pred.size == 0:
        raise ValueError("empty label arrays")
    return float(np.mean(pred == true))


def confusion_matrix(pred_labels, true_labels, n_classes: int) -> np.ndarray:
    """(N, N) counts with rows = true class, columns = predicted class.

    Labels are one-based task labels in [1..N].
    """
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if np.any((pred < 1) | (pred > n_classes)) or np.any((true < 1) | (true > n_classes)):
        raise ValueError(f"labels must lie in [1..{n_classes}]")
    mat = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(mat, (true - 1, pred - 1), 1)
    return mat


def macro_f1(pred_labels, true_labels, n_classes: int) -> tuple[float, np.ndarray]:
    """Macro-averaged F1 over the N task classes.

    Per-class F1 = 2PR / (P + R); a class with P + R = 0 (absent from both
    predictions and truth, or never correct) contributes 0 by convention.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    mat = confusion_matrix(pred_labels, true_labels, n_classes)
    tp = np.diag(mat).astype(np.float64)
    pred_totals = mat.sum(axis=0).astype(np.float64)
    true_totals = mat.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_totals, out=np.zeros(n_classes), where=pred_totals > 0)
    recall = np.divide(tp, true_totals, out=np.zeros(n_classes), where=true_totals > 0)
    pr = precision + recall
    per_class = np.divide(2 * precision * recall, pr, out=np.zeros(n_classes), where=pr > 0)
    return float(per_class.mean()), per_class


@dataclass
class TaskResult:
    task_seed: int
    accuracy: float
    f1: float
    per_class_f1: list[float]
    confusion: list[list[int]]

    @classmethod
    def from_predictions(cls, task: EpisodeTask, pred_labels: np.ndarray) -> "TaskResult":
        f1, per_class = macro_f1(pred_labels, task.query_labels, task.n_way)
        return cls(
            task_seed=task.seed,
            accuracy=accuracy(pred_labels, task.query_labels),
            f1=f1,
            per_class_f1=[float(x) for x in per_class],
            confusion=confusion_matrix(pred_labels, task.query_labels, task.n_way).tolist(),
        )


@dataclass
class Report:
    method_id: str
    n_way: int
    k_shot: int
    per_task: list[TaskResult]
    mean_acc: float
    std_acc: float
    mean_f1: float
    std_f1: float
    # recorded so alternate metric conventions can be compared later
    metadata: dict = field(
        default_factory=lambda: {"f1_averaging": "macro", "std": "population"}
    )

    @classmethod
    def from_tasks(cls, method_id: str, n_way: int, k_shot: int, per_task: list[TaskResult]) -> "Report":
        accs = np.array([t.accuracy for t in per_task])
        f1s = np.array([t.f1 for t in per_task])
        return cls(
            method_id=method_id,
            n_way=n_way,
            k_shot=k_shot,
            per_task=per_task,
            mean_acc=float(accs.mean()),
            std_acc=float(accs.std()),  # population std
            mean_f1=float(f1s.mean()),
            std_f1=float(f1s.std()),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "Report":
        payload = dict(payload)
        payload["per_task"] = [TaskResult(**t) for t in payload["per_task"]]
        return cls(**payload)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Report":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def run_protocol(
    method,
    rare: Dataset,
    n_way: int,
    k_shot: int,
    n_tasks: int = 3,
    seeds: list[int] | None = None,
    method_id: str = "method",
) -> Report:
    """Evaluate a method over several random episodes.

    ``method`` follows the estimator convention: optional
    ``fit(support_images, support_labels)`` called per task, then
    ``predict(query_images)`` returning task labels.
    """
    if seeds is None:
        seeds = list(range(n_tasks))
    if len(seeds) != n_tasks:
        raise ValueError("need exactly one seed per task")
    per_task = []
    for seed in seeds:
        task = sample_task(rare, n_way, k_shot, seed)
        if hasattr(method, "fit"):
            method.fit(task.support_images, task.support_labels)
        preds = np.asarray(method.predict(task.query_images))
        per_task.append(TaskResult.from_predictions(task, preds))
    return Report.from_tasks(method_id, n_way, k_shot, per_task)


def format_cell(mean: float, std: float) -> str:
    """Table cell in the 'mean (std)' percent format."""
    return f"{100 * mean:.2f} ({100 * std:.2f})"


def render_table(reports: list[Report]) -> str:
    """Plain-text comparison grid, one row per method."""
    header = f"{'Method':<28} {'(N, K)':<8} {'Accuracy (%)':<16} {'F1 score (%)':<16}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.method_id:<28} ({r.n_way}, {r.k_shot})   "
            f"{format_cell(r.mean_acc, r.std_acc):<16} {format_cell(r.mean_f1, r.std_f1):<16}"
        )
    return "\n".join(lines)
