"""Class-incremental scenario runner, accuracy matrix and ACC/BWT metrics."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .classifier import (
    AnalyticState,
    LabeledFeatures,
    adapt,
    fit_task0,
    joint_fit,
    one_hot,
    predict,
)
from .data import FeatureStore, TaskManifest, split_train_test
from .expansion import expand, make_projector
from .matcore import gram, matmul, spd_inverse

__all__ = [
    "REPORT_SCHEMA",
    "ScenarioError",
    "AccuracyMatrix",
    "RunReport",
    "acc_metric",
    "bwt_metric",
    "accuracy",
    "run_anast",
    "run_naive",
    "run_joint",
    "run_method",
    "METHODS",
]

REPORT_SCHEMA = "anast.run-report/1"


class ScenarioError(RuntimeError):
    """A task in a scenario failed; ``task`` names it."""

    def __init__(self, task: str, cause: Exception):
        self.task = task
        super().__init__(f"task {task!r}: {cause}")


@dataclass(frozen=True)
class AccuracyMatrix:
    """``values[t, i]`` is accuracy on task ``i``'s test split after training through task ``t``.

    Entries above the diagonal, and any row that was not evaluated, are NaN.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] < 1:
            raise ValueError(f"accuracy matrix must be square and non-empty, got {v.shape}")
        if np.isfinite(v[np.triu_indices(v.shape[0], 1)]).any():
            raise ValueError("accuracy matrix has entries above the diagonal")
        finite = v[np.isfinite(v)]
        if ((finite < 0) | (finite > 1)).any():
            raise ValueError("accuracies must lie in [0, 1]")
        if not np.isfinite(v[-1]).all():
            raise ValueError("final row of the accuracy matrix must be complete")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_rows(cls, rows, n_tasks: int | None = None) -> "AccuracyMatrix":
        """Build from ragged rows; row ``t`` holds tasks ``0..t``.

        ``None`` rows are left undefined.
        """
        n = n_tasks if n_tasks is not None else len(rows)
        v = np.full((n, n), np.nan)
        for t, row in enumerate(rows):
            if row is not None:
                v[t, : len(row)] = row
        return cls(v)

    @property
    def n_tasks(self) -> int:
        return self.values.shape[0]

    def rows(self) -> list:
        out = []
        for t in range(self.n_tasks):
            row = self.values[t, : t + 1]
            out.append(None if np.isnan(row).all() else [float(x) for x in row])
        return out


def acc_metric(m: AccuracyMatrix) -> float:
    """Mean accuracy over all tasks with the final model."""
    return float(np.mean(m.values[-1]))


def bwt_metric(m: AccuracyMatrix) -> float:
    """Average of ``A[T-1, i] - A[i, i]`` over ``i < T-1``.

    Negative means forgetting.  Returns 0.0 when ``T < 2`` or the diagonal was
    never evaluated; :func:`bwt_defined` tells the two cases apart.
    """
    if not bwt_defined(m):
        return 0.0
    t = m.n_tasks
    return float(np.mean([m.values[t - 1, i] - m.values[i, i] for i in range(t - 1)]))


def bwt_defined(m: AccuracyMatrix) -> bool:
    diag = np.diag(m.values)[:-1]
    return m.n_tasks >= 2 and bool(np.isfinite(diag).all())


@dataclass
class RunReport:
    scenario: str
    method: str
    task_names: list
    accuracy: AccuracyMatrix
    test_sizes: list
    correct_final: list
    config: dict
    task_seconds: list = field(default_factory=list)
    model: object = field(default=None, repr=False)

    @property
    def acc(self) -> float:
        return acc_metric(self.accuracy)

    @property
    def acc_weighted(self) -> float:
        """Final-model accuracy pooled over every test sample."""
        return sum(self.correct_final) / max(sum(self.test_sizes), 1)

    @property
    def bwt(self) -> float:
        return bwt_metric(self.accuracy)

    @property
    def bwt_defined(self) -> bool:
        return bwt_defined(self.accuracy)

    def to_dict(self, *, timing: bool = True) -> dict:
        doc = {
            "schema": REPORT_SCHEMA,
            "scenario": self.scenario,
            "method": self.method,
            "tasks": list(self.task_names),
            "accuracy_matrix": self.accuracy.rows(),
            "acc": self.acc,
            "acc_weighted": self.acc_weighted,
            "bwt": self.bwt,
            "bwt_defined": self.bwt_defined,
            "test_sizes": list(self.test_sizes),
            "config": self.config,
        }
        if timing:
            doc["timing"] = {"task_seconds": list(self.task_seconds)}
        return doc

    def to_json(self, *, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing=timing), indent=2) + "\n"

    def flat_table(self) -> str:
        """Tab-separated ``t, i, task, accuracy`` lines for plotting task-wise curves."""
        lines = ["t\ti\ttask\taccuracy"]
        for t, row in enumerate(self.accuracy.rows()):
            if row is None:
                continue
            for i, a in enumerate(row):
                lines.append(f"{t}\t{i}\t{self.task_names[i]}\t{a!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunReport":
        if doc.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {doc.get('schema')!r}")
        rows = doc["accuracy_matrix"]
        return cls(
            scenario=doc["scenario"],
            method=doc["method"],
            task_names=doc["tasks"],
            accuracy=AccuracyMatrix.from_rows(rows),
            test_sizes=doc["test_sizes"],
            correct_final=[],
            config=doc["config"],
            task_seconds=doc.get("timing", {}).get("task_seconds", []),
        )


def accuracy(model, data: LabeledFeatures) -> tuple[float, int]:
    """Fraction (and count) of rows whose predicted label matches; unknown labels count as wrong."""
    if data.n_rows == 0:
        return math.nan, 0
    hits = int(np.sum(np.asarray(predict(model, data.features), dtype=object) == data.labels))
    return hits / data.n_rows, hits


def _splits(manifest: TaskManifest) -> list[tuple[str, FeatureStore, FeatureStore]]:
    out = []
    for task in manifest.tasks:
        try:
            train, test = split_train_test(
                manifest.task_data(task), manifest.split_ratio, manifest.split_seed
            )
        except ValueError as exc:
            raise ScenarioError(task.name, exc) from exc
        out.append((task.name, train, test))
    return out


def _evaluate_row(model, splits, upto: int) -> tuple[list, list]:
    accs, hits = [], []
    for _, _, test in splits[: upto + 1]:
        a, h = accuracy(model, test)
        accs.append(a)
        hits.append(h)
    return accs, hits


def _naive_step(state: AnalyticState, data: LabeledFeatures) -> AnalyticState:
    # Closed-form analogue of fine-tuning: start from the previous weights but
    # rebuild R from the current task only, so past feature statistics are lost.
    registry = state.registry.extended(data.labels)
    w = np.hstack([state.weights, np.zeros((state.d_exp, len(registry) - state.n_classes))])
    f = expand(state.projector, data.features)
    a = gram(f)
    a[np.diag_indices_from(a)] += state.gamma
    r = spd_inverse(a)
    y = one_hot(data.labels, registry)
    w = w + matmul(r, matmul(f.T, y - matmul(f, w)))
    return replace(
        state,
        weights=w,
        faum=r,
        registry=registry,
        samples_seen=state.samples_seen + data.n_rows,
        tasks_seen=state.tasks_seen + 1,
    )


def _run_sequential(manifest: TaskManifest, method: str, step) -> RunReport:
    projector = make_projector(manifest.expansion)
    splits = _splits(manifest)
    rows, seconds = [], []
    state, hits = None, []
    for t, (name, train, _) in enumerate(splits):
        start = time.perf_counter()
        try:
            if t == 0:
                state = fit_task0(train, manifest.gamma, projector)
            else:
                state = step(state, train)
            row, hits = _evaluate_row(state, splits, t)
        except ScenarioError:
            raise
        except Exception as exc:
            raise ScenarioError(name, exc) from exc
        seconds.append(time.perf_counter() - start)
        rows.append(row)
    return RunReport(
        scenario=manifest.name,
        method=method,
        task_names=[name for name, _, _ in splits],
        accuracy=AccuracyMatrix.from_rows(rows),
        test_sizes=[test.n_rows for _, _, test in splits],
        correct_final=hits,
        config=manifest.config(),
        task_seconds=seconds,
        model=state,
    )


def run_anast(manifest: TaskManifest) -> RunReport:
    """Ridge fit on task 0, then one recursive ``adapt`` pass per later task."""
    return _run_sequential(manifest, "anast", adapt)


def run_naive(manifest: TaskManifest) -> RunReport:
    """Lower-bound baseline: each task refits from its own data only."""
    return _run_sequential(manifest, "naive", _naive_step)


def run_joint(manifest: TaskManifest) -> RunReport:
    """Upper bound: one ridge fit on every task's train split; only the final row is evaluated."""
    projector = make_projector(manifest.expansion)
    splits = _splits(manifest)
    start = time.perf_counter()
    try:
        model = joint_fit([train for _, train, _ in splits], manifest.gamma, projector)
    except Exception as exc:
        raise ScenarioError("joint", exc) from exc
    row, hits = _evaluate_row(model, splits, len(splits) - 1)
    n = len(splits)
    return RunReport(
        scenario=manifest.name,
        method="joint",
        task_names=[name for name, _, _ in splits],
        accuracy=AccuracyMatrix.from_rows([None] * (n - 1) + [row], n),
        test_sizes=[test.n_rows for _, _, test in splits],
        correct_final=hits,
        config=manifest.config(),
        task_seconds=[time.perf_counter() - start],
        model=model,
    )


METHODS = {"anast": run_anast, "naive": run_naive, "joint": run_joint}


def run_method(method: str, manifest: TaskManifest) -> RunReport:
    try:
        runner = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}") from None
    return runner(manifest)
