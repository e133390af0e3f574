"""Randomized check that recursive updates reproduce the joint ridge solution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import (
    LabeledFeatures,
    adapt,
    faum_update,
    fit_task0,
    init_empty,
    joint_fit,
)
from .expansion import ExpansionSpec, Kind, make_projector
from .matcore import ShapeError, gram, matmul, relative_error, spd_inverse, spd_solve, symmetrize

__all__ = [
    "EQUIVALENCE_RTOL",
    "Scenario",
    "TrialResult",
    "random_scenario",
    "aligned_weights",
    "recursive_fit",
    "check_scenario",
    "run_equivalence_suite",
    "faum_update_literal",
]

EQUIVALENCE_RTOL = 1e-8


@dataclass
class Scenario:
    seed: int
    gamma: float
    spec: ExpansionSpec
    tasks: list  # of LabeledFeatures

    @property
    def n_classes(self) -> int:
        return len({lab for t in self.tasks for lab in t.labels})

    @property
    def n_rows(self) -> int:
        return sum(t.n_rows for t in self.tasks)

    def describe(self) -> str:
        return (
            f"seed={self.seed} d_exp={self.spec.output_dim} d_in={self.spec.input_dim} "
            f"tasks={len(self.tasks)} classes={self.n_classes} n={self.n_rows} gamma={self.gamma:.3g}"
        )


@dataclass
class TrialResult:
    scenario: Scenario
    weight_error: float
    faum_error: float
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None and max(self.weight_error, self.faum_error) <= EQUIVALENCE_RTOL


def random_scenario(seed: int, max_dim: int = 64, max_tasks: int = 6, max_classes: int = 12,
                    max_rows: int = 500) -> Scenario:
    """Draw one class-incremental scenario; fully determined by ``seed``."""
    rng = np.random.Generator(np.random.Philox(seed))
    d_exp = int(rng.integers(min(4, max_dim), max_dim + 1))
    n_tasks = int(rng.integers(1, max_tasks + 1))
    n_classes = int(rng.integers(max(2, n_tasks), max(max_classes, n_tasks) + 1))
    n_rows = int(rng.integers(max(10, n_tasks), max_rows + 1))
    gamma = float(10.0 ** rng.uniform(-3.0, 0.0))

    if rng.random() < 0.5:
        spec = ExpansionSpec.identity(d_exp)
    else:
        d_in = int(rng.integers(1, d_exp + 1))
        # 1/sqrt(d_exp) keeps expanded rows near unit norm
        spec = ExpansionSpec(input_dim=d_in, output_dim=d_exp, seed=int(rng.integers(2**32)),
                             scale=1.0 / np.sqrt(d_exp))

    # Contiguous class groups per task, then rows spread over tasks (>= 1 each).
    cuts = np.sort(rng.choice(np.arange(1, n_classes), size=n_tasks - 1, replace=False)) if n_tasks > 1 else []
    groups = np.split(np.arange(n_classes), cuts)
    sizes = 1 + rng.multinomial(n_rows - n_tasks, np.full(n_tasks, 1.0 / n_tasks))
    means = rng.standard_normal((n_classes, spec.input_dim)) * 2.0
    # Rows are L2-normalised, like typical backbone embeddings; this bounds the
    # condition number of the ridge system by about n / gamma.
    tasks = []
    for group, size in zip(groups, sizes):
        cls = rng.choice(group, size=int(size))
        feats = means[cls] + rng.standard_normal((int(size), spec.input_dim))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        tasks.append(LabeledFeatures(feats, np.array([f"k{c}" for c in cls], dtype=object)))
    return Scenario(int(seed), gamma, spec, tasks)


def aligned_weights(weights: np.ndarray, labels, order) -> np.ndarray:
    """Reorder the columns of ``weights`` (labelled ``labels``) to follow ``order``."""
    pos = {lab: i for i, lab in enumerate(labels)}
    return weights[:, [pos[lab] for lab in order]]


def recursive_fit(scenario: Scenario, *, faum=faum_update, chunk_rows=None):
    projector = make_projector(scenario.spec)
    state = fit_task0(scenario.tasks[0], scenario.gamma, projector)
    for task in scenario.tasks[1:]:
        state = adapt(state, task, faum=faum, chunk_rows=chunk_rows)
    return state


def direct_faum(scenario: Scenario) -> np.ndarray:
    projector = make_projector(scenario.spec)
    from .expansion import expand

    a = scenario.gamma * np.eye(scenario.spec.output_dim)
    for t in scenario.tasks:
        a += gram(expand(projector, t.features))
    return spd_inverse(a)


def check_scenario(scenario: Scenario, *, faum=faum_update) -> TrialResult:
    try:
        state = recursive_fit(scenario, faum=faum)
    except (ShapeError, np.linalg.LinAlgError, ValueError) as exc:
        return TrialResult(scenario, np.inf, np.inf, f"{type(exc).__name__}: {exc}")
    joint = joint_fit(scenario.tasks, scenario.gamma, state.projector)
    w = aligned_weights(state.weights, state.registry.labels, joint.registry.labels)
    return TrialResult(
        scenario,
        relative_error(w, joint.weights),
        relative_error(state.faum, direct_faum(scenario)),
    )


def run_equivalence_suite(trials: int = 100, seed: int = 0, max_dim: int = 64, *,
                          faum=faum_update) -> list[TrialResult]:
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if max_dim < 1:
        raise ValueError(f"max_dim must be >= 1, got {max_dim}")
    seeds = np.random.SeedSequence(seed).generate_state(trials, dtype=np.uint32)
    return [check_scenario(random_scenario(int(s), max_dim), faum=faum) for s in seeds]


def faum_update_literal(r: np.ndarray, f_exp: np.ndarray) -> np.ndarray:
    """Downdate with a transposed final factor (``... F.T R`` instead of ``... F R``).

    Shapes only compose when ``n == d``; kept as a deliberately broken rule
    that the equivalence suite must reject.
    """
    n = f_exp.shape[0]
    if n == 0:
        return r
    inner = symmetrize(matmul(matmul(f_exp, r), f_exp.T))
    inner[np.diag_indices(n)] += 1.0
    return symmetrize(r - matmul(matmul(r, f_exp.T), spd_solve(inner, matmul(f_exp.T, r))))
