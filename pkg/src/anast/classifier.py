"""Analytic (closed-form) class-incremental classifier.

The learner keeps two matrices over the expanded feature space:

* ``weights`` -- the ridge classifier ``W`` (``d_exp x C``),
* ``faum`` -- the inverse feature autocorrelation ``R = (sum F'.T F' + gamma I)^-1``.

Task 0 is a plain ridge fit.  Every later batch downdates ``R`` with the
Woodbury identity and corrects ``W`` from the new rows alone, which gives
exactly the ridge solution over all rows seen so far.
"""

from __future__ import annotations

import io
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .expansion import Activation, ExpansionSpec, Kind, Projector, expand
from .matcore import (
    ShapeError,
    as_matrix,
    gram,
    matmul,
    spd_inverse,
    spd_solve,
    symmetrize,
)

__all__ = [
    "ClassRegistry",
    "LabeledFeatures",
    "AnalyticState",
    "JointSolution",
    "EmptyTaskWarning",
    "SnapshotError",
    "one_hot",
    "init_empty",
    "fit_task0",
    "faum_update",
    "adapt",
    "joint_fit",
    "predict_scores",
    "predict",
    "save_state",
    "load_state",
]

MIN_CHUNK_ROWS = 256


class EmptyTaskWarning(UserWarning):
    """``adapt`` was handed a task with no rows."""


class SnapshotError(ValueError):
    """A model snapshot could not be decoded."""

    def __init__(self, section: str, message: str):
        self.section = section
        super().__init__(f"snapshot section {section!r}: {message}")


@dataclass(frozen=True)
class ClassRegistry:
    labels: tuple[str, ...] = ()
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        index = {}
        for i, label in enumerate(labels):
            if label in index:
                raise ValueError(f"duplicate class label {label!r}")
            index[label] = i
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label) -> bool:
        return label in self._index

    def __iter__(self):
        return iter(self.labels)

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise KeyError(f"unknown class label {label!r}") from None

    def extended(self, labels: Iterable[str]) -> "ClassRegistry":
        """Registry with unseen ``labels`` appended in first-seen order."""
        new = list(self.labels)
        seen = set(self._index)
        for label in labels:
            label = str(label)
            if label not in seen:
                seen.add(label)
                new.append(label)
        if len(new) == len(self.labels):
            return self
        return ClassRegistry(tuple(new))


@dataclass(frozen=True)
class LabeledFeatures:
    """Pre-expansion features with one class label per row."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        f = as_matrix(self.features, name="features")
        labels = np.asarray([str(x) for x in np.asarray(self.labels, dtype=object).ravel()], dtype=object)
        if labels.shape[0] != f.shape[0]:
            raise ShapeError(f"{labels.shape[0]} labels for {f.shape[0]} feature rows")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", labels)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def blocks(self, size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield consecutive ``(features, labels)`` row blocks of at most ``size`` rows."""
        for start in range(0, self.n_rows, size):
            yield self.features[start:start + size], self.labels[start:start + size]

    def subset(self, mask_or_index) -> "LabeledFeatures":
        return LabeledFeatures(self.features[mask_or_index], self.labels[mask_or_index])

    @classmethod
    def concat(cls, parts: Sequence["LabeledFeatures"]) -> "LabeledFeatures":
        if not parts:
            raise ValueError("nothing to concatenate")
        dims = {p.feature_dim for p in parts}
        if len(dims) != 1:
            raise ShapeError(f"feature dimensions differ across parts: {sorted(dims)}")
        return cls(
            np.concatenate([p.features for p in parts], axis=0),
            np.concatenate([p.labels for p in parts]),
        )


@dataclass(frozen=True)
class AnalyticState:
    weights: np.ndarray = field(repr=False)
    faum: np.ndarray = field(repr=False)
    registry: ClassRegistry
    gamma: float
    projector: Projector
    samples_seen: int = 0
    tasks_seen: int = 0

    def __post_init__(self):
        d = self.projector.output_dim
        if self.faum.shape != (d, d):
            raise ShapeError(f"FAuM shape {self.faum.shape} does not match d_exp={d}")
        if self.weights.shape != (d, len(self.registry)):
            raise ShapeError(
                f"weights shape {self.weights.shape} does not match "
                f"({d}, {len(self.registry)})"
            )
        for m in (self.weights, self.faum):
            m.setflags(write=False)

    @property
    def d_exp(self) -> int:
        return self.projector.output_dim

    @property
    def n_classes(self) -> int:
        return len(self.registry)


class JointSolution(NamedTuple):
    """All-data ridge solution; scores like an :class:`AnalyticState`."""

    weights: np.ndarray
    registry: ClassRegistry
    projector: Projector


def _check_gamma(gamma) -> float:
    gamma = float(gamma)
    if not (math.isfinite(gamma) and gamma > 0):
        raise ValueError(f"gamma must be a positive finite number, got {gamma}")
    return gamma


def one_hot(labels, registry: ClassRegistry) -> np.ndarray:
    cols = [registry.index(str(label)) for label in labels]
    y = np.zeros((len(cols), len(registry)))
    y[np.arange(len(cols)), cols] = 1.0
    return y


def init_empty(gamma: float, d_exp: int, projector: Projector) -> AnalyticState:
    """State before any task: ``R = I / gamma`` and no classes."""
    gamma = _check_gamma(gamma)
    if d_exp != projector.output_dim:
        raise ShapeError(f"d_exp={d_exp} but projector outputs {projector.output_dim}")
    return AnalyticState(
        weights=np.zeros((d_exp, 0)),
        faum=np.eye(d_exp) / gamma,
        registry=ClassRegistry(),
        gamma=gamma,
        projector=projector,
    )


def _check_input_dim(projector: Projector, data) -> None:
    if data.feature_dim != projector.input_dim:
        raise ShapeError(
            f"features have {data.feature_dim} columns, projector expects {projector.input_dim}"
        )


def fit_task0(data: LabeledFeatures, gamma: float, projector: Projector) -> AnalyticState:
    """Closed-form ridge fit on the first task."""
    gamma = _check_gamma(gamma)
    if data.n_rows == 0:
        raise ValueError("task 0 has no samples")
    _check_input_dim(projector, data)
    f = expand(projector, data.features)
    registry = ClassRegistry().extended(data.labels)
    y = one_hot(data.labels, registry)
    a = gram(f)
    a[np.diag_indices_from(a)] += gamma
    r = spd_inverse(a)
    w = matmul(r, matmul(f.T, y))
    return AnalyticState(
        weights=w,
        faum=r,
        registry=registry,
        gamma=gamma,
        projector=projector,
        samples_seen=data.n_rows,
        tasks_seen=1,
    )


def faum_update(r: np.ndarray, f_exp: np.ndarray) -> np.ndarray:
    """Fold the rows of ``f_exp`` into the inverse autocorrelation ``r``.

    Computes ``r - r F.T (I + F r F.T)^-1 F r``, i.e. ``(r^-1 + F.T F)^-1``,
    with only an ``n x n`` factorization.
    """
    if f_exp.ndim != 2 or f_exp.shape[1] != r.shape[0]:
        raise ShapeError(f"cannot fold features {f_exp.shape} into FAuM {r.shape}")
    n = f_exp.shape[0]
    if n == 0:
        return r
    fr = matmul(f_exp, r)  # F R, and R F.T == (F R).T since R is symmetric
    inner = symmetrize(matmul(fr, f_exp.T))
    inner[np.diag_indices(n)] += 1.0
    return symmetrize(r - matmul(fr.T, spd_solve(inner, fr)))


def _pad_columns(w: np.ndarray, n_cols: int) -> np.ndarray:
    if w.shape[1] == n_cols:
        return w
    return np.hstack([w, np.zeros((w.shape[0], n_cols - w.shape[1]))])


def adapt(
    state: AnalyticState,
    data: LabeledFeatures,
    *,
    chunk_rows: int | None = None,
    faum: Callable[[np.ndarray, np.ndarray], np.ndarray] = faum_update,
) -> AnalyticState:
    """Absorb one task's data into ``state`` in a single pass.

    New labels get zero-initialised weight columns; each row block then updates
    the FAuM and corrects the weights with
    ``W <- W - R F.T F W + R F.T Y``.  Rows are consumed once through
    ``data.blocks``; splitting into blocks does not change the result.

    ``faum`` exists so tests can swap in a different downdate rule.
    """
    if data.n_rows == 0:
        warnings.warn(
            f"empty task passed to adapt; state unchanged (task #{state.tasks_seen})",
            EmptyTaskWarning,
            stacklevel=2,
        )
        return replace(state, tasks_seen=state.tasks_seen + 1)
    _check_input_dim(state.projector, data)
    size = chunk_rows or max(MIN_CHUNK_ROWS, state.d_exp)
    if size < 1:
        raise ValueError(f"chunk_rows must be >= 1, got {chunk_rows}")

    w, r, registry = state.weights, state.faum, state.registry
    rows = 0
    for feats, labels in data.blocks(size):
        registry = registry.extended(labels)
        w = _pad_columns(w, len(registry))
        f = expand(state.projector, feats)
        y = one_hot(labels, registry)
        r = faum(r, f)
        w = w + matmul(r, matmul(f.T, y - matmul(f, w)))
        rows += f.shape[0]

    return replace(
        state,
        weights=w,
        faum=r,
        registry=registry,
        samples_seen=state.samples_seen + rows,
        tasks_seen=state.tasks_seen + 1,
    )


def joint_fit(tasks: Sequence[LabeledFeatures], gamma: float, projector: Projector) -> JointSolution:
    """Ridge solution over the union of ``tasks`` via one dense SPD solve."""
    gamma = _check_gamma(gamma)
    tasks = [t for t in tasks if t.n_rows > 0]
    if not tasks:
        raise ValueError("joint_fit needs at least one sample")
    registry = ClassRegistry()
    for t in tasks:
        _check_input_dim(projector, t)
        registry = registry.extended(t.labels)
    d = projector.output_dim
    a = gamma * np.eye(d)
    rhs = np.zeros((d, len(registry)))
    for t in tasks:
        f = expand(projector, t.features)
        a += gram(f)
        rhs += matmul(f.T, one_hot(t.labels, registry))
    return JointSolution(spd_solve(a, rhs), registry, projector)


def predict_scores(model, features: np.ndarray) -> np.ndarray:
    """Class scores (logits) for pre-expansion ``features``.

    ``model`` is an :class:`AnalyticState` or :class:`JointSolution`.
    """
    features = as_matrix(features, name="features")
    if features.shape[1] != model.projector.input_dim:
        raise ShapeError(
            f"features have {features.shape[1]} columns, model expects "
            f"{model.projector.input_dim}"
        )
    return matmul(expand(model.projector, features), model.weights)


def predict(model, features: np.ndarray) -> list[str]:
    """Argmax label per row; ties go to the lowest column index."""
    if len(model.registry) == 0:
        raise ValueError("model has no registered classes")
    scores = predict_scores(model, features)
    return [model.registry.labels[i] for i in np.argmax(scores, axis=1)]


# -- snapshot format -------------------------------------------------------

MAGIC = b"ANST"
VERSION = 1
_KINDS = [Kind.RANDOM_GAUSSIAN, Kind.IDENTITY]
_ACTIVATIONS = [Activation.IDENTITY, Activation.RELU]


def _write_matrix(out: io.BytesIO, m: np.ndarray) -> None:
    out.write(struct.pack("<QQ", *m.shape))
    out.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def save_state(state: AnalyticState) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<d", state.gamma))
    out.write(struct.pack("<Q", state.d_exp))
    out.write(struct.pack("<Q", len(state.registry)))
    for label in state.registry:
        raw = label.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
    spec = state.projector.spec
    out.write(struct.pack("<QQQ", spec.input_dim, spec.output_dim, spec.seed))
    out.write(struct.pack("<BB", _KINDS.index(spec.kind), _ACTIVATIONS.index(spec.activation)))
    out.write(struct.pack("<d", spec.scale))
    _write_matrix(out, state.projector.matrix)
    _write_matrix(out, state.weights)
    _write_matrix(out, state.faum)
    out.write(struct.pack("<QQ", state.samples_seen, state.tasks_seen))
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, section: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise SnapshotError(
                section, f"truncated at offset {self.pos} (need {n} bytes, {len(self.buf) - self.pos} left)"
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, section: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))

    def matrix(self, section: str) -> np.ndarray:
        rows, cols = self.unpack("<QQ", section)
        if rows * cols * 8 > len(self.buf) - self.pos:
            raise SnapshotError(section, f"truncated at offset {self.pos} ({rows}x{cols} matrix)")
        data = self.take(rows * cols * 8, section)
        return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(rows, cols)


def load_state(buf: bytes) -> AnalyticState:
    """Decode bytes written by :func:`save_state`; raises :class:`SnapshotError`."""
    rd = _Reader(buf)
    if bytes(rd.take(4, "magic")) != MAGIC:
        raise SnapshotError("magic", "not an ANST model snapshot")
    (version,) = rd.unpack("<I", "version")
    if version != VERSION:
        raise SnapshotError("version", f"unsupported format version {version}")
    (gamma,) = rd.unpack("<d", "gamma")
    (d_exp,) = rd.unpack("<Q", "d_exp")
    (count,) = rd.unpack("<Q", "registry")
    labels = []
    for _ in range(count):
        (length,) = rd.unpack("<I", "registry")
        try:
            labels.append(bytes(rd.take(length, "registry")).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise SnapshotError("registry", f"label is not valid UTF-8: {exc}") from None
    input_dim, output_dim, seed = rd.unpack("<QQQ", "projector")
    kind, act = rd.unpack("<BB", "projector")
    (scale,) = rd.unpack("<d", "projector")
    pmat = rd.matrix("projector")
    weights = rd.matrix("weights")
    r = rd.matrix("faum")
    samples_seen, tasks_seen = rd.unpack("<QQ", "counters")
    if rd.pos != len(rd.buf):
        raise SnapshotError("trailer", f"{len(rd.buf) - rd.pos} unexpected trailing bytes")
    try:
        spec = ExpansionSpec(
            input_dim=input_dim,
            output_dim=output_dim,
            seed=seed,
            kind=_KINDS[kind],
            activation=_ACTIVATIONS[act],
            scale=scale,
        )
        projector = Projector(spec, pmat)
        if output_dim != d_exp:
            raise ShapeError(f"d_exp={d_exp} but projector outputs {output_dim}")
        return AnalyticState(
            weights=weights,
            faum=r,
            registry=ClassRegistry(tuple(labels)),
            gamma=_check_gamma(gamma),
            projector=projector,
            samples_seen=samples_seen,
            tasks_seen=tasks_seen,
        )
    except (ValueError, IndexError) as exc:
        raise SnapshotError("consistency", str(exc)) from None
