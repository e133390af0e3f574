"""Frozen random feature expansion.

The projector is drawn once from a Philox counter-based generator keyed by
``ExpansionSpec.seed`` and never changes afterwards, so every task sees the
same map ``F -> act(F @ P)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .matcore import ShapeError, as_matrix, matmul

__all__ = ["Kind", "Activation", "ExpansionSpec", "Projector", "make_projector", "expand"]

DEFAULT_OUTPUT_DIM = 1000
MAX_SEED = 2**64 - 1


class Kind(str, Enum):
    RANDOM_GAUSSIAN = "random_gaussian"
    IDENTITY = "identity"


class Activation(str, Enum):
    IDENTITY = "identity"
    RELU = "relu"


@dataclass(frozen=True)
class ExpansionSpec:
    input_dim: int
    output_dim: int = DEFAULT_OUTPUT_DIM
    seed: int = 0
    kind: Kind = Kind.RANDOM_GAUSSIAN
    activation: Activation = Activation.IDENTITY
    scale: float | None = None  # None -> 1/sqrt(input_dim)

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "activation", Activation(self.activation))
        if int(self.input_dim) < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if int(self.output_dim) < 1:
            raise ValueError(f"output_dim must be >= 1, got {self.output_dim}")
        if not 0 <= int(self.seed) <= MAX_SEED:
            raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {self.seed}")
        if self.kind is Kind.IDENTITY and self.input_dim != self.output_dim:
            raise ValueError(
                f"identity expansion needs input_dim == output_dim, "
                f"got {self.input_dim} and {self.output_dim}"
            )
        scale = 1.0 / math.sqrt(self.input_dim) if self.scale is None else float(self.scale)
        if not (math.isfinite(scale) and scale > 0):
            raise ValueError(f"scale must be a positive finite number, got {self.scale}")
        object.__setattr__(self, "input_dim", int(self.input_dim))
        object.__setattr__(self, "output_dim", int(self.output_dim))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "scale", scale)

    @classmethod
    def identity(cls, dim: int) -> "ExpansionSpec":
        return cls(input_dim=dim, output_dim=dim, kind=Kind.IDENTITY)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "seed": self.seed,
            "kind": self.kind.value,
            "activation": self.activation.value,
            "scale": self.scale,
        }


@dataclass(frozen=True)
class Projector:
    spec: ExpansionSpec
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = as_matrix(self.matrix, name="projector matrix")
        if m.shape != (self.spec.input_dim, self.spec.output_dim):
            raise ShapeError(
                f"projector matrix {m.shape} does not match spec "
                f"({self.spec.input_dim}, {self.spec.output_dim})"
            )
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim


def make_projector(spec: ExpansionSpec) -> Projector:
    """Build the frozen projection matrix described by ``spec``.

    ``random_gaussian`` entries are i.i.d. ``N(0, scale**2)``, drawn row-major
    from ``numpy.random.Generator(Philox(seed))``.
    """
    if spec.kind is Kind.IDENTITY:
        return Projector(spec, np.eye(spec.input_dim))
    rng = np.random.Generator(np.random.Philox(spec.seed))
    p = rng.standard_normal((spec.input_dim, spec.output_dim)) * spec.scale
    return Projector(spec, p)


def expand(p: Projector, f: np.ndarray) -> np.ndarray:
    if f.ndim != 2 or f.shape[1] != p.input_dim:
        raise ShapeError(
            f"features of shape {f.shape} do not match projector input_dim {p.input_dim}"
        )
    if p.spec.kind is Kind.IDENTITY:
        out = np.array(f, dtype=np.float64, copy=True)
    else:
        out = matmul(f, p.matrix)
    if p.spec.activation is Activation.RELU:
        np.maximum(out, 0.0, out=out)
    return out
