"""Dense float64 matrix primitives and SPD solvers.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  The SPD
routines go straight to LAPACK ``potrf``/``potrs``/``potri`` so a failed
factorization reports the exact pivot where it broke down.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import blas, lapack

__all__ = [
    "ShapeError",
    "NotPositiveDefiniteError",
    "AsymmetricMatrixError",
    "as_matrix",
    "matmul",
    "gram",
    "spd_solve",
    "spd_inverse",
    "frobenius_norm",
    "symmetrize",
    "relative_error",
]

SYMMETRY_RTOL = 1e-9


class ShapeError(ValueError):
    """Operand shapes do not compose."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky factorization broke down.

    ``pivot`` is the 0-based index of the first non-positive pivot.
    """

    def __init__(self, pivot: int, size: int):
        self.pivot = pivot
        self.size = size
        super().__init__(
            f"matrix is not positive definite: Cholesky pivot {pivot} "
            f"(0-based) of {size} is not positive"
        )


class AsymmetricMatrixError(ValueError):
    """Matrix handed to an SPD routine is not symmetric."""


def as_matrix(x, *, name: str = "matrix", check_finite: bool = True) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous 2-D float64 array.

    Rejects anything that is not 2-D and, unless ``check_finite`` is false,
    any NaN or infinite entry.
    """
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if check_finite and not np.isfinite(a).all():
        bad = np.argwhere(~np.isfinite(a))[0]
        raise ValueError(f"{name} has a non-finite entry at row {bad[0]}, col {bad[1]}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Return ``(a + a.T) / 2``; the result is exactly symmetric."""
    return 0.5 * (a + a.T)


def _mirror_upper(u: np.ndarray) -> np.ndarray:
    return np.triu(u) + np.triu(u, 1).T


def gram(f: np.ndarray) -> np.ndarray:
    """``f.T @ f`` computed on the upper triangle and mirrored."""
    if f.ndim != 2:
        raise ShapeError(f"gram expects a 2-D matrix, got shape {f.shape}")
    n, d = f.shape
    if d == 0:
        raise ShapeError("gram expects at least one column")
    if n == 0:
        return np.zeros((d, d))
    # syrk fills the upper triangle of f.T f only
    u = blas.dsyrk(1.0, np.asfortranarray(f, dtype=np.float64), trans=1, lower=0)
    return _mirror_upper(u)


def _check_spd_input(a: np.ndarray) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"SPD routine expects a square matrix, got shape {a.shape}")
    scale = np.abs(a).max() if a.size else 0.0
    asym = np.abs(a - a.T).max() if a.size else 0.0
    if asym > SYMMETRY_RTOL * max(scale, np.finfo(float).tiny):
        raise AsymmetricMatrixError(
            f"matrix is not symmetric: max |a - a.T| = {asym:.3e} "
            f"exceeds {SYMMETRY_RTOL:g} relative to max |a| = {scale:.3e}"
        )


def _cholesky_upper(a: np.ndarray) -> np.ndarray:
    c, info = lapack.dpotrf(a, lower=0, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1, a.shape[0])
    if info < 0:  # pragma: no cover - argument error inside LAPACK
        raise ValueError(f"dpotrf rejected argument {-info}")
    return c


def spd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive definite ``a`` via Cholesky."""
    _check_spd_input(a)
    if b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ShapeError(f"right-hand side {b.shape} does not match {a.shape}")
    if a.shape[0] == 0 or b.shape[1] == 0:
        return np.zeros((a.shape[0], b.shape[1]))
    c = _cholesky_upper(a)
    x, info = lapack.dpotrs(c, b, lower=0)
    if info != 0:  # pragma: no cover
        raise ValueError(f"dpotrs failed with info={info}")
    return x


def spd_inverse(a: np.ndarray) -> np.ndarray:
    """Explicit inverse of an SPD matrix, symmetrized before return."""
    _check_spd_input(a)
    if a.shape[0] == 0:
        return np.zeros((0, 0))
    c = _cholesky_upper(a)
    inv, info = lapack.dpotri(c, lower=0)
    if info != 0:  # pragma: no cover - potrf already succeeded
        raise NotPositiveDefiniteError(info - 1, a.shape[0])
    return _mirror_upper(inv)


def frobenius_norm(a: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    return float(np.linalg.norm(a, "fro"))


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """``||actual - expected||_F / ||expected||_F`` (absolute if expected is 0)."""
    if actual.shape != expected.shape:
        raise ShapeError(f"cannot compare {actual.shape} with {expected.shape}")
    diff = frobenius_norm(actual - expected)
    ref = frobenius_norm(expected)
    return diff / ref if ref > 0 else diff
