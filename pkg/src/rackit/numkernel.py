"""Symmetric-matrix primitives backing the layerwise solvers.

Gram accumulators are plain float64 arrays built one activation column at a
time; factorization and inversion go through LAPACK (dpotrf/dpotri) so the
solvers only ever see explicitly symmetric matrices. Every routine works in
64-bit floats regardless of how model weights are stored.

Accumulators are single-writer: nothing here locks, callers must not share a
matrix between concurrent updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotri

from .errors import CholeskyError, NumericalError, ValidationError

__all__ = [
    "SymMatrix",
    "CholeskyFactor",
    "accumulate_gram",
    "dampen",
    "cholesky",
    "inverse_via_cholesky",
]


@dataclass
class SymMatrix:
    """Square symmetric float64 matrix.

    ``data`` is row-major with ``data[i, j] == data[j, i]`` exactly. The plain
    constructor trusts its inputs; use :meth:`from_array` for untrusted data.
    """

    dim: int
    data: np.ndarray

    @classmethod
    def zeros(cls, dim: int) -> "SymMatrix":
        if dim < 1:
            raise ValidationError(f"matrix dimension must be >= 1, got {dim}")
        return cls(dim, np.zeros((dim, dim), dtype=np.float64))

    @classmethod
    def from_array(cls, arr) -> "SymMatrix":
        """Validated constructor: square, finite, exactly symmetric."""
        data = np.array(arr, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise ValidationError(f"expected a square matrix, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValidationError("matrix entries must be finite")
        if not (data == data.T).all():
            raise ValidationError("matrix is not exactly symmetric")
        return cls(data.shape[0], data)

    def copy(self) -> "SymMatrix":
        return SymMatrix(self.dim, self.data.copy())


@dataclass
class CholeskyFactor:
    """Lower-triangular factor L with L @ L.T reconstructing the source."""

    dim: int
    lower: np.ndarray

    def __post_init__(self):
        if not (np.diag(self.lower) > 0).all():
            raise NumericalError("Cholesky factor must have positive diagonal")

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def accumulate_gram(acc: SymMatrix, column) -> SymMatrix:
    """Rank-1 update ``acc += column @ column.T``, in place.

    The outer product of a column with itself is elementwise symmetric, so the
    exact-symmetry invariant survives without any mirroring step. Updates are
    applied in arrival order; the same column sequence always reproduces the
    same bits.
    """
    col = np.asarray(column, dtype=np.float64)
    if col.ndim != 1 or col.shape[0] != acc.dim:
        raise ValidationError(
            f"column has shape {col.shape}, accumulator dimension is {acc.dim}"
        )
    if not np.isfinite(col).all():
        raise ValidationError("column entries must be finite")
    acc.data += col[:, None] * col[None, :]
    return acc


def dampen(m: SymMatrix, fraction: float) -> SymMatrix:
    """Return a copy with ``fraction * mean(diag)`` added to every diagonal entry.

    A zero mean diagonal falls back to adding ``fraction * 1.0`` so that a
    positive fraction always moves the matrix toward positive definiteness.
    """
    if fraction < 0:
        raise ValidationError(f"dampening fraction must be >= 0, got {fraction}")
    mean_diag = float(np.trace(m.data)) / m.dim
    shift = fraction * (mean_diag if mean_diag != 0.0 else 1.0)
    out = m.data.copy()
    out[np.diag_indices(m.dim)] += shift
    return SymMatrix(m.dim, out)


def cholesky(m: SymMatrix) -> CholeskyFactor:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises :class:`CholeskyError` carrying the 0-based index of the first
    non-positive pivot.
    """
    c, info = dpotrf(m.data, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise CholeskyError(info - 1)
    if info < 0:
        raise NumericalError(f"dpotrf rejected argument {-info}")
    return CholeskyFactor(m.dim, c)


def inverse_via_cholesky(m: SymMatrix) -> SymMatrix:
    """Inverse of a symmetric positive definite matrix via its Cholesky factor."""
    c, info = dpotrf(m.data, lower=1, clean=0, overwrite_a=0)
    if info > 0:
        raise CholeskyError(info - 1)
    if info < 0:
        raise NumericalError(f"dpotrf rejected argument {-info}")
    inv, info = dpotri(c, lower=1)
    if info != 0:
        raise NumericalError(f"dpotri failed with info={info}")
    # dpotri fills one triangle only; mirror it so symmetry is exact.
    lower = np.tril(inv)
    full = lower + np.tril(inv, -1).T
    if not np.isfinite(full).all():
        raise NumericalError("inverse contains non-finite entries")
    return SymMatrix(m.dim, full)
