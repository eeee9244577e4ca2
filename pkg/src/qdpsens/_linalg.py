"""Small dense linear-algebra helpers shared across modules.

Operator norms and symmetric solves go through explicit eigendecompositions
so that algebraically identical recursions in different modules produce
bitwise-comparable results.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .exceptions import ValidationError


def symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def asymmetry(mat: np.ndarray) -> float:
    """Max-abs deviation of a square matrix from its transpose."""
    if mat.size == 0:
        return 0.0
    return float(np.max(np.abs(mat - mat.T)))


def operator_norm(mat: np.ndarray) -> float:
    """Spectral norm, computed as the top eigenvalue of the Gram matrix."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.size == 0:
        return 0.0
    gram = mat @ mat.T if mat.shape[0] <= mat.shape[1] else mat.T @ mat
    top = float(scipy.linalg.eigvalsh(symmetrize(gram))[-1])
    return float(np.sqrt(max(top, 0.0)))


def sym_eigvals(mat: np.ndarray) -> np.ndarray:
    """Eigenvalues of a (nearly) symmetric matrix, ascending."""
    return scipy.linalg.eigvalsh(symmetrize(mat))


def inf_norm(vec_or_mat: np.ndarray) -> float:
    arr = np.asarray(vec_or_mat)
    if arr.size == 0:
        return 0.0
    return float(np.max(np.abs(arr)))


class SymSolve:
    """Eigendecomposition-backed solver for a symmetric matrix.

    Exposes the spectrum used for definiteness checks and applies the
    inverse through the same factorization, so callers that must agree to
    tight per-entry tolerances share one numerical path.
    """

    def __init__(self, mat: np.ndarray):
        mat = symmetrize(np.asarray(mat, dtype=float))
        if not np.all(np.isfinite(mat)):
            raise ValidationError("symmetric solve requires finite entries")
        self.eigvals, self._vecs = scipy.linalg.eigh(mat)
        self.shape = mat.shape

    @property
    def min_eig(self) -> float:
        return float(self.eigvals[0])

    @property
    def min_abs_eig(self) -> float:
        return float(np.min(np.abs(self.eigvals)))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        squeeze = rhs.ndim == 1
        rhs2 = rhs[:, None] if squeeze else rhs
        out = self._vecs @ ((self._vecs.T @ rhs2) / self.eigvals[:, None])
        return out[:, 0] if squeeze else out
