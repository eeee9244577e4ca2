"""Constraint Jacobian assembly, orthonormal kernel bases, curvature bounds.

The equality constraints of a stagewise program stack into a staircase
Jacobian G acting on the stage-ordered vector (p_0; q_0; ...; p_N): the
first block row pins p_0 and block row k encodes
p_{k+1} - A_k p_k - B_k q_k = C_k l_k. The trailing identity in every block
row makes G full row rank by construction, so an orthonormal kernel basis Z
always exists and the reduced curvature bound gamma = lambda_min(Z' H Z) is
well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._linalg import inf_norm, sym_eigvals
from .exceptions import ValidationError
from .model import Dims, QdpProblem, _direction_parts

RANK_TOL = 1e-10


def staircase_jacobian(dims: Dims, A_blocks, B_blocks) -> np.ndarray:
    """Dense constraint Jacobian from dynamics Jacobians."""
    nx, nu = dims.nx, dims.nu
    G = np.zeros((dims.n_con, dims.n_z))
    G[:nx, :nx] = np.eye(nx)
    for k in range(dims.N):
        row = (k + 1) * nx
        col = k * (nx + nu)
        G[row:row + nx, col:col + nx] = -np.asarray(A_blocks[k], dtype=float)
        G[row:row + nx, col + nx:col + nx + nu] = -np.asarray(B_blocks[k], dtype=float)
        G[row:row + nx, col + nx + nu:col + 2 * nx + nu] = np.eye(nx)
    return G


@dataclass(frozen=True)
class ConstraintSystem:
    """Jacobian G and right-hand side y of G w = y for a fixed direction."""

    dims: Dims
    G: np.ndarray
    y: np.ndarray

    def residual(self, w) -> float:
        return inf_norm(self.G @ np.asarray(w, dtype=float) - self.y)


@dataclass(frozen=True)
class NullspaceBasis:
    """Orthonormal columns spanning the kernel of the constraint Jacobian."""

    Z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Z", np.asarray(self.Z, dtype=float))


def assemble_constraints(qdp: QdpProblem, l) -> ConstraintSystem:
    """Build G and the direction-dependent right-hand side y.

    y carries l_{-1} in the initial block and C_k l_k in block k. The full
    row rank implied by the staircase is confirmed numerically through the
    smallest eigenvalue of G G'.
    """
    dims = qdp.dims
    G = staircase_jacobian(dims, [st.A for st in qdp.stages], [st.B for st in qdp.stages])
    l_minus1, l_stages = _direction_parts(l, dims)
    y = np.zeros(dims.n_con)
    y[:dims.nx] = l_minus1
    for k, st in enumerate(qdp.stages):
        y[(k + 1) * dims.nx:(k + 2) * dims.nx] = st.C @ l_stages[k]
    smallest = float(sym_eigvals(G @ G.T)[0])
    if smallest <= RANK_TOL:
        raise ValidationError(
            f"constraint Jacobian numerically rank deficient "
            f"(min eig of G G' = {smallest:.3e}); staircase structure violated"
        )
    return ConstraintSystem(dims=dims, G=G, y=y)


def nullspace_basis(cs: ConstraintSystem) -> NullspaceBasis:
    """Orthonormal kernel basis from a pivoted QR factorization of G'.

    The trailing orthogonal columns beyond the row space of G span the
    kernel exactly; rank deficiency cannot occur for staircase inputs and is
    reported as an error if the factorization disagrees.
    """
    G = cs.G
    m = G.shape[0]
    Qfac, Rfac, _ = scipy.linalg.qr(G.T, mode="full", pivoting=True)
    diag = np.abs(np.diag(Rfac[:m, :m]))
    if diag.min() <= RANK_TOL * max(1.0, diag.max()):
        raise ValidationError(
            "rank-revealing factorization found a deficient constraint Jacobian"
        )
    Z = Qfac[:, m:]
    basis = NullspaceBasis(Z=Z)
    gz = inf_norm(G @ Z)
    orth = inf_norm(Z.T @ Z - np.eye(Z.shape[1]))
    if gz > 1e-10 or orth > 1e-10:
        raise ValidationError(
            f"kernel basis failed residual checks (|GZ| = {gz:.3e}, "
            f"|Z'Z - I| = {orth:.3e})"
        )
    return basis


def reduced_hessian_gamma(qdp: QdpProblem) -> float:
    """Smallest eigenvalue of Z' H Z with orthonormal Z.

    A positive value certifies the second-order sufficient condition for
    this horizon; zero or negative values are valid diagnostics.
    """
    zero_dir = np.zeros(qdp.dims.n_dir)
    Z = nullspace_basis(assemble_constraints(qdp, zero_dir)).Z
    H = qdp.full_hessian()
    reduced = Z.T @ H @ Z
    return float(sym_eigvals(reduced)[0])
