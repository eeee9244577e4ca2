"""Backward recursion, forward reconstruction, and closed-form state maps.

The backward pass produces the cost-to-go matrices K_k together with the
control weights W_k = R_k + B_k' K_{k+1} B_k, feedback gains
P_k = -W_k^{-1} (B_k' K_{k+1} A_k + S_k), closed-loop transitions
E_k = A_k + B_k P_k, and the spread matrices O_k = B_k W_k^{-1} B_k'. The
forward pass reconstructs the optimal controls for a direction l by a
single backward sweep that accumulates the influence of later-stage
direction blocks through the identities M_i^k = M_i^{k+1} E_k and
V_i^k = V_i^{k+1} E_k, where

    M_i^k = -(D1_i + D2_i P_i) E_{i-1} ... E_k,
    V_i^k = -K_{i+1} E_i ... E_k,

so memory and work stay linear in the horizon. The optimal control law is

    q_k(p_k) = P_k p_k
               + W_k^{-1} B_k' sum_{i>k} [(M_i^{k+1})' l_i + (V_i^{k+1})' C_i l_i]
               - W_k^{-1} (D2_k + C_k' K_{k+1} B_k)' l_k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import SymSolve, asymmetry, inf_norm, operator_norm, symmetrize
from .exceptions import IndefiniteW, ValidationError
from .model import Dims, QdpProblem, Trajectory, _direction_parts

W_MIN_EIG = 1e-12


@dataclass(frozen=True)
class RiccatiSolution:
    """Backward-pass output; all lists are stage-indexed tuples."""

    dims: Dims
    K: tuple
    W: tuple
    P: tuple
    E: tuple
    O: tuple
    closed_loop_identity_residual: float
    _W_solvers: tuple

    def solve_W(self, k: int, rhs: np.ndarray) -> np.ndarray:
        return self._W_solvers[k].solve(rhs)


def backward_pass(qdp: QdpProblem) -> RiccatiSolution:
    """Run the cost-to-go recursion K_N = QN down to K_0.

    Every W_k must be positive definite; that is guaranteed for transformed
    problems and holds for the original one whenever the reduced curvature
    bound is positive. The recursion also records the worst per-entry
    residual of the closed-loop identity
    K_k = E_k' K_{k+1} E_k + [I P_k']' H_k [I; P_k] as a cheap invariant.
    """
    dims = qdp.dims
    K = [None] * (dims.N + 1)
    W, P, E, O, solvers = [], [], [], [], []
    K[dims.N] = qdp.terminal_Q.copy()
    for k in range(dims.N - 1, -1, -1):
        st = qdp.stages[k]
        Knext = K[k + 1]
        Wk = symmetrize(st.R + st.B.T @ Knext @ st.B)
        fact = SymSolve(Wk)
        if fact.min_eig <= W_MIN_EIG:
            raise IndefiniteW(k, fact.min_eig)
        gain_rhs = st.B.T @ Knext @ st.A + st.S
        Pk = -fact.solve(gain_rhs)
        Ek = st.A + st.B @ Pk
        Kk = symmetrize(st.Q + st.A.T @ Knext @ st.A + gain_rhs.T @ Pk)
        Ok = symmetrize(st.B @ fact.solve(st.B.T))
        K[k] = Kk
        W.append(Wk)
        P.append(Pk)
        E.append(Ek)
        O.append(Ok)
        solvers.append(fact)
    for seq in (W, P, E, O, solvers):
        seq.reverse()

    worst = 0.0
    for k in range(dims.N):
        Hk = qdp.stages[k].hessian()
        stack = np.vstack([np.eye(dims.nx), P[k]])
        rebuilt = E[k].T @ K[k + 1] @ E[k] + stack.T @ Hk @ stack
        worst = max(worst, inf_norm(K[k] - rebuilt), asymmetry(K[k]))
    return RiccatiSolution(
        dims=dims,
        K=tuple(K),
        W=tuple(W),
        P=tuple(P),
        E=tuple(E),
        O=tuple(O),
        closed_loop_identity_residual=worst,
        _W_solvers=tuple(solvers),
    )


def _influence_sweep(rs: RiccatiSolution, qdp: QdpProblem, l):
    """Accumulated later-stage influence vectors for every stage.

    Returns (sm, sv) with sm[k] = sum_{i>k} (M_i^{k+1})' l_i and
    sv[k] = sum_{i>k} (V_i^{k+1})' C_i l_i.
    """
    dims = qdp.dims
    _, l_stages = _direction_parts(l, dims)
    sm = [np.zeros(dims.nx) for _ in range(dims.N)]
    sv = [np.zeros(dims.nx) for _ in range(dims.N)]
    for k in range(dims.N - 2, -1, -1):
        j = k + 1
        st = qdp.stages[j]
        lj = l_stages[j]
        m_jj = -(st.D1 + st.D2 @ rs.P[j])
        sm[k] = m_jj.T @ lj + rs.E[j].T @ sm[k + 1]
        sv[k] = rs.E[j].T @ (sv[k + 1] - rs.K[j + 1] @ (st.C @ lj))
    return sm, sv, l_stages


def forward_solve(rs: RiccatiSolution, qdp: QdpProblem, l) -> Trajectory:
    """Reconstruct the unique minimizer for direction l.

    States come from rolling the dynamics under the optimal controls, so the
    result is feasible by construction.
    """
    dims = qdp.dims
    sm, sv, l_stages = _influence_sweep(rs, qdp, l)
    l_minus1, _ = _direction_parts(l, dims)
    controls = np.empty((dims.N, dims.nu))
    states = np.empty((dims.N + 1, dims.nx))
    states[0] = l_minus1
    for k in range(dims.N):
        st = qdp.stages[k]
        lk = l_stages[k]
        drive = st.B.T @ (sm[k] + sv[k]) - (st.D2.T @ lk + st.B.T @ (rs.K[k + 1] @ (st.C @ lk)))
        controls[k] = rs.P[k] @ states[k] + rs.solve_W(k, drive)
        states[k + 1] = st.A @ states[k] + st.B @ controls[k] + st.C @ lk
    return Trajectory(states, controls)


@dataclass(frozen=True)
class CostToGo:
    """Tail-cost function J_k(p) = p' K p + linear . p + constant."""

    quadratic: np.ndarray
    linear: np.ndarray
    constant: float

    def value(self, p) -> float:
        p = np.asarray(p, dtype=float)
        return float(p @ self.quadratic @ p + self.linear @ p + self.constant)


def cost_to_go_terms(rs: RiccatiSolution, qdp: QdpProblem, l, k: int) -> CostToGo:
    """Coefficients of the tail cost from stage k for direction l.

    The constant term follows the backward recursion
    T_k = T_{k+1} + l_k' C_k' K_{k+1} C_k l_k - 2 (sm_k + sv_k) . C_k l_k
          - | (D2_k' + B_k' K_{k+1} C_k) l_k - B_k'(sm_k + sv_k) |^2_{W_k^{-1}}
    and vanishes whenever all direction blocks from stage k on are zero.
    """
    dims = qdp.dims
    if not 0 <= k <= dims.N:
        raise ValidationError(f"stage {k} outside [0, {dims.N}]")
    if k == dims.N:
        return CostToGo(rs.K[dims.N].copy(), np.zeros(dims.nx), 0.0)
    sm, sv, l_stages = _influence_sweep(rs, qdp, l)
    constant = 0.0
    for j in range(dims.N - 1, k - 1, -1):
        st = qdp.stages[j]
        lj = l_stages[j]
        cl = st.C @ lj
        tprime = constant + cl @ rs.K[j + 1] @ cl - 2.0 * (sm[j] + sv[j]) @ cl
        v = st.D2.T @ lj + st.B.T @ (rs.K[j + 1] @ cl) - st.B.T @ (sm[j] + sv[j])
        constant = tprime - float(v @ rs.solve_W(j, v))
    st = qdp.stages[k]
    lk = l_stages[k]
    shat = -(st.D1 + st.D2 @ rs.P[k]).T @ lk + rs.E[k].T @ sm[k]
    vhat = rs.E[k].T @ (sv[k] - rs.K[k + 1] @ (st.C @ lk))
    return CostToGo(rs.K[k].copy(), -2.0 * (shat + vhat), constant)


def cost_to_go(rs: RiccatiSolution, qdp: QdpProblem, l, k: int, p_k) -> float:
    """Optimal tail cost from stage k started at state p_k."""
    return cost_to_go_terms(rs, qdp, l, k).value(p_k)


def _closed_loop_table(rs: RiccatiSolution):
    """prod[a][b] = E_b E_{b-1} ... E_a for 0 <= a <= b <= N-1."""
    N = rs.dims.N
    nx = rs.dims.nx
    prod = [[None] * N for _ in range(N)]
    for a in range(N):
        acc = np.eye(nx)
        for b in range(a, N):
            acc = rs.E[b] @ acc
            prod[a][b] = acc
    return prod


def _product(prod, a: int, b: int, nx: int) -> np.ndarray:
    """E_b ... E_a with the empty-range convention of the identity."""
    if a > b:
        return np.eye(nx)
    return prod[a][b]


def materialize_influence(rs: RiccatiSolution, qdp: QdpProblem, i: int):
    """Explicit state-influence matrices (U_i^k, F_i^k) for one source stage.

    For all k in [0, N]:
        U_i^k = sum_{s < min(i,k)} (E_{k-1}..E_{s+1}) O_s (M_i^{s+1})'
                - (E_{k-1}..E_{i+1}) B_i W_i^{-1} D2_i'   [if i < k]
        F_i^k = sum_{s < min(i,k)} (E_{k-1}..E_{s+1}) O_s (V_i^{s+1})'
                + (E_{k-1}..E_{i+1}) (I - O_i K_{i+1})    [if i < k]
    """
    dims = qdp.dims
    if not 0 <= i <= dims.N - 1:
        raise ValidationError(f"source stage {i} outside [0, {dims.N - 1}]")
    nx = dims.nx
    prod = _closed_loop_table(rs)
    st_i = qdp.stages[i]
    m_head = -(st_i.D1 + st_i.D2 @ rs.P[i])
    bw_d2 = st_i.B @ rs.solve_W(i, st_i.D2.T)
    tail_f = np.eye(nx) - rs.O[i] @ rs.K[i + 1]
    U = np.zeros((dims.N + 1, nx, dims.nd))
    F = np.zeros((dims.N + 1, nx, nx))
    for k in range(dims.N + 1):
        u_acc = np.zeros((nx, dims.nd))
        f_acc = np.zeros((nx, nx))
        for s in range(min(i, k)):
            left = _product(prod, s + 1, k - 1, nx)
            m_is1 = m_head @ _product(prod, s + 1, i - 1, nx)
            v_is1 = -rs.K[i + 1] @ _product(prod, s + 1, i, nx)
            u_acc += left @ rs.O[s] @ m_is1.T
            f_acc += left @ rs.O[s] @ v_is1.T
        if i + 1 <= k:
            left = _product(prod, i + 1, k - 1, nx)
            u_acc -= left @ bw_d2
            f_acc += left @ tail_f
        U[k] = u_acc
        F[k] = f_acc
    return U, F


def closed_form_p(rs: RiccatiSolution, qdp: QdpProblem, l) -> np.ndarray:
    """Optimal states as an explicit linear map of the direction blocks.

    p_k = (E_{k-1}..E_0) l_{-1} + sum_i [U_i^k l_i + F_i^k C_i l_i], with the
    sum taken over the support of l. Matches the forward reconstruction.
    """
    dims = qdp.dims
    l_minus1, l_stages = _direction_parts(l, dims)
    prod = _closed_loop_table(rs)
    states = np.zeros((dims.N + 1, dims.nx))
    for k in range(dims.N + 1):
        states[k] = _product(prod, 0, k - 1, dims.nx) @ l_minus1
    for i in range(dims.N):
        li = l_stages[i]
        if not np.any(li):
            continue
        U, F = materialize_influence(rs, qdp, i)
        ci_li = qdp.stages[i].C @ li
        for k in range(dims.N + 1):
            states[k] += U[k] @ li + F[k] @ ci_li
    return states


def closed_loop_product_norm(rs: RiccatiSolution, i: int, j: int) -> float:
    """Spectral norm of the closed-loop product E_j E_{j-1} ... E_i."""
    if not 0 <= i <= j <= rs.dims.N - 1:
        raise ValidationError(f"need 0 <= i <= j <= N-1, got i={i}, j={j}")
    acc = np.eye(rs.dims.nx)
    for idx in range(i, j + 1):
        acc = rs.E[idx] @ acc
    return operator_norm(acc)
