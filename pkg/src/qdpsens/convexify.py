"""Constraint-preserving convexification of indefinite stagewise programs.

The transformation subtracts a quadratic x' Qbar_k x from each stage cost
and adds it back one stage later through the dynamics, which leaves the
constrained minimizer unchanged while reshaping the stage Hessians. The
backward recursion picks Qbar so every transformed control block Rt_k can
absorb all cross curvature, pinning the Schur complement of Rt_k inside the
transformed stage Hessian to delta * I:

    Qt_N = delta I,  Qbar_N = Q_N - delta I,
    and for k = N-1, ..., 0:
        Qhat_k  = Q_k  + A_k' Qbar_{k+1} A_k
        St_k    = S_k  + B_k' Qbar_{k+1} A_k
        Rt_k    = R_k  + B_k' Qbar_{k+1} B_k
        Dt1_k   = D1_k + C_k' Qbar_{k+1} A_k
        Dt2_k   = D2_k + C_k' Qbar_{k+1} B_k
        Qt_k    = St_k' Rt_k^{-1} St_k + delta I
        Qbar_k  = Qhat_k - Qt_k

For any shift delta strictly between zero and the reduced-curvature bound
gamma, every Rt_k and every transformed stage Hessian is positive definite.
The quadratic-in-l constant block produced by the update is not stored; it
moves no minimizer. Where a reported objective difference needs it (the
equivalence report below), it is reconstructed on the fly from Qbar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import SymSolve, inf_norm, symmetrize
from .exceptions import (
    NonInvertibleRtilde,
    NotPositiveDefinite,
    SoscFailed,
    ValidationError,
)
from .model import Dims, QdpProblem, _direction_parts

INVERTIBILITY_TOL = 1e-12


@dataclass(frozen=True)
class ConvexifiedStage:
    Qt: np.ndarray
    Rt: np.ndarray
    St: np.ndarray
    Dt1: np.ndarray
    Dt2: np.ndarray

    def hessian(self) -> np.ndarray:
        return np.block([[self.Qt, self.St.T], [self.St, self.Rt]])


@dataclass(frozen=True)
class ConvexifiedQdp:
    """Output of the shifting recursion: transformed blocks plus the shifts."""

    dims: Dims
    delta: float
    stages: tuple
    terminal_Qt: np.ndarray
    Qbar: tuple
    semidefinite: bool
    _source: QdpProblem

    def as_qdp(self) -> QdpProblem:
        """Repackage as a plain stagewise program (dynamics unchanged)."""
        src = self._source
        stages = [
            {
                "Q": st.Qt,
                "R": st.Rt,
                "S": st.St,
                "D1": st.Dt1,
                "D2": st.Dt2,
                "A": src.stages[k].A,
                "B": src.stages[k].B,
                "C": src.stages[k].C,
            }
            for k, st in enumerate(self.stages)
        ]
        return QdpProblem(self.dims, stages, self.terminal_Qt)

    def direction_constant(self, l) -> float:
        """Quadratic-in-l constant dropped from the stored stage blocks.

        Equals sum_k l_k' C_k' Qbar_{k+1} C_k l_k, the corner block of the
        bordered update.
        """
        _, l_stages = _direction_parts(l, self.dims)
        total = 0.0
        for k, src in enumerate(self._source.stages):
            v = src.C @ l_stages[k]
            total += v @ self.Qbar[k + 1] @ v
        return float(total)

    def max_block_norm(self) -> float:
        """Largest spectral norm over transformed cost blocks."""
        from ._linalg import operator_norm

        worst = operator_norm(self.terminal_Qt)
        for st in self.stages:
            for blk in (st.Qt, st.Rt, st.St, st.Dt1, st.Dt2):
                worst = max(worst, operator_norm(blk))
        return worst

    def to_json_dict(self) -> dict:
        data = self.as_qdp().to_json_dict()
        data["delta"] = float(self.delta)
        data["Qbar"] = [[list(map(float, r)) for r in np.asarray(q)] for q in self.Qbar]
        return data


def convexify(qdp: QdpProblem, delta: float) -> ConvexifiedQdp:
    """Run the shifting recursion with a fixed shift parameter.

    delta = 0 is allowed (the output Hessians are then only positive
    semidefinite and the result is flagged accordingly); any invertible but
    indefinite Rt_k at delta = 0 is tolerated, while for delta > 0 a
    negative Rt eigenvalue is an error because the positive-definiteness
    guarantee has been lost.
    """
    if delta < 0:
        raise ValidationError(f"shift parameter must be >= 0, got {delta}")
    dims = qdp.dims
    nx = dims.nx
    eye = np.eye(nx)
    terminal_Qt = delta * eye
    qbar = [None] * (dims.N + 1)
    qbar[dims.N] = symmetrize(qdp.terminal_Q - terminal_Qt)
    stages = [None] * dims.N
    for k in range(dims.N - 1, -1, -1):
        st = qdp.stages[k]
        qb = qbar[k + 1]
        Qhat = symmetrize(st.Q + st.A.T @ qb @ st.A)
        St = st.S + st.B.T @ qb @ st.A
        Rt = symmetrize(st.R + st.B.T @ qb @ st.B)
        Dt1 = st.D1 + st.C.T @ qb @ st.A
        Dt2 = st.D2 + st.C.T @ qb @ st.B
        fact = SymSolve(Rt)
        if fact.min_abs_eig < INVERTIBILITY_TOL:
            raise NonInvertibleRtilde(k, fact.min_abs_eig)
        if delta > 0 and fact.min_eig < 0:
            raise NotPositiveDefinite(k, fact.min_eig)
        Qt = symmetrize(St.T @ fact.solve(St)) + delta * eye
        qbar[k] = symmetrize(Qhat - Qt)
        stages[k] = ConvexifiedStage(Qt=Qt, Rt=Rt, St=St, Dt1=Dt1, Dt2=Dt2)
    return ConvexifiedQdp(
        dims=dims,
        delta=float(delta),
        stages=tuple(stages),
        terminal_Qt=terminal_Qt,
        Qbar=tuple(qbar),
        semidefinite=(delta == 0.0),
        _source=qdp,
    )


def select_delta(qdp: QdpProblem, fraction: float = 0.9) -> float:
    """Shift as a fraction of the reduced-curvature bound gamma.

    The sufficient interval is (0, gamma); pushing the shift close to gamma
    gives the transformed problem the largest certified curvature floor, so
    the default sits at 0.9.
    """
    from .nullspace import reduced_hessian_gamma

    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"fraction must lie in (0, 1), got {fraction}")
    gamma = reduced_hessian_gamma(qdp)
    if gamma <= 0.0:
        raise SoscFailed(gamma)
    return fraction * gamma


def shifted_problem(qdp: QdpProblem, delta: float) -> QdpProblem:
    """Replace every state cost block, terminal included, by Q_k - delta I."""
    eye = np.eye(qdp.dims.nx)
    stages = [
        {
            "Q": st.Q - delta * eye,
            "R": st.R,
            "S": st.S,
            "D1": st.D1,
            "D2": st.D2,
            "A": st.A,
            "B": st.B,
            "C": st.C,
        }
        for st in qdp.stages
    ]
    return QdpProblem(qdp.dims, stages, qdp.terminal_Q - delta * eye)


@dataclass(frozen=True)
class EquivalenceReport:
    """Cross-check of the transformed problem against the original one."""

    primal_gap: float
    objective_offset: float
    expected_offset: float
    offset_error: float
    passed: bool


def verify_equivalence(qdp: QdpProblem, conv: ConvexifiedQdp, l) -> EquivalenceReport:
    """Solve both problems for the same direction and compare.

    The original indefinite program goes through the dense saddle-point
    oracle; the transformed one through the backward/forward recursion. The
    two minimizers must agree, and the objective difference (with the
    dropped l-quadratic constant restored) must equal -l_{-1}' Qbar_0 l_{-1}.
    """
    from .model import eval_qdp_objective
    from .riccati import backward_pass, forward_solve
    from .verify import dense_kkt_solve

    kkt = dense_kkt_solve(qdp, l)
    conv_qdp = conv.as_qdp()
    rs = backward_pass(conv_qdp)
    traj = forward_solve(rs, conv_qdp, l)

    w_kkt = kkt.trajectory.stacked()
    w_ric = traj.stacked()
    scale = max(1.0, inf_norm(w_kkt))
    primal_gap = inf_norm(w_ric - w_kkt) / scale

    obj_orig = eval_qdp_objective(qdp, l, kkt.trajectory)
    obj_conv = eval_qdp_objective(conv_qdp, l, traj) + conv.direction_constant(l)
    offset = obj_conv - obj_orig

    l_minus1, _ = _direction_parts(l, qdp.dims)
    expected = -float(l_minus1 @ conv.Qbar[0] @ l_minus1)
    offset_scale = max(1.0, abs(obj_orig), abs(obj_conv))
    offset_error = abs(offset - expected) / offset_scale
    return EquivalenceReport(
        primal_gap=primal_gap,
        objective_offset=offset,
        expected_offset=expected,
        offset_error=offset_error,
        passed=bool(primal_gap <= 1e-8 and offset_error <= 1e-8),
    )
