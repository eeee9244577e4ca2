"""Independent oracles: dense saddle solves, Newton iteration, derivative checks.

Everything here trades speed for transparency: systems are assembled densely
and factorized with partial pivoting, step acceptance is full-step Newton
with no globalization, and derivative checks run central differences. These
paths deliberately share no code with the recursion-based solvers they
cross-check.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._linalg import inf_norm, sym_eigvals
from .convexify import convexify, select_delta
from .exceptions import SingularKkt, SolverDiverged, SoscFailed, QdpSensError
from .model import (
    Dims,
    NldpModel,
    QdpProblem,
    Trajectory,
    _direction_parts,
    cost_gradient_vector,
)
from .nullspace import assemble_constraints, staircase_jacobian

STATIONARITY_TOL = 1e-8
FEASIBILITY_TOL = 1e-10

# First differences keep the classic 1e-5 scaled step. Second differences
# use a larger one: their roundoff grows like eps / h^2 (~1e-7 at h = 1e-5),
# while the truncation term vanishes for polynomials through cubic order, so
# 5e-4 buys ~1e-10 roundoff at no accuracy cost on smooth models.
FD_STEP = 1e-5
FD_HESS_STEP = 5e-4


@dataclass(frozen=True)
class KktSolution:
    """Primal-dual solution of the dense saddle system with its residuals."""

    trajectory: Trajectory
    multipliers: np.ndarray
    stationarity_residual: float
    feasibility_residual: float


def dense_kkt_solve(qdp: QdpProblem, l) -> KktSolution:
    """Solve the direction QP through one dense factorization.

    The system is [[2H, G'], [G, 0]] [w; lam] = [-2 Dlift' l; y] with H the
    block-diagonal stage Hessian and Dlift the stage cross blocks on primal
    coordinates (the initial direction block has no cross term). Works for
    indefinite H as long as the reduced Hessian is nonsingular.
    """
    dims = qdp.dims
    H = qdp.full_hessian()
    cs = assemble_constraints(qdp, l)
    _, l_stages = _direction_parts(l, dims)
    dlift = qdp.lifted_cross()
    lin = 2.0 * (dlift.T @ l_stages.reshape(-1))
    n, m = dims.n_z, dims.n_con
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = 2.0 * H
    kkt[:n, n:] = cs.G.T
    kkt[n:, :n] = cs.G
    rhs = np.concatenate([-lin, cs.y])
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu, piv = scipy.linalg.lu_factor(kkt)
            sol = scipy.linalg.lu_solve((lu, piv), rhs)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise SingularKkt(f"saddle factorization failed: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise SingularKkt("saddle solve produced non-finite values")
    w, lam = sol[:n], sol[n:]
    stat_terms = 2.0 * (H @ w)
    stat = stat_terms + lin + cs.G.T @ lam
    stat_scale = 1.0 + inf_norm(stat_terms) + inf_norm(lin) + inf_norm(cs.G.T @ lam)
    stat_res = inf_norm(stat)
    feas_res = cs.residual(w)
    if stat_res > STATIONARITY_TOL * stat_scale or feas_res > FEASIBILITY_TOL * (1.0 + inf_norm(cs.y)):
        raise SingularKkt(
            f"saddle solve residuals too large (stationarity {stat_res:.3e}, "
            f"feasibility {feas_res:.3e}); reduced curvature likely singular"
        )
    return KktSolution(
        trajectory=Trajectory.from_stacked(dims, w),
        multipliers=lam,
        stationarity_residual=stat_res,
        feasibility_residual=feas_res,
    )


@dataclass(frozen=True)
class NewtonResult:
    trajectory: Trajectory
    multipliers: np.ndarray
    iterations: int
    stationarity_residual: float
    feasibility_residual: float


def _model_state(model: NldpModel, d: np.ndarray, traj: Trajectory):
    """Jacobians, Lagrangian Hessian blocks, gradients, residuals at a point."""
    dims = model.dims
    x, u = traj.states, traj.controls
    jacs, hess = [], []
    cons = np.empty(dims.n_con)
    cons[:dims.nx] = x[0] - d[:dims.nx]
    for k in range(dims.N):
        dk = model.d_stage(k, d)
        jacs.append(model.dynamics_jacobians(k, x[k], u[k], dk))
        cons[(k + 1) * dims.nx:(k + 2) * dims.nx] = x[k + 1] - np.asarray(
            model.dynamics(k, x[k], u[k], dk), dtype=float
        ).reshape(-1)
    grad = cost_gradient_vector(model, x, u, d)
    G = staircase_jacobian(dims, [j[0] for j in jacs], [j[1] for j in jacs])
    return jacs, G, grad, cons


def _hessian_blocks(model: NldpModel, d, traj, lam):
    dims = model.dims
    blocks = []
    for k in range(dims.N):
        dk = model.d_stage(k, d)
        Q, S, R, D1, D2 = model.lagrangian_hessian(
            k, traj.states[k], traj.controls[k], dk, lam[(k + 1) * dims.nx:(k + 2) * dims.nx]
        )
        blocks.append((np.asarray(Q, float), np.asarray(S, float), np.asarray(R, float)))
    QN = np.asarray(model.terminal_hessian(traj.states[dims.N]), dtype=float)
    return blocks, QN


def _step_system(dims: Dims, blocks, QN, jacs, G, grad, cons):
    """Assemble and solve the plain Newton step saddle system."""
    H = scipy.linalg.block_diag(
        *[np.block([[Q, S.T], [S, R]]) for (Q, S, R) in blocks], QN
    )
    n, m = dims.n_z, dims.n_con
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = H
    kkt[:n, n:] = G.T
    kkt[n:, :n] = G
    rhs = np.concatenate([-grad, -cons])
    lu, piv = scipy.linalg.lu_factor(kkt)
    sol = scipy.linalg.lu_solve((lu, piv), rhs)
    if not np.all(np.isfinite(sol)):
        raise SingularKkt("Newton step system produced non-finite values")
    return sol[:n], sol[n:], H


def _regularized_step(dims: Dims, blocks, QN, jacs, G, grad, cons):
    """Newton step through the shifting transformation.

    The shift rewrites the step QP without moving its primal minimizer
    provided the linear term absorbs the cross coupling with the constraint
    residuals: the stage gradient gains A_k' Qbar_{k+1} r_k on the state
    part and B_k' Qbar_{k+1} r_k on the control part, r_k being the
    dynamics residual entering block row k+1.
    """
    step_qdp = QdpProblem(
        dims,
        [
            {
                "Q": blocks[k][0],
                "S": blocks[k][1],
                "R": blocks[k][2],
                "D1": np.zeros((dims.nd, dims.nx)),
                "D2": np.zeros((dims.nd, dims.nu)),
                "A": jacs[k][0],
                "B": jacs[k][1],
                "C": jacs[k][2],
            }
            for k in range(dims.N)
        ],
        QN,
    )
    try:
        delta = select_delta(step_qdp)
    except SoscFailed:
        delta = 1e-3 * (1.0 + step_qdp.max_block_norm())
    conv = convexify(step_qdp, delta)
    tilted = grad.copy()
    rhs_dyn = -cons
    for k in range(dims.N):
        rk = rhs_dyn[(k + 1) * dims.nx:(k + 2) * dims.nx]
        qb_r = conv.Qbar[k + 1] @ rk
        off = k * (dims.nx + dims.nu)
        tilted[off:off + dims.nx] += jacs[k][0].T @ qb_r
        tilted[off + dims.nx:off + dims.nx + dims.nu] += jacs[k][1].T @ qb_r
    Ht = conv.as_qdp().full_hessian()
    n, m = dims.n_z, dims.n_con
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = Ht
    kkt[:n, n:] = G.T
    kkt[n:, :n] = G
    lu, piv = scipy.linalg.lu_factor(kkt)
    sol = scipy.linalg.lu_solve((lu, piv), np.concatenate([-tilted, -cons]))
    if not np.all(np.isfinite(sol)):
        raise SingularKkt("regularized Newton step produced non-finite values")
    dz = sol[:n]
    H = scipy.linalg.block_diag(
        *[np.block([[Q, S.T], [S, R]]) for (Q, S, R) in blocks], QN
    )
    lam_new, *_ = np.linalg.lstsq(G.T, -(H @ dz + grad), rcond=None)
    return dz, lam_new, H


def newton_equality_solve(
    model: NldpModel,
    d,
    init: Trajectory,
    max_iterations: int = 100,
    tol: float = 1e-10,
) -> NewtonResult:
    """Full-step Lagrange-Newton iteration on the stationarity system.

    Each step solves the saddle system built from the current Lagrangian
    Hessian blocks; when those are indefinite, the step goes through the
    shifting transformation instead (same primal step, better-conditioned
    system). Convergence requires both the stationarity and constraint
    residuals to drop to the absolute tolerance; there is no globalization,
    so starting points must be reasonable.
    """
    dims = model.dims
    d = np.asarray(d, dtype=float).reshape(-1)
    x = np.array(init.states, dtype=float)
    u = np.array(init.controls, dtype=float)
    lam = np.zeros(dims.n_con)
    residual = np.inf
    for iteration in range(1, max_iterations + 1):
        traj = Trajectory(x, u)
        jacs, G, grad, cons = _model_state(model, d, traj)
        blocks, QN = _hessian_blocks(model, d, traj, lam)
        min_block_eig = min(
            min(sym_eigvals(np.block([[Q, S.T], [S, R]]))[0] for (Q, S, R) in blocks),
            float(sym_eigvals(QN)[0]),
        )
        try:
            if min_block_eig < -1e-12:
                dz, lam_next, _ = _regularized_step(dims, blocks, QN, jacs, G, grad, cons)
            else:
                dz, lam_next, _ = _step_system(dims, blocks, QN, jacs, G, grad, cons)
        except (SingularKkt, QdpSensError):
            dz, lam_next, _ = _step_system(dims, blocks, QN, jacs, G, grad, cons)
        step = Trajectory.from_stacked(dims, dz)
        x = x + step.states
        u = u + step.controls
        lam = np.asarray(lam_next, dtype=float)
        traj = Trajectory(x, u)
        _, G, grad, cons = _model_state(model, d, traj)
        stat = inf_norm(grad + G.T @ lam)
        feas = inf_norm(cons)
        residual = max(stat, feas)
        if residual <= tol:
            return NewtonResult(
                trajectory=traj,
                multipliers=lam,
                iterations=iteration,
                stationarity_residual=stat,
                feasibility_residual=feas,
            )
    raise SolverDiverged(max_iterations, residual)


@dataclass(frozen=True)
class DerivativeCheckReport:
    block_errors: dict
    max_relative_error: float
    passed: bool


def _central_hessian(fun, point: np.ndarray, steps: np.ndarray) -> np.ndarray:
    n = point.size
    out = np.empty((n, n))
    for a in range(n):
        for b in range(a, n):
            ea = np.zeros(n)
            eb = np.zeros(n)
            ea[a] = steps[a]
            eb[b] = steps[b]
            val = (
                fun(point + ea + eb)
                - fun(point + ea - eb)
                - fun(point - ea + eb)
                + fun(point - ea - eb)
            ) / (4.0 * steps[a] * steps[b])
            out[a, b] = val
            out[b, a] = val
    return out


def _central_jacobian(fun, point: np.ndarray, steps: np.ndarray) -> np.ndarray:
    cols = []
    for a in range(point.size):
        ea = np.zeros(point.size)
        ea[a] = steps[a]
        cols.append((fun(point + ea) - fun(point - ea)) / (2.0 * steps[a]))
    return np.column_stack(cols)


def _fd_steps(point: np.ndarray, scale: float = FD_STEP) -> np.ndarray:
    return scale * (1.0 + np.abs(point))


def finite_diff_hessian_check(model: NldpModel) -> DerivativeCheckReport:
    """Compare analytic blocks against central differences at the base point.

    Checks the Lagrangian Hessian blocks Q, S, R, D1, D2, the dynamics
    Jacobians A, B, C, and the terminal Hessian; reports the worst relative
    error per family. Report-only: never raises.
    """
    dims = model.dims
    lam = model.multipliers
    if lam is None:
        from .model import recover_multipliers

        lam = recover_multipliers(model)
    nx, nu, nd = dims.nx, dims.nu, dims.nd
    errors = {name: 0.0 for name in ("Q", "S", "R", "D1", "D2", "A", "B", "C", "terminal_Q")}

    def rel_err(analytic, numeric):
        analytic = np.atleast_2d(np.asarray(analytic, dtype=float))
        numeric = np.atleast_2d(numeric)
        scale = max(1.0, float(np.max(np.abs(analytic))))
        return float(np.max(np.abs(analytic - numeric))) / scale

    for k in range(dims.N):
        x, u, dk = model.x0[k], model.u0[k], model.d_stage(k)
        lam_k = lam[k + 1]

        def stage_lagrangian(point):
            xs, us, ds = point[:nx], point[nx:nx + nu], point[nx + nu:]
            g = model.stage_cost(k, xs, us, ds)
            f = np.asarray(model.dynamics(k, xs, us, ds), dtype=float).reshape(-1)
            return float(g - lam_k @ f)

        point = np.concatenate([x, u, dk])
        hess = _central_hessian(stage_lagrangian, point, _fd_steps(point, FD_HESS_STEP))
        steps = _fd_steps(point)
        Q, S, R, D1, D2 = model.lagrangian_hessian(k, x, u, dk, lam_k)
        errors["Q"] = max(errors["Q"], rel_err(Q, hess[:nx, :nx]))
        errors["S"] = max(errors["S"], rel_err(S, hess[nx:nx + nu, :nx]))
        errors["R"] = max(errors["R"], rel_err(R, hess[nx:nx + nu, nx:nx + nu]))
        errors["D1"] = max(errors["D1"], rel_err(D1, hess[nx + nu:, :nx]))
        errors["D2"] = max(errors["D2"], rel_err(D2, hess[nx + nu:, nx:nx + nu]))

        def stage_dynamics(point):
            return np.asarray(
                model.dynamics(k, point[:nx], point[nx:nx + nu], point[nx + nu:]),
                dtype=float,
            ).reshape(-1)

        jac = _central_jacobian(stage_dynamics, point, steps)
        A, B, C = model.dynamics_jacobians(k, x, u, dk)
        errors["A"] = max(errors["A"], rel_err(A, jac[:, :nx]))
        errors["B"] = max(errors["B"], rel_err(B, jac[:, nx:nx + nu]))
        errors["C"] = max(errors["C"], rel_err(C, jac[:, nx + nu:]))

    xN = model.x0[dims.N]
    hessN = _central_hessian(lambda p: float(model.terminal_cost(p)), xN, _fd_steps(xN, FD_HESS_STEP))
    errors["terminal_Q"] = rel_err(model.terminal_hessian(xN), hessN)

    worst = max(errors.values())
    return DerivativeCheckReport(block_errors=errors, max_relative_error=worst, passed=worst <= 1e-5)


def model_with_fd_derivatives(
    dims: Dims,
    stage_cost,
    terminal_cost,
    dynamics,
    d0,
    x0,
    u0,
    multipliers=None,
) -> NldpModel:
    """Wrap plain cost/dynamics callables with central-difference derivatives.

    Fallback for models without analytic derivatives; steps scale as
    1e-5 * (1 + |value|) per coordinate.
    """
    nx, nu, nd = dims.nx, dims.nu, dims.nd

    def stage_cost_grad(k, x, u, d):
        point = np.concatenate([np.asarray(x, float), np.asarray(u, float), np.asarray(d, float)])
        steps = _fd_steps(point)
        grad = np.empty(nx + nu)
        for a in range(nx + nu):
            ea = np.zeros(point.size)
            ea[a] = steps[a]
            grad[a] = (
                stage_cost(k, *(np.split(point + ea, [nx, nx + nu])))
                - stage_cost(k, *(np.split(point - ea, [nx, nx + nu])))
            ) / (2.0 * steps[a])
        return grad[:nx], grad[nx:]

    def terminal_cost_grad(x):
        x = np.asarray(x, dtype=float)
        steps = _fd_steps(x)
        grad = np.empty(nx)
        for a in range(nx):
            ea = np.zeros(nx)
            ea[a] = steps[a]
            grad[a] = (terminal_cost(x + ea) - terminal_cost(x - ea)) / (2.0 * steps[a])
        return grad

    def dynamics_jacobians(k, x, u, d):
        point = np.concatenate([np.asarray(x, float), np.asarray(u, float), np.asarray(d, float)])
        steps = _fd_steps(point)

        def fun(pt):
            xs, us, ds = np.split(pt, [nx, nx + nu])
            return np.asarray(dynamics(k, xs, us, ds), dtype=float).reshape(-1)

        jac = _central_jacobian(fun, point, steps)
        return jac[:, :nx], jac[:, nx:nx + nu], jac[:, nx + nu:]

    def lagrangian_hessian(k, x, u, d, lam_k):
        point = np.concatenate([np.asarray(x, float), np.asarray(u, float), np.asarray(d, float)])
        steps = _fd_steps(point, FD_HESS_STEP)
        lam_k = np.asarray(lam_k, dtype=float)

        def fun(pt):
            xs, us, ds = np.split(pt, [nx, nx + nu])
            f = np.asarray(dynamics(k, xs, us, ds), dtype=float).reshape(-1)
            return float(stage_cost(k, xs, us, ds) - lam_k @ f)

        hess = _central_hessian(fun, point, steps)
        return (
            hess[:nx, :nx],
            hess[nx:nx + nu, :nx],
            hess[nx:nx + nu, nx:nx + nu],
            hess[nx + nu:, :nx],
            hess[nx + nu:, nx:nx + nu],
        )

    def terminal_hessian(x):
        x = np.asarray(x, dtype=float)
        return _central_hessian(lambda p: float(terminal_cost(p)), x, _fd_steps(x, FD_HESS_STEP))

    return NldpModel(
        dims=dims,
        stage_cost=stage_cost,
        terminal_cost=terminal_cost,
        dynamics=dynamics,
        stage_cost_grad=stage_cost_grad,
        terminal_cost_grad=terminal_cost_grad,
        dynamics_jacobians=dynamics_jacobians,
        lagrangian_hessian=lagrangian_hessian,
        terminal_hessian=terminal_hessian,
        d0=d0,
        x0=x0,
        u0=u0,
        multipliers=multipliers,
    )


def _random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    mat = rng.standard_normal((n, n))
    q, r = np.linalg.qr(mat)
    return q * np.sign(np.diag(r))


def random_sosc_qdp(
    seed: int,
    N: int | None = None,
    nx: int | None = None,
    nu: int | None = None,
    nd: int | None = None,
    gamma_target: float = 0.5,
    square_controls: bool = False,
) -> QdpProblem:
    """Random stagewise program with indefinite R blocks but certified SOSC.

    Dynamics and cross blocks are drawn uniformly in [-1, 1]; control
    curvature R_k gets at least one eigenvalue forced negative; state
    curvature is then inflated until the reduced Hessian provably dominates
    gamma_target. The inflation level comes from bounding the kernel
    parametrization: B_k keeps smallest singular value >= 0.5, so on the
    kernel |q| <= kappa^(1/2) |p| with kappa = 2 (1 + max|A|^2) / 0.5^2, and

        Q >= (gamma + 2 max|S| sqrt(kappa) + (max|R| + gamma) kappa) I

    makes w' H w >= gamma |w|^2 for every kernel vector. With
    square_controls the generator keeps nu = nx so that one-step
    reachability holds at every stage and the uniform-controllability
    assumption can pass.
    """
    rng = np.random.default_rng(seed)
    if N is None:
        N = int(rng.integers(3, 21))
    if nx is None:
        nx = int(rng.integers(1, 5))
    if nu is None:
        nu = nx if square_controls else int(rng.integers(1, nx + 1))
    if square_controls:
        nu = nx
    if nd is None:
        nd = int(rng.integers(1, 5))
    dims = Dims(N=N, nx=nx, nu=nu, nd=nd)

    def sampled_B():
        raw = rng.uniform(-1.0, 1.0, size=(nx, nu))
        u_svd, s, vt = np.linalg.svd(raw, full_matrices=False)
        return u_svd @ np.diag(np.maximum(s, 0.5)) @ vt

    def indefinite_R():
        eigs = rng.uniform(-1.0, 1.0, size=nu)
        eigs[0] = -abs(eigs[0]) - 0.1
        basis = _random_orthogonal(rng, nu)
        return basis @ np.diag(eigs) @ basis.T

    A_blocks = [rng.uniform(-1.0, 1.0, size=(nx, nx)) for _ in range(N)]
    B_blocks = [sampled_B() for _ in range(N)]
    S_blocks = [rng.uniform(-1.0, 1.0, size=(nu, nx)) for _ in range(N)]
    R_blocks = [indefinite_R() for _ in range(N)]

    from ._linalg import operator_norm

    max_a = max(operator_norm(A) for A in A_blocks)
    max_s = max(operator_norm(S) for S in S_blocks)
    max_r = max(operator_norm(R) for R in R_blocks)
    kappa = 2.0 * (1.0 + max_a ** 2) / 0.25
    q_floor = gamma_target + 2.0 * max_s * np.sqrt(kappa) + (max_r + gamma_target) * kappa

    def stiff_Q():
        bump = rng.uniform(-1.0, 1.0, size=(nx, nx))
        return q_floor * np.eye(nx) + 0.1 * (bump @ bump.T)

    stages = [
        {
            "Q": stiff_Q(),
            "R": R_blocks[k],
            "S": S_blocks[k],
            "D1": rng.uniform(-1.0, 1.0, size=(nd, nx)),
            "D2": rng.uniform(-1.0, 1.0, size=(nd, nu)),
            "A": A_blocks[k],
            "B": B_blocks[k],
            "C": rng.uniform(-1.0, 1.0, size=(nx, nd)),
        }
        for k in range(N)
    ]
    return QdpProblem(dims, stages, stiff_Q())
