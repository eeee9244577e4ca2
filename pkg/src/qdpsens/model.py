"""Stagewise problem data: nonlinear models, quadratic stage blocks, trajectories.

A stagewise quadratic program ("QDP") over states p_0..p_N and controls
q_0..q_{N-1} is stored as dense per-stage blocks

    cost   sum_k [p_k; q_k; l_k]' [[Q_k, S_k', D1_k'],
                                   [S_k, R_k, D2_k'],
                                   [D1_k, D2_k, 0  ]] [p_k; q_k; l_k]
           + p_N' QN p_N,
    s.t.   p_{k+1} = A_k p_k + B_k q_k + C_k l_k,      p_0 = l_{-1},

where l = (l_{-1}; l_0; ...; l_{N-1}) is an exogenous direction vector.
Blocks come either from user data or from linearizing a nonlinear model at a
base primal-dual point: Q, S, R and the cross blocks D1, D2 are second
derivatives of the stage Lagrangian, and A, B, C are dynamics Jacobians.

All containers are immutable after construction and every operation is a
pure function of its inputs, so concurrent use is safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._linalg import asymmetry, symmetrize
from .exceptions import MultiplierRecoveryError, ValidationError

SYMMETRY_TOL = 1e-10

Array = np.ndarray


def _freeze(arr: Array) -> Array:
    arr.setflags(write=False)
    return arr


def as_matrix(value, rows: int, cols: int, name: str) -> Array:
    """Validate and copy a dense (rows, cols) float matrix."""
    mat = np.array(value, dtype=float)
    if mat.shape != (rows, cols):
        raise ValidationError(
            f"{name}: expected shape {(rows, cols)}, got {mat.shape}"
        )
    if not np.all(np.isfinite(mat)):
        raise ValidationError(f"{name}: non-finite entries")
    return _freeze(mat)


def as_vector(value, size: int, name: str) -> Array:
    vec = np.array(value, dtype=float).reshape(-1)
    if vec.shape != (size,):
        raise ValidationError(f"{name}: expected length {size}, got {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValidationError(f"{name}: non-finite entries")
    return _freeze(vec)


def as_symmetric(value, size: int, name: str) -> Array:
    """Validate a square block that must be symmetric; symmetrize roundoff.

    Asymmetry beyond SYMMETRY_TOL signals a modeling bug and is rejected
    rather than silently averaged away.
    """
    mat = np.array(value, dtype=float)
    if mat.shape != (size, size):
        raise ValidationError(
            f"{name}: expected shape {(size, size)}, got {mat.shape}"
        )
    if not np.all(np.isfinite(mat)):
        raise ValidationError(f"{name}: non-finite entries")
    skew = asymmetry(mat)
    if skew > SYMMETRY_TOL:
        raise ValidationError(
            f"{name}: asymmetry {skew:.3e} exceeds tolerance {SYMMETRY_TOL:g}"
        )
    return _freeze(symmetrize(mat))


@dataclass(frozen=True)
class Dims:
    """Horizon length and per-stage dimensions."""

    N: int
    nx: int
    nu: int
    nd: int

    def __post_init__(self):
        if self.N < 1:
            raise ValidationError(f"N must be >= 1, got {self.N}")
        for name in ("nx", "nu", "nd"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")

    @property
    def n_z(self) -> int:
        """Length of the stage-ordered primal vector (p_0; q_0; ...; p_N)."""
        return (self.N + 1) * self.nx + self.N * self.nu

    @property
    def n_con(self) -> int:
        """Number of equality constraints (initial block plus dynamics)."""
        return (self.N + 1) * self.nx

    @property
    def n_dir(self) -> int:
        """Length of a direction vector (l_{-1}; l_0; ...; l_{N-1})."""
        return self.nx + self.N * self.nd


@dataclass(frozen=True)
class QdpStage:
    """Validated blocks of one stage. Constructed through QdpProblem."""

    Q: Array
    R: Array
    S: Array
    D1: Array
    D2: Array
    A: Array
    B: Array
    C: Array

    def hessian(self) -> Array:
        """Stage Hessian [[Q, S'], [S, R]]."""
        return np.block([[self.Q, self.S.T], [self.S, self.R]])


class QdpProblem:
    """Dense stagewise quadratic program data with enforced symmetry."""

    def __init__(self, dims: Dims, stages: Sequence, terminal_Q):
        if len(stages) != dims.N:
            raise ValidationError(
                f"expected {dims.N} stages, got {len(stages)}"
            )
        self.dims = dims
        nx, nu, nd = dims.nx, dims.nu, dims.nd
        built = []
        for k, blocks in enumerate(stages):
            if isinstance(blocks, QdpStage):
                blocks = blocks.__dict__
            built.append(
                QdpStage(
                    Q=as_symmetric(blocks["Q"], nx, f"Q[{k}]"),
                    R=as_symmetric(blocks["R"], nu, f"R[{k}]"),
                    S=as_matrix(blocks["S"], nu, nx, f"S[{k}]"),
                    D1=as_matrix(blocks["D1"], nd, nx, f"D1[{k}]"),
                    D2=as_matrix(blocks["D2"], nd, nu, f"D2[{k}]"),
                    A=as_matrix(blocks["A"], nx, nx, f"A[{k}]"),
                    B=as_matrix(blocks["B"], nx, nu, f"B[{k}]"),
                    C=as_matrix(blocks["C"], nx, nd, f"C[{k}]"),
                )
            )
        self.stages = tuple(built)
        self.terminal_Q = as_symmetric(terminal_Q, nx, "terminal_Q")

    @classmethod
    def constant(cls, dims: Dims, *, Q, R, S, D1, D2, A, B, C, terminal_Q) -> "QdpProblem":
        """Build a time-invariant problem from single blocks."""
        stage = {"Q": Q, "R": R, "S": S, "D1": D1, "D2": D2, "A": A, "B": B, "C": C}
        return cls(dims, [dict(stage) for _ in range(dims.N)], terminal_Q)

    def stage_hessian(self, k: int) -> Array:
        if k == self.dims.N:
            return self.terminal_Q.copy()
        return self.stages[k].hessian()

    def full_hessian(self) -> Array:
        """Block-diagonal Hessian over (p_0, q_0, ..., p_N), shape (n_z, n_z)."""
        import scipy.linalg

        return scipy.linalg.block_diag(
            *[self.stages[k].hessian() for k in range(self.dims.N)],
            self.terminal_Q,
        )

    def lifted_cross(self) -> Array:
        """Cross-term matrix mapping the primal vector to stage directions.

        Row block k holds (D1_k, D2_k) on the (p_k, q_k) coordinates, so
        that l_stages . (lifted_cross() @ w) equals the stagewise cross term
        of the objective. The initial block of l has no cross term.
        """
        dims = self.dims
        nx, nu, nd = dims.nx, dims.nu, dims.nd
        out = np.zeros((dims.N * nd, dims.n_z))
        for k, st in enumerate(self.stages):
            row = k * nd
            col = k * (nx + nu)
            out[row:row + nd, col:col + nx] = st.D1
            out[row:row + nd, col + nx:col + nx + nu] = st.D2
        return out

    def max_block_norm(self) -> float:
        """Largest spectral norm over all stored blocks (data bound)."""
        from ._linalg import operator_norm

        worst = operator_norm(self.terminal_Q)
        for st in self.stages:
            for blk in (st.Q, st.R, st.S, st.D1, st.D2, st.A, st.B, st.C):
                worst = max(worst, operator_norm(blk))
        return worst

    def to_json_dict(self) -> dict:
        def rows(mat):
            return [list(map(float, r)) for r in np.asarray(mat)]

        return {
            "dims": {
                "N": self.dims.N,
                "nx": self.dims.nx,
                "nu": self.dims.nu,
                "nd": self.dims.nd,
            },
            "stages": [
                {
                    "Q": rows(st.Q),
                    "R": rows(st.R),
                    "S": rows(st.S),
                    "A": rows(st.A),
                    "B": rows(st.B),
                    "C": rows(st.C),
                    "D1": rows(st.D1),
                    "D2": rows(st.D2),
                }
                for st in self.stages
            ],
            "terminal_Q": rows(self.terminal_Q),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "QdpProblem":
        try:
            dd = data["dims"]
            dims = Dims(N=int(dd["N"]), nx=int(dd["nx"]), nu=int(dd["nu"]), nd=int(dd["nd"]))
            stages = data["stages"]
            terminal = data["terminal_Q"]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed problem JSON: missing field {exc}") from exc
        return cls(dims, stages, terminal)


def save_qdp(qdp: QdpProblem, path) -> None:
    import json

    with open(path, "w") as fh:
        json.dump(qdp.to_json_dict(), fh, indent=1)


def load_qdp(path) -> QdpProblem:
    import json

    with open(path) as fh:
        data = json.load(fh)
    return QdpProblem.from_json_dict(data)


@dataclass(frozen=True)
class Trajectory:
    """States p_0..p_N and controls q_0..q_{N-1}, stored row-per-stage."""

    states: Array
    controls: Array

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        controls = np.array(self.controls, dtype=float)
        if states.ndim != 2 or controls.ndim != 2:
            raise ValidationError("states and controls must be 2-D arrays")
        if states.shape[0] != controls.shape[0] + 1:
            raise ValidationError(
                f"got {states.shape[0]} states for {controls.shape[0]} controls"
            )
        object.__setattr__(self, "states", _freeze(states))
        object.__setattr__(self, "controls", _freeze(controls))

    @classmethod
    def zeros(cls, dims: Dims) -> "Trajectory":
        return cls(np.zeros((dims.N + 1, dims.nx)), np.zeros((dims.N, dims.nu)))

    @classmethod
    def from_stacked(cls, dims: Dims, w) -> "Trajectory":
        w = as_vector(w, dims.n_z, "stacked trajectory")
        nx, nu = dims.nx, dims.nu
        states = np.empty((dims.N + 1, nx))
        controls = np.empty((dims.N, nu))
        off = 0
        for k in range(dims.N):
            states[k] = w[off:off + nx]
            controls[k] = w[off + nx:off + nx + nu]
            off += nx + nu
        states[dims.N] = w[off:off + nx]
        return cls(states, controls)

    def stacked(self) -> Array:
        """Stage-ordered vector (p_0; q_0; ...; p_{N-1}; q_{N-1}; p_N)."""
        parts = []
        for k in range(self.controls.shape[0]):
            parts.append(self.states[k])
            parts.append(self.controls[k])
        parts.append(self.states[-1])
        return np.concatenate(parts)

    def state_norms(self) -> Array:
        return np.linalg.norm(self.states, axis=1)

    def control_norms(self) -> Array:
        return np.linalg.norm(self.controls, axis=1)


def eval_qdp_objective(qdp: QdpProblem, l, w: Trajectory) -> float:
    """Stagewise objective value at trajectory w for direction l.

    The direction's own quadratic block is zero by convention, so the value
    equals the dense form w' H w + 2 l' D w.
    """
    dims = qdp.dims
    if w.states.shape != (dims.N + 1, dims.nx) or w.controls.shape != (dims.N, dims.nu):
        raise ValidationError("trajectory shape inconsistent with problem dims")
    l_stages = _direction_stages(l, dims)
    total = 0.0
    for k, st in enumerate(qdp.stages):
        p, q, lk = w.states[k], w.controls[k], l_stages[k]
        total += p @ st.Q @ p + q @ st.R @ q + 2.0 * (q @ st.S @ p)
        total += 2.0 * (lk @ st.D1 @ p) + 2.0 * (lk @ st.D2 @ q)
    pN = w.states[dims.N]
    return float(total + pN @ qdp.terminal_Q @ pN)


def rollout_dynamics(qdp: QdpProblem, l, controls) -> Trajectory:
    """Propagate p_0 = l_{-1}, p_{k+1} = A_k p_k + B_k q_k + C_k l_k."""
    dims = qdp.dims
    controls = np.asarray(controls, dtype=float)
    if controls.shape != (dims.N, dims.nu):
        raise ValidationError(
            f"controls: expected shape {(dims.N, dims.nu)}, got {controls.shape}"
        )
    l_minus1, l_stages = _direction_parts(l, dims)
    states = np.empty((dims.N + 1, dims.nx))
    states[0] = l_minus1
    for k, st in enumerate(qdp.stages):
        states[k + 1] = st.A @ states[k] + st.B @ controls[k] + st.C @ l_stages[k]
    return Trajectory(states, controls)


def _direction_parts(l, dims: Dims):
    """Accept a PerturbationDirection or a dense (nx + N*nd,) vector."""
    if hasattr(l, "l_minus1") and hasattr(l, "l_stages"):
        return np.asarray(l.l_minus1, dtype=float), np.asarray(l.l_stages, dtype=float)
    vec = as_vector(l, dims.n_dir, "direction")
    return vec[:dims.nx], vec[dims.nx:].reshape(dims.N, dims.nd)


def _direction_stages(l, dims: Dims) -> Array:
    return _direction_parts(l, dims)[1]


@dataclass(frozen=True)
class NldpModel:
    """A nonlinear stagewise program with user-supplied derivative evaluators.

    Evaluators receive plain 1-D arrays. ``lagrangian_hessian`` must return
    the second-derivative blocks (Q, S, R, D1, D2) of
    ``stage_cost(k, x, u, d) - lam_k . dynamics(k, x, u, d)`` with respect to
    (x, u, d); the terms linear in neighboring states contribute nothing.
    Models lacking analytic derivatives can be built with the
    finite-difference constructor in :mod:`qdpsens.verify`.
    """

    dims: Dims
    stage_cost: Callable
    terminal_cost: Callable
    dynamics: Callable
    stage_cost_grad: Callable
    terminal_cost_grad: Callable
    dynamics_jacobians: Callable
    lagrangian_hessian: Callable
    terminal_hessian: Callable
    d0: Array
    x0: Array
    u0: Array
    multipliers: Array | None = None

    def __post_init__(self):
        dims = self.dims
        object.__setattr__(self, "d0", as_vector(self.d0, dims.n_dir, "d0"))
        x0 = np.array(self.x0, dtype=float)
        u0 = np.array(self.u0, dtype=float)
        if x0.shape != (dims.N + 1, dims.nx):
            raise ValidationError(f"x0: expected {(dims.N + 1, dims.nx)}, got {x0.shape}")
        if u0.shape != (dims.N, dims.nu):
            raise ValidationError(f"u0: expected {(dims.N, dims.nu)}, got {u0.shape}")
        object.__setattr__(self, "x0", _freeze(x0))
        object.__setattr__(self, "u0", _freeze(u0))
        if self.multipliers is not None:
            lam = np.array(self.multipliers, dtype=float)
            if lam.shape != (dims.N + 1, dims.nx):
                raise ValidationError(
                    f"multipliers: expected {(dims.N + 1, dims.nx)}, got {lam.shape}"
                )
            object.__setattr__(self, "multipliers", _freeze(lam))

    def d_init(self, d: Array | None = None) -> Array:
        d = self.d0 if d is None else d
        return d[: self.dims.nx]

    def d_stage(self, k: int, d: Array | None = None) -> Array:
        d = self.d0 if d is None else d
        nx, nd = self.dims.nx, self.dims.nd
        return d[nx + k * nd: nx + (k + 1) * nd]

    def base_trajectory(self) -> Trajectory:
        return Trajectory(self.x0, self.u0)

    def with_reference(self, d_new) -> "NldpModel":
        """Same model with a replaced reference vector."""
        from dataclasses import replace

        return replace(self, d0=as_vector(d_new, self.dims.n_dir, "d0"))


def cost_gradient_vector(model: NldpModel, x: Array, u: Array, d: Array) -> Array:
    """Stage-ordered gradient of the summed cost at (x, u) for reference d."""
    dims = model.dims
    out = np.empty(dims.n_z)
    off = 0
    for k in range(dims.N):
        gx, gu = model.stage_cost_grad(k, x[k], u[k], model.d_stage(k, d))
        out[off:off + dims.nx] = np.asarray(gx, dtype=float).reshape(-1)
        out[off + dims.nx:off + dims.nx + dims.nu] = np.asarray(gu, dtype=float).reshape(-1)
        off += dims.nx + dims.nu
    out[off:] = np.asarray(model.terminal_cost_grad(x[dims.N]), dtype=float).reshape(-1)
    return out


def recover_multipliers(model: NldpModel) -> Array:
    """Least-squares multipliers from stationarity at the base point.

    Solves min || G' lam + grad_cost || over lam; a residual above 1e-6
    means the base point is not a stationary point of the model.
    """
    from .nullspace import staircase_jacobian

    dims = model.dims
    jacs = [
        model.dynamics_jacobians(k, model.x0[k], model.u0[k], model.d_stage(k))
        for k in range(dims.N)
    ]
    G = staircase_jacobian(dims, [j[0] for j in jacs], [j[1] for j in jacs])
    grad = cost_gradient_vector(model, model.x0, model.u0, model.d0)
    lam, *_ = np.linalg.lstsq(G.T, -grad, rcond=None)
    residual = float(np.max(np.abs(G.T @ lam + grad)))
    if residual > 1e-6:
        raise MultiplierRecoveryError(residual)
    return lam.reshape(dims.N + 1, dims.nx)


def assemble_qdp_from_nldp(model: NldpModel) -> QdpProblem:
    """Linearize a nonlinear model at its base primal-dual point.

    The blocks are the exact second derivatives of the stage Lagrangians and
    the dynamics Jacobians, all evaluated at (x0, u0, multipliers; d0). When
    multipliers are not supplied they are recovered by least squares from
    stationarity.
    """
    dims = model.dims
    lam = model.multipliers
    if lam is None:
        lam = recover_multipliers(model)
    stages = []
    for k in range(dims.N):
        x, u, d = model.x0[k], model.u0[k], model.d_stage(k)
        Q, S, R, D1, D2 = model.lagrangian_hessian(k, x, u, d, lam[k + 1])
        A, B, C = model.dynamics_jacobians(k, x, u, d)
        stages.append({"Q": Q, "S": S, "R": R, "D1": D1, "D2": D2, "A": A, "B": B, "C": C})
    terminal_Q = model.terminal_hessian(model.x0[dims.N])
    return QdpProblem(dims, stages, terminal_Q)
