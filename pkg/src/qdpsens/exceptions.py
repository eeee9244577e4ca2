"""Exception types raised across the package."""

from __future__ import annotations


class QdpSensError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(QdpSensError, ValueError):
    """Malformed input: bad shapes, non-finite entries, broken symmetry."""


class SoscFailed(QdpSensError):
    """The reduced Hessian has no positive lower bound at this point."""

    def __init__(self, gamma: float):
        self.gamma = gamma
        super().__init__(
            f"second-order sufficient condition fails: reduced-Hessian "
            f"lower bound gamma = {gamma:.6g} is not positive"
        )


class NonInvertibleRtilde(QdpSensError):
    """The convexification recursion hit a numerically singular R-block."""

    def __init__(self, stage: int, min_abs_eig: float):
        self.stage = stage
        self.min_abs_eig = min_abs_eig
        super().__init__(
            f"transformed control block at stage {stage} is numerically "
            f"singular (|eig|_min = {min_abs_eig:.3e}); recursion undefined"
        )


class NotPositiveDefinite(QdpSensError):
    """A block that must be positive definite has a negative eigenvalue."""

    def __init__(self, stage: int, min_eig: float):
        self.stage = stage
        self.min_eig = min_eig
        super().__init__(
            f"transformed control block at stage {stage} has negative "
            f"eigenvalue {min_eig:.6g}; shift outside its sufficient "
            f"interval, or the curvature condition fails"
        )


class IndefiniteW(QdpSensError):
    """Backward recursion control-weight block is not positive definite."""

    def __init__(self, stage: int, min_eig: float):
        self.stage = stage
        self.min_eig = min_eig
        super().__init__(
            f"control weight at stage {stage} has minimum eigenvalue "
            f"{min_eig:.6g} <= 1e-12; indefinite input beyond the reach of "
            f"the backward recursion"
        )


class SingularKkt(QdpSensError):
    """The dense saddle-point system could not be solved reliably."""


class SolverDiverged(QdpSensError):
    """The equality-constrained Newton iteration failed to converge."""

    def __init__(self, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"Newton iteration did not converge after {iterations} steps "
            f"(residual {residual:.3e})"
        )


class InsufficientData(QdpSensError):
    """Too few stages above the numerical floor to fit a decay rate."""


class ControllabilityFailed(QdpSensError):
    """No admissible evolution length certifies the reachability bound."""


class MultiplierRecoveryError(QdpSensError):
    """Least-squares multipliers leave a large stationarity residual."""

    def __init__(self, residual: float):
        self.residual = residual
        super().__init__(
            f"stationarity residual {residual:.3e} after least-squares "
            f"multiplier recovery exceeds 1e-6; base point is not optimal "
            f"or derivatives are inconsistent"
        )


class NotFitted(QdpSensError):
    """Estimator method requiring a prior fit() was called before it."""
