"""Estimator-style facade over the sensitivity pipeline.

Follows the scikit-learn protocol (fit / predict / get_params / set_params)
without depending on scikit-learn itself, so the solver drops into
pipeline-shaped tooling: fit() factorizes one problem, predict() maps an
array of direction vectors to an array of stacked derivative trajectories.
"""

from __future__ import annotations

import numpy as np

from .convexify import convexify
from .exceptions import NotFitted, SoscFailed, ValidationError
from .model import QdpProblem
from .nullspace import reduced_hessian_gamma
from .riccati import backward_pass, forward_solve
from .sensitivity import PerturbationDirection, SensitivityResult, solve_sensitivity


def check_direction_array(L, n_dir: int) -> np.ndarray:
    """Validate a (n_directions, n_dir) float array of direction vectors."""
    arr = np.asarray(L, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != n_dir:
        raise ValidationError(
            f"direction array: expected shape (n_directions, {n_dir}), got {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValidationError("direction array: non-finite entries")
    return arr


class RiccatiSensitivityEstimator:
    """Directional-derivative solver with a fit/predict interface.

    Parameters
    ----------
    delta_fraction:
        Fraction of the reduced-curvature bound used as the shift
        parameter of the convexification, in (0, 1).

    After ``fit(qdp)`` the instance exposes ``gamma_``, ``delta_``,
    ``convexified_``, ``riccati_`` and ``n_features_in_``; ``predict``
    maps rows of a direction array to stacked trajectories (p_0; q_0; ...;
    p_N), one row each.
    """

    def __init__(self, delta_fraction: float = 0.9):
        self.delta_fraction = delta_fraction

    def get_params(self, deep: bool = True) -> dict:
        return {"delta_fraction": self.delta_fraction}

    def set_params(self, **params) -> "RiccatiSensitivityEstimator":
        for key, value in params.items():
            if key not in self.get_params():
                raise ValidationError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def fit(self, qdp: QdpProblem, y=None) -> "RiccatiSensitivityEstimator":
        if not 0.0 < self.delta_fraction < 1.0:
            raise ValidationError(
                f"delta_fraction must lie in (0, 1), got {self.delta_fraction}"
            )
        gamma = reduced_hessian_gamma(qdp)
        if gamma <= 0.0:
            raise SoscFailed(gamma)
        self.problem_ = qdp
        self.gamma_ = gamma
        self.delta_ = self.delta_fraction * gamma
        self.convexified_ = convexify(qdp, self.delta_)
        self._conv_qdp = self.convexified_.as_qdp()
        self.riccati_ = backward_pass(self._conv_qdp)
        self.n_features_in_ = qdp.dims.n_dir
        return self

    def _require_fit(self):
        if not hasattr(self, "riccati_"):
            raise NotFitted("call fit() before predict()/transform()")

    def predict(self, L) -> np.ndarray:
        """Stacked derivative trajectory for every row of L."""
        self._require_fit()
        arr = check_direction_array(L, self.n_features_in_)
        out = np.empty((arr.shape[0], self.problem_.dims.n_z))
        for idx, row in enumerate(arr):
            traj = forward_solve(self.riccati_, self._conv_qdp, row)
            out[idx] = traj.stacked()
        return out

    def transform(self, L) -> np.ndarray:
        return self.predict(L)

    def solve_direction(self, l: PerturbationDirection) -> SensitivityResult:
        """Rich per-direction result (norms, fit, metadata)."""
        self._require_fit()
        return solve_sensitivity(self.problem_, l, self.delta_fraction)
