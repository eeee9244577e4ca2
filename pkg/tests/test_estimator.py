"""Estimator facade: parameter protocol, fit/predict, validation."""

import numpy as np
import pytest

import qdpsens as qs


@pytest.fixture(scope="module")
def fitted(tracking_linear_qdp_module):
    est = qs.RiccatiSensitivityEstimator(delta_fraction=0.9)
    return est.fit(tracking_linear_qdp_module)


@pytest.fixture(scope="module")
def tracking_linear_qdp_module():
    return qs.assemble_qdp_from_nldp(qs.tracking_toy_model(12, 10.0, 1.0, "linear"))


class TestParameterProtocol:
    def test_get_set_round_trip(self):
        est = qs.RiccatiSensitivityEstimator()
        assert est.get_params() == {"delta_fraction": 0.9}
        est.set_params(delta_fraction=0.5)
        assert est.get_params() == {"delta_fraction": 0.5}

    def test_unknown_param_rejected(self):
        with pytest.raises(qs.ValidationError):
            qs.RiccatiSensitivityEstimator().set_params(shift=1.0)

    def test_clone_by_params(self):
        est = qs.RiccatiSensitivityEstimator(delta_fraction=0.25)
        clone = qs.RiccatiSensitivityEstimator(**est.get_params())
        assert clone.get_params() == est.get_params()

    def test_bad_fraction_rejected_at_fit(self, tracking_linear_qdp_module):
        est = qs.RiccatiSensitivityEstimator(delta_fraction=1.5)
        with pytest.raises(qs.ValidationError):
            est.fit(tracking_linear_qdp_module)


class TestFitPredict:
    def test_fit_attributes(self, fitted, tracking_linear_qdp_module):
        assert fitted.gamma_ == pytest.approx(9.0, abs=1e-9)
        assert fitted.delta_ == pytest.approx(8.1, abs=1e-9)
        assert fitted.n_features_in_ == tracking_linear_qdp_module.dims.n_dir

    def test_predict_matches_pipeline(self, fitted, tracking_linear_qdp_module):
        qdp = tracking_linear_qdp_module
        dirs = [qs.unit_direction(qdp.dims, i, 1) for i in (-1, 0, 6)]
        L = np.vstack([d.dense() for d in dirs])
        W = fitted.predict(L)
        assert W.shape == (3, qdp.dims.n_z)
        for row, l in zip(W, dirs):
            ref = qs.solve_sensitivity(qdp, l).trajectory.stacked()
            assert np.max(np.abs(row - ref)) <= 1e-12

    def test_transform_alias(self, fitted, tracking_linear_qdp_module):
        l = qs.unit_direction(tracking_linear_qdp_module.dims, 3, 1).dense()
        assert np.array_equal(fitted.transform(l), fitted.predict(l))

    def test_single_vector_promoted(self, fitted, tracking_linear_qdp_module):
        l = qs.unit_direction(tracking_linear_qdp_module.dims, 3, 1).dense()
        assert fitted.predict(l).shape[0] == 1

    def test_solve_direction_rich_result(self, fitted, tracking_linear_qdp_module):
        l = qs.unit_direction(tracking_linear_qdp_module.dims, 6, 1)
        res = fitted.solve_direction(l)
        assert res.source_stage == 6
        assert res.delta == pytest.approx(fitted.delta_)


class TestValidation:
    def test_not_fitted(self):
        est = qs.RiccatiSensitivityEstimator()
        with pytest.raises(qs.NotFitted):
            est.predict(np.zeros(3))

    def test_bad_shapes(self, fitted):
        with pytest.raises(qs.ValidationError):
            fitted.predict(np.zeros((2, 3)))
        with pytest.raises(qs.ValidationError):
            fitted.predict(np.full((1, fitted.n_features_in_), np.nan))

    def test_sosc_failure_at_fit(self):
        dims = qs.Dims(N=2, nx=1, nu=1, nd=1)
        qdp = qs.QdpProblem.constant(
            dims, Q=[[-1.0]], R=[[-1.0]], S=[[0.0]], D1=[[0.0]], D2=[[0.0]],
            A=[[0.0]], B=[[1.0]], C=[[1.0]], terminal_Q=[[-1.0]])
        with pytest.raises(qs.SoscFailed):
            qs.RiccatiSensitivityEstimator().fit(qdp)
