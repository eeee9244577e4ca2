"""Direction construction, the sensitivity pipeline, and decay certificates."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import qdpsens as qs

from conftest import random_direction


class TestUnitDirection:
    def test_initial_block(self):
        dims = qs.Dims(N=4, nx=3, nu=1, nd=2)
        l = qs.unit_direction(dims, -1, 1)
        assert l.l_minus1[0] == 1.0
        assert np.count_nonzero(l.dense()) == 1
        assert l.source_stage == -1

    def test_stage_block(self):
        dims = qs.Dims(N=4, nx=3, nu=1, nd=2)
        l = qs.unit_direction(dims, 0, 1)
        assert l.l_stages[0, 0] == 1.0
        assert np.count_nonzero(l.dense()) == 1

    @settings(max_examples=40, deadline=None)
    @given(data=st.data())
    def test_norm_and_support(self, data):
        N = data.draw(st.integers(1, 6))
        nx = data.draw(st.integers(1, 3))
        nd = data.draw(st.integers(1, 3))
        dims = qs.Dims(N=N, nx=nx, nu=1, nd=nd)
        i = data.draw(st.integers(-1, N - 1))
        block = nx if i == -1 else nd
        j = data.draw(st.integers(1, block))
        l = qs.unit_direction(dims, i, j)
        assert l.norm() == pytest.approx(1.0)
        dense = l.dense()
        lo = 0 if i == -1 else nx + i * nd
        hi = nx if i == -1 else nx + (i + 1) * nd
        assert np.all(dense[:lo] == 0.0) and np.all(dense[hi:] == 0.0)

    def test_out_of_range(self):
        dims = qs.Dims(N=2, nx=1, nu=1, nd=1)
        with pytest.raises(qs.ValidationError):
            qs.unit_direction(dims, 2, 1)
        with pytest.raises(qs.ValidationError):
            qs.unit_direction(dims, 0, 2)

    def test_block_normalization(self):
        dims = qs.Dims(N=3, nx=2, nu=1, nd=2)
        l = qs.direction_in_block(dims, 1, [3.0, 4.0])
        assert l.norm() == pytest.approx(1.0)
        assert l.l_stages[1] == pytest.approx([0.6, 0.8])


class TestSolveSensitivity:
    def test_zero_direction(self, small_pool):
        qdp = small_pool[0]
        res = qs.solve_sensitivity(qdp, qs.PerturbationDirection.zero(qdp.dims))
        assert np.max(res.state_norms) <= 1e-14
        assert np.max(res.control_norms) <= 1e-14

    def test_matches_dense_oracle(self, small_pool):
        rng = np.random.default_rng(77)
        for qdp in small_pool:
            l = random_direction(qdp, rng)
            res = qs.solve_sensitivity(qdp, l)
            ref = qs.dense_kkt_solve(qdp, l).trajectory.stacked()
            scale = max(1.0, np.max(np.abs(ref)))
            assert np.max(np.abs(res.trajectory.stacked() - ref)) / scale <= 1e-8

    def test_tracking_toy_support_structure(self, tracking_linear_qdp):
        """The reference-driven toy problem has no state coupling, so a
        stage-i perturbation moves only stages i and i+1 of the states.
        The certified envelope still dominates everywhere."""
        i = 20
        l = qs.unit_direction(tracking_linear_qdp.dims, i, 1)
        res = qs.solve_sensitivity(tracking_linear_qdp, l)
        nonzero = np.nonzero(res.state_norms > 1e-12)[0]
        assert set(nonzero) == {i, i + 1}
        assert res.state_norms[i] == pytest.approx(1.0 / 9.0, rel=1e-10)
        assert res.state_norms[i + 1] == pytest.approx(20.0 / 9.0, rel=1e-10)
        rep = qs.theoretical_constants(tracking_linear_qdp, res.delta)
        bound = rep.decay_bound(i, np.arange(tracking_linear_qdp.dims.N + 1))
        assert np.all(res.state_norms <= bound + 1e-9)

    def test_sosc_failure_raised(self):
        dims = qs.Dims(N=2, nx=1, nu=1, nd=1)
        qdp = qs.QdpProblem.constant(
            dims, Q=[[-1.0]], R=[[-1.0]], S=[[0.0]], D1=[[0.0]], D2=[[0.0]],
            A=[[0.0]], B=[[1.0]], C=[[1.0]], terminal_Q=[[-1.0]])
        with pytest.raises(qs.SoscFailed):
            qs.solve_sensitivity(qdp, qs.PerturbationDirection.zero(dims))


class TestControllability:
    def test_tracking_toy_one_step(self, tracking_linear_qdp):
        rep = qs.controllability(tracking_linear_qdp, 1.0, t_max=5)
        assert rep.passed
        assert rep.t == 1
        assert all(t == 1 for t in rep.t_stages)

    def test_zero_input_matrix_fails(self):
        dims = qs.Dims(N=4, nx=1, nu=1, nd=1)
        qdp = qs.QdpProblem.constant(
            dims, Q=[[1.0]], R=[[1.0]], S=[[0.0]], D1=[[0.0]], D2=[[0.0]],
            A=[[1.0]], B=[[0.0]], C=[[1.0]], terminal_Q=[[1.0]])
        rep = qs.controllability(qdp, 1e-6, t_max=4)
        assert not rep.passed
        assert all(t is None for t in rep.t_stages)

    def test_identity_pair(self):
        dims = qs.Dims(N=3, nx=2, nu=2, nd=1)
        qdp = qs.QdpProblem.constant(
            dims, Q=np.eye(2), R=np.eye(2), S=np.zeros((2, 2)),
            D1=np.zeros((1, 2)), D2=np.zeros((1, 2)),
            A=np.eye(2), B=np.eye(2), C=np.ones((2, 1)), terminal_Q=np.eye(2))
        rep = qs.controllability(qdp, 1.0)
        assert rep.passed and rep.t == 1
        xi = qs.reachability_matrix(qdp, 0, 1)
        assert np.array_equal(xi @ xi.T, np.eye(2))

    def test_two_step_reachability(self):
        """A tall input matrix needs two stages to span the state space."""
        dims = qs.Dims(N=4, nx=2, nu=1, nd=1)
        A = np.array([[0.0, 1.0], [1.0, 0.0]])
        B = np.array([[1.0], [0.0]])
        qdp = qs.QdpProblem.constant(
            dims, Q=np.eye(2), R=[[1.0]], S=np.zeros((1, 2)),
            D1=np.zeros((1, 2)), D2=np.zeros((1, 1)),
            A=A, B=B, C=np.ones((2, 1)), terminal_Q=np.eye(2))
        rep = qs.controllability(qdp, 0.5, t_max=4)
        # interior stages reach in 2, the final stage cannot (window too short)
        assert rep.t_stages[0] == 2
        assert rep.t_stages[-1] is None
        assert not rep.passed


class TestTheoreticalConstants:
    def test_rate_formula_plugin(self):
        # upsilon_tilde_qbar = 1, lambda_h = 1 gives envelope 1 and rate 1/sqrt(2)
        assert np.sqrt(1.0 / 1.0) == pytest.approx(1.0)
        assert np.sqrt(1.0 / (1.0 + 1.0)) == pytest.approx(1.0 / np.sqrt(2.0))

    def test_single_step_reachability_sum(self, tracking_linear_qdp):
        rep = qs.theoretical_constants(tracking_linear_qdp, 8.1)
        assert rep.t == 1
        assert rep.psi == pytest.approx(rep.upsilon)
        assert rep.lambda_c == pytest.approx(1.0)
        assert rep.upsilon == pytest.approx(20.0)

    def test_report_invariants(self, square_pool):
        for qdp in square_pool[:4]:
            gamma = qs.reduced_hessian_gamma(qdp)
            rep = qs.theoretical_constants(qdp, 0.9 * gamma)
            assert 0.0 < rep.rho < 1.0
            assert rep.lambda_h <= rep.delta + 1e-15
            assert rep.lambda_h == pytest.approx(rep.lambda_bcs)
            assert rep.upsilon_uf == max(rep.upsilon_u, rep.upsilon_f)
            assert rep.upsilon_pq >= rep.upsilon_p
            assert rep.upsilon_e == pytest.approx(np.sqrt(rep.upsilon_tilde_qbar / rep.lambda_h))

    def test_envelope_dominates_solutions_everywhere(self, tracking_linear_qdp):
        rep = qs.theoretical_constants(tracking_linear_qdp, 8.1)
        N = tracking_linear_qdp.dims.N
        for i in range(-1, N):
            l = qs.unit_direction(tracking_linear_qdp.dims, i, 1)
            res = qs.solve_sensitivity(tracking_linear_qdp, l)
            bound = rep.decay_bound(i, np.arange(N + 1))
            assert np.all(res.state_norms <= bound + 1e-9)
            assert np.all(res.control_norms <= bound[:N] + 1e-9)

    def test_delta_domain_enforced(self, tracking_linear_qdp):
        with pytest.raises(qs.ValidationError):
            qs.theoretical_constants(tracking_linear_qdp, 9.5)
        with pytest.raises(qs.ValidationError):
            qs.theoretical_constants(tracking_linear_qdp, 0.0)

    def test_controllability_failure_raised(self):
        dims = qs.Dims(N=4, nx=1, nu=1, nd=1)
        qdp = qs.QdpProblem.constant(
            dims, Q=[[1.0]], R=[[1.0]], S=[[0.0]], D1=[[0.0]], D2=[[0.0]],
            A=[[1.0]], B=[[0.0]], C=[[1.0]], terminal_Q=[[1.0]])
        with pytest.raises(qs.ControllabilityFailed):
            qs.theoretical_constants(qdp, 0.5)


class TestLambdaBcs:
    def test_hand_values(self):
        assert qs.lambda_bcs(1.0, 0.0, 1.0) == pytest.approx(1.0)
        assert qs.lambda_bcs(2.0, 1.0, 1.0) == pytest.approx(0.25)

    def test_domain(self):
        with pytest.raises(qs.ValidationError):
            qs.lambda_bcs(0.0, 1.0, 1.0)
        with pytest.raises(qs.ValidationError):
            qs.lambda_bcs(1.0, -1.0, 1.0)

    def test_lower_bounds_sampled_block_matrices(self):
        """The formula bounds the smallest eigenvalue of any block matrix
        assembled to match the component bounds."""
        rng = np.random.default_rng(123)
        for _ in range(50):
            n, m = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            C = rng.standard_normal((m, m))
            C = C @ C.T + 0.5 * np.eye(m)
            Bmat = 0.8 * rng.standard_normal((m, n))
            schur = rng.standard_normal((n, n))
            schur = schur @ schur.T + 0.4 * np.eye(n)
            A = schur + Bmat.T @ np.linalg.solve(C, Bmat)
            H = np.block([[A, Bmat.T], [Bmat, C]])
            beta_c = float(np.linalg.eigvalsh(C)[0])
            beta_s = float(np.linalg.eigvalsh(schur)[0])
            beta_b = float(np.linalg.norm(Bmat, 2))
            floor = qs.lambda_bcs(beta_s, beta_b, beta_c)
            assert np.linalg.eigvalsh(H)[0] >= floor - 1e-9


class TestFitDecayRate:
    def test_exact_geometric(self):
        i = 6
        ks = np.arange(15)
        norms = 0.5 ** np.abs(ks - i)
        fit = qs.fit_decay_rate(norms, i)
        assert fit.rho_fit == pytest.approx(0.5, abs=1e-12)
        assert fit.r_squared == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(rho=st.floats(0.05, 0.95), i=st.integers(0, 9), scale=st.floats(0.1, 10.0))
    def test_recovers_rate_and_intercept(self, rho, i, scale):
        ks = np.arange(12)
        norms = scale * rho ** np.abs(ks - i)
        fit = qs.fit_decay_rate(norms, i)
        assert fit.rho_fit == pytest.approx(rho, rel=1e-10)
        assert np.exp(fit.intercept) == pytest.approx(scale, rel=1e-9)

    def test_all_below_floor(self):
        with pytest.raises(qs.InsufficientData):
            qs.fit_decay_rate(np.full(10, 1e-15), 5)

    def test_single_sided(self):
        norms = np.concatenate([np.zeros(5), [1.0, 0.5, 0.25, 0.125]])
        fit = qs.fit_decay_rate(norms, 5, side="right")
        assert fit.rho_fit == pytest.approx(0.5, rel=1e-12)
        with pytest.raises(qs.InsufficientData):
            qs.fit_decay_rate(norms, 5, side="left")


class TestFiniteDifferenceSensitivity:
    def test_zero_direction(self, tracking_exp_model):
        l = qs.PerturbationDirection.zero(tracking_exp_model.dims)
        traj = qs.finite_difference_sensitivity(tracking_exp_model, l, 1e-2)
        assert np.max(np.abs(traj.stacked())) <= 1e-12

    def test_linear_model_exact_for_any_eps(self, tracking_linear_model, tracking_linear_qdp):
        """Affine dynamics and quadratic cost make the solution map linear,
        so the difference quotient equals the derivative at any scale."""
        l = qs.unit_direction(tracking_linear_model.dims, 20, 1)
        res = qs.solve_sensitivity(tracking_linear_qdp, l)
        for eps in (0.5, 1e-2):
            fd = qs.finite_difference_sensitivity(tracking_linear_model, l, eps)
            assert np.max(np.abs(fd.stacked() - res.trajectory.stacked())) <= 1e-9

    def test_first_order_convergence_on_exp_model(self, tracking_exp_model, tracking_exp_qdp):
        l = qs.unit_direction(tracking_exp_model.dims, 20, 1)
        res = qs.solve_sensitivity(tracking_exp_qdp, l)
        errors = []
        for eps in (1e-2, 5e-3, 2.5e-3):
            fd = qs.finite_difference_sensitivity(tracking_exp_model, l, eps)
            errors.append(np.max(np.abs(fd.stacked() - res.trajectory.stacked())))
        for a, b in zip(errors, errors[1:]):
            assert 1.5 <= a / b <= 2.5


class TestFittedVersusCertifiedRate:
    def test_certified_rate_is_an_upper_envelope(self):
        """On a coupled chain with genuine decay, the fitted rate stays
        below the certified one (which is deliberately conservative)."""
        qdp = qs.tridiagonal_chain_qdp(30, 0.5, seed=5, b_scale=0.8)
        i = 15
        res = qs.solve_sensitivity(qdp, qs.unit_direction(qdp.dims, i, 1))
        rep = qs.theoretical_constants(qdp, res.delta)
        fit = qs.fit_decay_rate(res.state_norms, i)
        assert fit.n_points >= 6
        assert fit.rho_fit <= rep.rho + 0.05
        assert res.rho_fit == pytest.approx(fit.rho_fit)


class TestConcurrentUse:
    def test_parallel_solves_match_serial(self, small_pool):
        from concurrent.futures import ThreadPoolExecutor

        qdp = small_pool[0]
        dirs = [qs.unit_direction(qdp.dims, i, 1) for i in range(-1, qdp.dims.N)]
        serial = [qs.solve_sensitivity(qdp, l).trajectory.stacked() for l in dirs]
        with ThreadPoolExecutor(max_workers=4) as pool:
            parallel = list(pool.map(
                lambda l: qs.solve_sensitivity(qdp, l).trajectory.stacked(), dirs))
        for a, b in zip(serial, parallel):
            assert np.array_equal(a, b)


class TestMonotonicity:
    def test_certificate_improves_with_curvature(self):
        """Fixed-data-norm chain family: larger certified curvature gives a
        faster certified rate and a smaller envelope."""
        N = 16
        rhos, envs, gammas = [], [], []
        for gamma0 in (1.0, 2.0, 4.0, 8.0):
            beta = (40.0 - 4.0 * gamma0) / 4.0
            qdp = qs.tridiagonal_chain_qdp(N, gamma0, seed=3, b_values=np.full(N, -beta))
            gamma = qs.reduced_hessian_gamma(qdp)
            rep = qs.theoretical_constants(qdp, 0.9 * gamma)
            gammas.append(gamma)
            rhos.append(rep.rho)
            envs.append(rep.upsilon_pq)
        assert all(a < b for a, b in zip(gammas, gammas[1:]))
        assert all(a >= b for a, b in zip(rhos, rhos[1:]))
        assert all(a >= b for a, b in zip(envs, envs[1:]))


class TestDecayCsv:
    def test_contract(self, tmp_path, tracking_linear_qdp):
        l = qs.unit_direction(tracking_linear_qdp.dims, 20, 1)
        res = qs.solve_sensitivity(tracking_linear_qdp, l)
        rep = qs.theoretical_constants(tracking_linear_qdp, res.delta)
        path = tmp_path / "decay.csv"
        qs.write_decay_csv(path, res, rep)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "k,norm_p,norm_q,log_ratio,theory_bound"
        assert len(lines) == 1 + tracking_linear_qdp.dims.N + 1
        last = lines[-1].split(",")
        assert last[0] == str(tracking_linear_qdp.dims.N)
        assert last[2] == ""  # no terminal control
        # clamped log for exactly-zero stages
        row0 = lines[1].split(",")
        assert float(row0[3]) == -500.0
