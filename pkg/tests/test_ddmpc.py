import time
import pytest
import numpy as np
import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.append(str(Path(__file__).parent.parent))

from datampc.control.ddmpc import (
    DataMatrices,
    MpcConfig,
    condense,
    sigma_constraint_check,
    solve_nominal,
    solve_robust,
)
from datampc.control.qpsolve import SOLVED
from datampc.models.lti import NoiseSpec, collect_data, four_tank, simulate, steady_state
from datampc.models.trajlib import DimensionError, Sequence, Trajectory


def make_config(plant, **overrides) -> MpcConfig:
    eq = steady_state(plant, [1.0, 1.0])
    params = dict(
        L=30,
        n=4,
        Q=3.0 * np.eye(2),
        R=1e-4 * np.eye(2),
        u_s=eq.u_s,
        y_s=eq.y_s,
        lambda_alpha=0.1 / 0.002,
        lambda_sigma=1000.0,
        eps_bar=0.002,
    )
    params.update(overrides)
    return MpcConfig(**params)


def warmup_window(plant, u_s, n, x0=None):
    """Inputs, outputs and final state after n steps of u_s from x0."""
    x0 = np.zeros(plant.n) if x0 is None else x0
    out = simulate(plant, x0, Sequence.constant(u_s, n))
    return np.tile(u_s, n), out["y"].stacked(), out["x"][n]


@pytest.fixture(scope="module")
def plant():
    return four_tank()


@pytest.fixture(scope="module")
def clean_data(plant):
    return collect_data(plant, None, 400, 1.0, NoiseSpec(eps_bar=0.0, seed=1))["clean"]


@pytest.fixture(scope="module")
def noisy_data(plant):
    return collect_data(plant, None, 400, 1.0, NoiseSpec(eps_bar=0.002, seed=1))["noisy"]


class TestMpcConfig:

    def test_weights_must_be_positive_definite(self, plant):
        with pytest.raises(ValueError):
            make_config(plant, Q=np.diag([1.0, -1.0]))

    def test_weights_must_be_symmetric(self, plant):
        with pytest.raises(ValueError):
            make_config(plant, R=np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_convex_bound_needs_constant(self, plant):
        with pytest.raises(ValueError):
            make_config(plant, sigma_constraint_mode="convex_bound")

    def test_negative_regularization_rejected(self, plant):
        with pytest.raises(ValueError):
            make_config(plant, lambda_sigma=-1.0)

    def test_bound_dimension_checked(self, plant):
        with pytest.raises(ValueError):
            make_config(plant, u_hi=[1.0, 1.0, 1.0])

    @pytest.mark.parametrize("scheme,L,ok", [("nominal", 4, True), ("robust", 7, False), ("robust", 8, True)])
    def test_horizon_requirements(self, plant, scheme, L, ok):
        cfg = make_config(plant, L=L)
        if ok:
            cfg.check_horizon(scheme)
        else:
            with pytest.raises(ValueError):
                cfg.check_horizon(scheme)


class TestDataMatrices:

    def test_sizes(self, clean_data):
        data = DataMatrices.from_trajectory(clean_data, 30, 4)
        assert data.n_alpha == 367
        assert data.N == 400
        assert data.Hu.shape == (68, 367)
        assert data.pe_report.order == 38
        assert data.pe_report.is_pe is True

    def test_short_data_not_exciting(self):
        rng = np.random.default_rng(0)
        traj = Trajectory.from_arrays(rng.uniform(-1, 1, (40, 2)), rng.normal(size=(40, 2)))
        data = DataMatrices.from_trajectory(traj, 30, 4)
        assert data.pe_report.is_pe is False


class TestCondense:

    def test_nominal_decision_vector(self, plant, clean_data):
        cfg = make_config(plant)
        data = DataMatrices.from_trajectory(clean_data, 30, 4)
        u_init, y_init, _ = warmup_window(plant, cfg.u_s, 4)
        prob = condense(data, cfg, "nominal", u_init, y_init)
        assert prob.nz == 367
        assert prob.mi == 0

    def test_robust_decision_vector(self, plant, clean_data):
        cfg = make_config(plant)
        data = DataMatrices.from_trajectory(clean_data, 30, 4)
        u_init, y_init, _ = warmup_window(plant, cfg.u_s, 4)
        prob = condense(data, cfg, "robust", u_init, y_init)
        assert prob.nz == 367 + 2 * 34
        z = np.zeros(prob.nz)
        z[367:] = 1.0
        np.testing.assert_allclose(prob.y_bar(z), -np.ones(68))

    def test_convex_bound_adds_slack_rows(self, plant, clean_data):
        cfg = make_config(plant, sigma_constraint_mode="convex_bound", sigma_bound_c=2.0)
        data = DataMatrices.from_trajectory(clean_data, 30, 4)
        u_init, y_init, _ = warmup_window(plant, cfg.u_s, 4)
        prob = condense(data, cfg, "robust", u_init, y_init)
        assert prob.mi == 68
        np.testing.assert_allclose(prob.hi, 2.0 * 0.002)

    def test_only_bounded_components_enter(self, plant, clean_data):
        cfg = make_config(plant, u_hi=[np.inf, 2.0])
        data = DataMatrices.from_trajectory(clean_data, 30, 4)
        u_init, y_init, _ = warmup_window(plant, cfg.u_s, 4)
        assert condense(data, cfg, "nominal", u_init, y_init).mi == 30

    def test_window_dimension_checked(self, plant, clean_data):
        cfg = make_config(plant)
        data = DataMatrices.from_trajectory(clean_data, 30, 4)
        with pytest.raises(DimensionError):
            condense(data, cfg, "nominal", np.zeros(7), np.zeros(8))

    def test_config_must_match_data(self, plant, clean_data):
        data = DataMatrices.from_trajectory(clean_data, 30, 4)
        with pytest.raises(DimensionError):
            condense(data, make_config(plant, L=20), "nominal", np.zeros(8), np.zeros(8))


class TestSolveNominal:

    def test_equilibrium_has_zero_cost(self, plant, clean_data):
        cfg = make_config(plant)
        data = DataMatrices.from_trajectory(clean_data, 30, 4)
        sol = solve_nominal(data, cfg, np.tile(cfg.u_s, 4), np.tile(cfg.y_s, 4))
        assert sol.status == SOLVED
        assert sol.cost == pytest.approx(0.0, abs=1e-6)
        np.testing.assert_allclose(sol.u_pred, np.tile(cfg.u_s, (30, 1)), atol=1e-6)
        np.testing.assert_allclose(sol.y_pred, np.tile(cfg.y_s, (30, 1)), atol=1e-6)

    @pytest.mark.parametrize("n", [4, 5])
    def test_prediction_matches_plant(self, plant, clean_data, n):
        cfg = make_config(plant, n=n)
        data = DataMatrices.from_trajectory(clean_data, 30, n)
        u_init, y_init, x_t = warmup_window(plant, cfg.u_s, n)
        sol = solve_nominal(data, cfg, u_init, y_init)
        assert sol.status == SOLVED

        replay = simulate(plant, x_t, Sequence(sol.u_pred))["y"].values
        np.testing.assert_allclose(replay, sol.y_pred, atol=1e-6)
        np.testing.assert_allclose(sol.u_pred[-n:], np.tile(cfg.u_s, (n, 1)), atol=1e-6)
        np.testing.assert_allclose(sol.y_pred[-n:], np.tile(cfg.y_s, (n, 1)), atol=1e-6)

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(10))
    def test_prediction_matches_plant_from_random_state(self, plant, clean_data, seed):
        rng = np.random.default_rng(200 + seed)
        cfg = make_config(plant)
        data = DataMatrices.from_trajectory(clean_data, 30, 4)
        u_window = rng.uniform(0.0, 2.0, size=(4, 2))
        out = simulate(plant, rng.normal(size=4), Sequence(u_window))
        sol = solve_nominal(data, cfg, u_window.reshape(-1), out["y"].stacked())
        assert sol.status == SOLVED

        replay = simulate(plant, out["x"][4], Sequence(sol.u_pred))["y"].values
        np.testing.assert_allclose(replay, sol.y_pred, atol=1e-6)
        assert sol.cost >= 0.0

    def test_initial_window_reproduced(self, plant, clean_data):
        cfg = make_config(plant)
        data = DataMatrices.from_trajectory(clean_data, 30, 4)
        u_init, y_init, _ = warmup_window(plant, cfg.u_s, 4)
        sol = solve_nominal(data, cfg, u_init, y_init)
        np.testing.assert_allclose(sol.u_bar.stacked()[:8], u_init, atol=1e-7)
        np.testing.assert_allclose(sol.y_bar.stacked()[:8], y_init, atol=1e-7)

    def test_input_box_respected(self, plant, clean_data):
        cfg = make_config(plant, u_lo=[0.9, 0.9], u_hi=[1.1, 1.1])
        data = DataMatrices.from_trajectory(clean_data, 30, 4)
        sol = solve_nominal(data, cfg, np.tile(cfg.u_s, 4), np.tile(cfg.y_s, 4))
        assert sol.status == SOLVED
        assert np.all(sol.u_pred <= 1.1 + 1e-6)
        assert np.all(sol.u_pred >= 0.9 - 1e-6)


class TestSolveRobust:

    def test_noise_free_limit_equals_nominal(self, plant, clean_data):
        cfg = make_config(plant, eps_bar=0.0, lambda_alpha=0.0)
        data = DataMatrices.from_trajectory(clean_data, 30, 4)
        u_init, y_init, _ = warmup_window(plant, cfg.u_s, 4)
        nominal = solve_nominal(data, cfg, u_init, y_init)
        robust = solve_robust(data, cfg, u_init, y_init)
        assert robust.status == SOLVED
        np.testing.assert_array_equal(robust.sigma, np.zeros(2 * 34))
        np.testing.assert_allclose(robust.u_pred[0], nominal.u_pred[0], atol=1e-6)

    def test_cost_bounded_by_noise_free_candidate(self, plant, clean_data):
        cfg = make_config(plant)
        data = DataMatrices.from_trajectory(clean_data, 30, 4)
        window = (np.tile(cfg.u_s, 4), np.tile(cfg.y_s, 4))
        candidate = solve_nominal(data, cfg, *window)
        robust = solve_robust(data, cfg, *window)
        bound = cfg.lambda_alpha * cfg.eps_bar * float(candidate.alpha @ candidate.alpha)
        assert robust.cost <= bound * (1.0 + 1e-6) + 1e-9

    def test_four_tank_tuning(self, plant, noisy_data):
        cfg = make_config(plant)
        data = DataMatrices.from_trajectory(noisy_data, 30, 4)
        u_init, y_init, _ = warmup_window(plant, cfg.u_s, 4)
        y_init = y_init + NoiseSpec(eps_bar=0.002, seed=2).sample(np.random.default_rng(2), y_init.shape)

        start = time.perf_counter()
        sol = solve_robust(data, cfg, u_init, y_init)
        assert time.perf_counter() - start < 5.0
        assert sol.status == SOLVED
        assert sol.sigma.size == 68
        bound = cfg.eps_bar * (1.0 + np.sum(np.abs(sol.alpha)))
        assert np.max(np.abs(sol.sigma_blocks()[4:])) <= bound
        assert sol.sigma_constraint_satisfied is True

    def test_alpha_norm_shrinks_with_regularization(self, plant, noisy_data):
        data = DataMatrices.from_trajectory(noisy_data, 30, 4)
        cfg = make_config(plant)
        u_init, y_init, _ = warmup_window(plant, cfg.u_s, 4)
        y_init = y_init + NoiseSpec(eps_bar=0.002, seed=3).sample(np.random.default_rng(3), y_init.shape)

        norms = []
        for lambda_alpha in (5.0, 50.0, 500.0, 5000.0):
            sol = solve_robust(data, make_config(plant, lambda_alpha=lambda_alpha), u_init, y_init)
            assert sol.status == SOLVED
            norms.append(float(np.linalg.norm(sol.alpha)))
        for weaker, stronger in zip(norms, norms[1:]):
            assert stronger <= weaker * (1.0 + 1e-6)

    def test_terminal_window_at_setpoint(self, plant, noisy_data):
        cfg = make_config(plant)
        data = DataMatrices.from_trajectory(noisy_data, 30, 4)
        rng = np.random.default_rng(9)
        u_window = rng.uniform(0.0, 2.0, size=(4, 2))
        y_window = simulate(plant, rng.normal(size=4), Sequence(u_window))["y"].stacked()
        sol = solve_robust(data, cfg, u_window.reshape(-1), y_window)
        assert sol.status == SOLVED
        np.testing.assert_allclose(sol.u_pred[-4:], np.tile(cfg.u_s, (4, 1)), atol=1e-6)
        np.testing.assert_allclose(sol.y_pred[-4:], np.tile(cfg.y_s, (4, 1)), atol=1e-6)
        assert sol.cost >= 0.0

    def test_convex_bound_enforced(self, plant, noisy_data):
        cfg = make_config(plant, sigma_constraint_mode="convex_bound", sigma_bound_c=1.0)
        data = DataMatrices.from_trajectory(noisy_data, 30, 4)
        u_init, y_init, _ = warmup_window(plant, cfg.u_s, 4)
        sol = solve_robust(data, cfg, u_init, y_init)
        assert sol.status == SOLVED
        assert np.max(np.abs(sol.sigma)) <= 0.002 + 1e-6

    def test_horizon_too_short(self, plant, noisy_data):
        cfg = make_config(plant, L=6)
        data = DataMatrices.from_trajectory(noisy_data, 6, 4)
        with pytest.raises(ValueError):
            solve_robust(data, cfg, np.zeros(8), np.zeros(8))


class TestSigmaConstraintCheck:

    def test_literal_bound(self):
        alpha = np.array([1.0, -1.0])
        sigma = np.array([0.0, 0.0, 0.3, 0.0, 0.31, 0.0])
        future, initial = sigma_constraint_check(alpha, sigma, 0.1, n=1, p=2)
        assert future is False
        assert initial is True

    def test_zero_noise_needs_zero_slack(self):
        future, initial = sigma_constraint_check(np.ones(3), np.array([0.0, 1e-12]), 0.0, n=0, p=1)
        assert future is False


if __name__ == "__main__":
    pytest.main([__file__])
