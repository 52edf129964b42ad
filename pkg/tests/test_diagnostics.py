import pytest
import numpy as np
import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.append(str(Path(__file__).parent.parent))

from datampc.analysis.diagnostics import (
    InconsistentWindowError,
    PredictorDiagnostics,
    RankDeficientError,
    predictor_diagnostics,
)
from datampc.control.closedloop import RunConfig, run
from datampc.control.ddmpc import DataMatrices, MpcConfig, solve_nominal
from datampc.models.lti import LtiSystem, NoiseSpec, collect_data, four_tank, simulate, steady_state
from datampc.models.trajlib import DimensionError, Sequence


@pytest.fixture(scope="module")
def plant():
    return four_tank()


@pytest.fixture(scope="module")
def equilibrium(plant):
    return steady_state(plant, [1.0, 1.0])


@pytest.fixture(scope="module")
def clean_traj(plant):
    return collect_data(plant, None, 400, 1.0, NoiseSpec(eps_bar=0.0, seed=1))["clean"]


@pytest.fixture
def diagnostics():
    return PredictorDiagnostics()


def mpc_config(equilibrium, eps_bar) -> MpcConfig:
    return MpcConfig(
        L=30,
        n=4,
        Q=3.0 * np.eye(2),
        R=1e-4 * np.eye(2),
        u_s=equilibrium.u_s,
        y_s=equilibrium.y_s,
        lambda_alpha=0.1 / eps_bar if eps_bar > 0 else 0.0,
        lambda_sigma=1000.0,
        eps_bar=eps_bar,
    )


def random_system(seed: int) -> LtiSystem:
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3))
    A *= 0.9 / np.max(np.abs(np.linalg.eigvals(A)))
    return LtiSystem(A, rng.normal(size=(3, 1)), rng.normal(size=(1, 3)))


def random_mimo_system(seed: int) -> LtiSystem:
    """Stable system with up to five states and three inputs and outputs."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    m = int(rng.integers(1, 4))
    p = int(rng.integers(1, 4))
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eigs = np.linspace(-0.8, 0.8, n) + rng.uniform(-0.05, 0.05, size=n)
    A = Q @ np.diag(eigs) @ Q.T
    return LtiSystem(A, rng.normal(size=(n, m)), rng.normal(size=(p, n)))


def mimo_data(seed: int, L: int = 10):
    sys_ = random_mimo_system(seed)
    N = (sys_.m + 1) * (L + 2 * sys_.n) + 40
    traj = collect_data(sys_, None, N, 1.0, NoiseSpec(eps_bar=0.0, seed=seed))["clean"]
    return sys_, DataMatrices.from_trajectory(traj, L, sys_.n)


def robust_run(plant, equilibrium, step_size, T, seed=1):
    traj = collect_data(plant, None, 400, 1.0, NoiseSpec(eps_bar=0.002, seed=seed))["noisy"]
    cfg = mpc_config(equilibrium, 0.002)
    rc = RunConfig(
        scheme="robust",
        step_size=step_size,
        T=T,
        data=DataMatrices.from_trajectory(traj, 30, 4),
        mpc=cfg,
        noise=NoiseSpec(eps_bar=0.002, seed=seed + 1),
        keep_solutions=True,
    )
    return cfg, run(plant, rc)


class TestAnalyzer:

    def test_defaults_from_settings(self, diagnostics):
        assert diagnostics.rank_tol == 1e-9
        assert diagnostics.consistency_tol == 1e-6

    def test_explicit_tolerances(self):
        custom = PredictorDiagnostics(rank_tol=1e-6, consistency_tol=1e-3)
        assert custom.rank_tol == 1e-6
        assert custom.consistency_tol == 1e-3

    def test_global_instance(self):
        assert isinstance(predictor_diagnostics, PredictorDiagnostics)


class TestDataDrivenSimulate:

    def test_equilibrium(self, diagnostics, equilibrium, clean_traj):
        data = DataMatrices.from_trajectory(clean_traj, 30, 4)
        prediction = diagnostics.data_driven_simulate(
            data,
            np.tile(equilibrium.u_s, 4),
            np.tile(equilibrium.y_s, 4),
            Sequence.constant(equilibrium.u_s, 30),
        )
        np.testing.assert_allclose(prediction.values, np.tile(equilibrium.y_s, (30, 1)), atol=1e-6)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_system(self, diagnostics, seed):
        sys_ = random_system(seed)
        rng = np.random.default_rng(100 + seed)
        L, n = 10, 3
        traj = collect_data(sys_, None, 100, 1.0, NoiseSpec(eps_bar=0.0, seed=seed))["clean"]
        data = DataMatrices.from_trajectory(traj, L, n)

        x_init = rng.normal(size=3)
        u = Sequence(rng.uniform(-1.0, 1.0, size=(n + L, 1)))
        y = simulate(sys_, x_init, u)["y"].values

        prediction = diagnostics.data_driven_simulate(
            data, u.values[:n].reshape(-1), y[:n].reshape(-1), Sequence(u.values[n:])
        )
        np.testing.assert_allclose(prediction.values, y[n:], rtol=1e-6, atol=1e-6)

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(20))
    def test_random_mimo_system(self, diagnostics, seed):
        sys_, data = mimo_data(seed)
        rng = np.random.default_rng(300 + seed)
        n, L = sys_.n, data.L

        u = Sequence(rng.uniform(-1.0, 1.0, size=(n + L, sys_.m)))
        y = simulate(sys_, rng.normal(size=n), u)["y"].values

        prediction = diagnostics.data_driven_simulate(
            data, u.values[:n].reshape(-1), y[:n].reshape(-1), Sequence(u.values[n:])
        )
        scale = max(1.0, float(np.max(np.abs(y))))
        np.testing.assert_allclose(prediction.values, y[n:], rtol=1e-6, atol=1e-6 * scale)

    def test_four_tank_horizon(self, diagnostics, plant, clean_traj):
        rng = np.random.default_rng(5)
        data = DataMatrices.from_trajectory(clean_traj, 30, 4)
        u = Sequence(rng.uniform(-1.0, 1.0, size=(34, 2)))
        y = simulate(plant, rng.normal(size=4), u)["y"].values
        prediction = diagnostics.data_driven_simulate(
            data, u.values[:4].reshape(-1), y[:4].reshape(-1), Sequence(u.values[4:])
        )
        np.testing.assert_allclose(prediction.values, y[4:], atol=1e-6)

    def test_inconsistent_window(self, diagnostics, clean_traj):
        rng = np.random.default_rng(6)
        data = DataMatrices.from_trajectory(clean_traj, 30, 4)
        with pytest.raises(InconsistentWindowError):
            diagnostics.data_driven_simulate(
                data, np.zeros(8), rng.normal(size=8), Sequence(np.zeros((30, 2)))
            )


class TestSpanResidual:

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(20))
    def test_column_combinations_are_trajectories(self, diagnostics, seed):
        sys_, data = mimo_data(seed)
        alpha = np.random.default_rng(500 + seed).normal(size=data.n_alpha)
        assert diagnostics.span_residual(sys_, data, alpha) <= 1e-8

    def test_four_tank_columns(self, diagnostics, plant, clean_traj):
        data = DataMatrices.from_trajectory(clean_traj, 30, 4)
        alpha = np.random.default_rng(7).normal(size=data.n_alpha)
        assert diagnostics.span_residual(plant, data, alpha) <= 1e-8

    def test_noisy_data_leaves_the_span(self, diagnostics, plant):
        noisy = collect_data(plant, None, 400, 1.0, NoiseSpec(eps_bar=0.002, seed=1))["noisy"]
        data = DataMatrices.from_trajectory(noisy, 30, 4)
        alpha = np.random.default_rng(8).normal(size=data.n_alpha)
        assert diagnostics.span_residual(plant, data, alpha) > 1e-6

    def test_alpha_size_checked(self, diagnostics, plant, clean_traj):
        data = DataMatrices.from_trajectory(clean_traj, 30, 4)
        with pytest.raises(DimensionError):
            diagnostics.span_residual(plant, data, np.zeros(data.n_alpha - 1))


class TestExcitation:

    def test_orthonormal_rows(self, diagnostics):
        U = np.eye(5)[:3]
        bounds = diagnostics.input_excitation_bounds(U)
        assert bounds["c_pe_input"] == pytest.approx(1.0)
        assert bounds["bound_nu_over_rho2"] == pytest.approx(1.0)

    def test_c_pe_for_four_tank(self, diagnostics, plant, clean_traj):
        pe = diagnostics.compute_c_pe(plant, clean_traj, 30, 4, x0=np.zeros(4))
        assert np.isfinite(pe.c_pe)
        assert pe.c_pe > 0
        assert pe.nu >= pe.rho > 0
        assert set(pe.to_dict()) == {"c_pe", "c_pe_input", "nu", "rho", "bound_nu_over_rho2"}

    def test_state_recovered_when_x0_missing(self, diagnostics, plant, clean_traj):
        given = diagnostics.compute_c_pe(plant, clean_traj, 30, 4, x0=np.zeros(4))
        recovered = diagnostics.compute_c_pe(plant, clean_traj, 30, 4)
        assert recovered.c_pe == pytest.approx(given.c_pe, rel=1e-6)

    def test_amplitude_scaling(self, diagnostics, plant):
        spec = NoiseSpec(eps_bar=0.0, seed=1)
        small = collect_data(plant, None, 400, 1.0, spec)["clean"]
        large = collect_data(plant, None, 400, 2.0, spec)["clean"]
        ratio = (
            diagnostics.compute_c_pe(plant, small, 30, 4).c_pe_input
            / diagnostics.compute_c_pe(plant, large, 30, 4).c_pe_input
        )
        assert ratio == pytest.approx(4.0, rel=1e-9)

    def test_too_little_data(self, diagnostics, plant):
        traj = collect_data(plant, None, 50, 1.0, NoiseSpec(eps_bar=0.0, seed=1))["clean"]
        with pytest.raises(RankDeficientError):
            diagnostics.compute_c_pe(plant, traj, 30, 4, x0=np.zeros(4))


class TestPredictionErrorBound:

    @pytest.fixture
    def nominal_solution(self, plant, equilibrium, clean_traj):
        cfg = mpc_config(equilibrium, 0.0)
        data = DataMatrices.from_trajectory(clean_traj, 30, 4)
        out = simulate(plant, np.zeros(4), Sequence.constant(equilibrium.u_s, 4))
        sol = solve_nominal(data, cfg, np.tile(equilibrium.u_s, 4), out["y"].stacked())
        return cfg, sol, out["x"][4]

    def test_zero_without_noise(self, diagnostics, plant, nominal_solution):
        cfg, sol, _ = nominal_solution
        bound = diagnostics.prediction_error_bound(plant, sol, cfg, 400)
        np.testing.assert_array_equal(bound.bound_l2, np.zeros(30))
        np.testing.assert_array_equal(bound.bound_linf, np.zeros(30))
        assert bound.c5 == 2 * 367

    def test_linear_in_noise_level(self, diagnostics, plant, nominal_solution):
        cfg, sol, _ = nominal_solution
        single = diagnostics.prediction_error_bound(plant, sol, cfg.model_copy(update={"eps_bar": 0.002}), 400)
        double = diagnostics.prediction_error_bound(plant, sol, cfg.model_copy(update={"eps_bar": 0.004}), 400)
        assert np.all(double.bound_linf >= 2.0 * single.bound_linf * (1 - 1e-12))
        assert np.all(single.bound_linf > 0)

    def test_replay_of_nominal_solution(self, diagnostics, plant, nominal_solution):
        _, sol, x_t = nominal_solution
        np.testing.assert_allclose(diagnostics.open_loop_replay(plant, x_t, sol).values, sol.y_pred, atol=1e-6)

    def test_robust_run_within_bounds(self, diagnostics, plant, equilibrium):
        cfg, log = robust_run(plant, equilibrium, step_size=4, T=8)
        rows = diagnostics.prediction_bound_report(plant, log, cfg, 400)
        assert len(rows) == 2 * 30
        for row in rows:
            assert row["actual_l2"] <= row["bound_l2"] * (1 + 1e-9)
            assert row["actual_linf"] <= row["bound_linf"] * (1 + 1e-9)

    @pytest.mark.slow
    def test_every_solve_of_full_run(self, diagnostics, plant, equilibrium):
        cfg, log = robust_run(plant, equilibrium, step_size=1, T=300)
        rows = diagnostics.prediction_bound_report(plant, log, cfg, 400)
        assert len(log.solves) == 300
        assert len(rows) == 30 * sum(1 for record in log.solves if record.status != "infeasible")
        assert diagnostics.count_violations(rows) == 0
        assert all(record.sigma_constraint_satisfied for record in log.solves)

    def test_count_violations(self):
        rows = [
            {"actual_l2": 0.1, "bound_l2": 0.2, "actual_linf": 0.1, "bound_linf": 0.2},
            {"actual_l2": 0.3, "bound_l2": 0.2, "actual_linf": 0.1, "bound_linf": 0.2},
            {"actual_l2": 0.1, "bound_l2": 0.2, "actual_linf": 0.3, "bound_linf": 0.2},
        ]
        assert PredictorDiagnostics.count_violations(rows) == 2
        assert PredictorDiagnostics.count_violations([]) == 0

    def test_report_needs_stored_solutions(self, diagnostics, plant, equilibrium, clean_traj):
        rc = RunConfig(scheme="nominal", T=4, data=DataMatrices.from_trajectory(clean_traj, 30, 4),
                       mpc=mpc_config(equilibrium, 0.0))
        log = run(plant, rc)
        with pytest.raises(ValueError):
            diagnostics.prediction_bound_report(plant, log, rc.mpc, 400)


if __name__ == "__main__":
    pytest.main([__file__])
