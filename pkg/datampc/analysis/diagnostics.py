import logging
import numpy as np
from scipy import linalg
from typing import Any, Dict, List, Optional

from ..control.closedloop import ClosedLoopLog
from ..control.ddmpc import DataMatrices, MpcConfig, MpcSolution
from ..models.lti import (
    LtiSystem,
    initial_state_from_window,
    observability_pseudoinverse,
    simulate,
)
from ..models.trajlib import DimensionError, Sequence, Trajectory, hankel
from ..settings import settings

logger = logging.getLogger(__name__)


class InconsistentWindowError(ValueError):
    """Raised when an initial window is not a trajectory of the data-generating system."""


class RankDeficientError(ValueError):
    """Raised when the stacked input/state data matrix loses full row rank."""


class PeDiagnostics:
    """Excitation constants of a data set."""

    def __init__(self, c_pe: float, c_pe_input: float, nu: float, rho: float):
        self.c_pe = c_pe
        self.c_pe_input = c_pe_input
        self.nu = nu
        self.rho = rho
        self.bound_nu_over_rho2 = nu / rho**2 if rho > 0 else float("inf")

    def to_dict(self) -> Dict[str, float]:
        return {
            "c_pe": self.c_pe,
            "c_pe_input": self.c_pe_input,
            "nu": self.nu,
            "rho": self.rho,
            "bound_nu_over_rho2": self.bound_nu_over_rho2,
        }


class PredictionErrorBound:
    """Per-step bounds on the gap between predicted and realized outputs.

    ``bound_l2[k]`` bounds the squared 2-norm of the gap, ``bound_linf[k]`` its
    infinity norm.
    """

    def __init__(self, bound_l2, bound_linf, rho2, rho_inf, c5: float):
        self.bound_l2 = np.asarray(bound_l2)
        self.bound_linf = np.asarray(bound_linf)
        self.rho2 = np.asarray(rho2)
        self.rho_inf = np.asarray(rho_inf)
        self.c5 = c5

    @property
    def bound_l2_norm(self) -> np.ndarray:
        return np.sqrt(self.bound_l2)


class PredictorDiagnostics:
    """Model-based checks on the data-driven predictor.

    Everything here needs the true plant and serves tests, diagnostics and
    reporting. The controller path in ``datampc.control`` never calls it.
    """

    def __init__(self, rank_tol: Optional[float] = None, consistency_tol: Optional[float] = None):
        self.rank_tol = settings.numerics.rank_tol if rank_tol is None else rank_tol
        self.consistency_tol = (
            settings.numerics.consistency_tol if consistency_tol is None else consistency_tol
        )

    def data_driven_simulate(self, data: DataMatrices, u_init, y_init, u_future: Sequence) -> Sequence:
        """Predict the output for u_future from clean Hankel data and an n-step initial window."""
        L, n, m, p = data.L, data.n, data.m, data.p
        u_init = np.asarray(u_init, dtype=float).reshape(-1)
        y_init = np.asarray(y_init, dtype=float).reshape(-1)
        if u_init.size != m * n or y_init.size != p * n:
            raise DimensionError(f"Initial window must hold {n} steps of u ({m}) and y ({p})")
        if u_future.N != L or u_future.d != m:
            raise DimensionError(f"Future input must be {L} steps of dimension {m}")
        if not data.pe_report.is_pe:
            logger.warning("Data input is not persistently exciting; prediction may not be unique")

        Hu, Hy = data.Hu.entries, data.Hy.entries
        M = np.vstack([Hu, Hy[: p * n]])
        b = np.concatenate([u_init, u_future.stacked(), y_init])
        alpha = linalg.lstsq(M, b, cond=self.rank_tol)[0]

        residual = float(np.max(np.abs(M @ alpha - b)))
        if residual > self.consistency_tol * max(1.0, float(np.max(np.abs(b)))):
            raise InconsistentWindowError(
                f"Initial window is not consistent with the data (residual {residual:.3g})"
            )
        return Sequence((Hy[p * n :] @ alpha).reshape(L, p))

    def span_residual(self, sys: LtiSystem, data: DataMatrices, alpha) -> float:
        """Relative gap between H alpha and the plant's response to the same inputs.

        The state at the start of the window is recovered from its first
        ``sys.n`` steps, so the data depth must cover the plant order.
        """
        alpha = np.asarray(alpha, dtype=float).reshape(-1)
        if alpha.size != data.n_alpha:
            raise DimensionError(f"alpha has {alpha.size} entries, the data has {data.n_alpha} columns")
        depth = data.L + data.n
        if depth < sys.n:
            raise DimensionError(f"Data depth {depth} is shorter than the plant order {sys.n}")

        u = (data.Hu.entries @ alpha).reshape(depth, data.m)
        y = (data.Hy.entries @ alpha).reshape(depth, data.p)
        x_start = initial_state_from_window(sys, u[: sys.n].reshape(-1), y[: sys.n].reshape(-1))
        y_plant = simulate(sys, x_start, Sequence(u))["y"].values
        return float(np.max(np.abs(y_plant - y)) / max(1.0, float(np.max(np.abs(y)))))

    def input_excitation_bounds(self, U: np.ndarray) -> Dict[str, float]:
        """c_pe of the input Hankel matrix alone and the nu / rho^2 bound on it."""
        rows, cols = U.shape
        singular_values = linalg.svdvals(U)
        nu = float(singular_values[0] ** 2)
        rho = float(singular_values[-1] ** 2) if rows <= cols else 0.0
        c_pe_input = 1.0 / rho if rho > 0 else float("inf")
        return {
            "c_pe_input": c_pe_input,
            "nu": nu,
            "rho": rho,
            "bound_nu_over_rho2": nu / rho**2 if rho > 0 else float("inf"),
        }

    def compute_c_pe(self, sys: LtiSystem, data_clean: Trajectory, L: int, n: int, x0=None) -> PeDiagnostics:
        """c_pe from the stacked input/state data matrix, plus the input-only constants.

        The state sequence is reconstructed by simulation; without x0 it is
        recovered from the first n samples of the data.
        """
        if x0 is None:
            x0 = initial_state_from_window(
                sys,
                data_clean.u.values[: sys.n].reshape(-1),
                data_clean.y.values[: sys.n].reshape(-1),
            )
        states = simulate(sys, x0, data_clean.u)["x"].values

        U = hankel(data_clean.u, L + n).entries
        n_cols = U.shape[1]
        H_ux = np.vstack([U, states[:n_cols].T])
        rows = H_ux.shape[0]
        singular_values = linalg.svdvals(H_ux)
        rank = int(np.sum(singular_values > self.rank_tol * singular_values[0]))
        if rows > n_cols or rank < rows:
            raise RankDeficientError(
                f"Stacked input/state matrix has rank {rank} < {rows} rows; excitation too low"
            )
        c_pe = float(1.0 / singular_values[-1] ** 2)

        bounds = self.input_excitation_bounds(U)
        diagnostics = PeDiagnostics(c_pe, bounds["c_pe_input"], bounds["nu"], bounds["rho"])
        logger.info(
            f"c_pe={c_pe:.6g}, c_pe_input={diagnostics.c_pe_input:.6g}, "
            f"nu/rho^2={diagnostics.bound_nu_over_rho2:.6g}"
        )
        return diagnostics

    def _propagation_constants(self, sys: LtiSystem, n: int, L: int):
        Phi_dagger = observability_pseudoinverse(sys)["Phi_dagger"]
        rho2, rho_inf = [], []
        power = np.linalg.matrix_power(sys.A, n)
        for _ in range(L):
            gain = sys.C @ power @ Phi_dagger
            rho2.append(float(np.linalg.norm(gain, 2) ** 2))
            rho_inf.append(float(np.linalg.norm(gain, np.inf)))
            power = power @ sys.A
        return np.array(rho2), np.array(rho_inf)

    def prediction_error_bound(
        self, sys: LtiSystem, sol: MpcSolution, cfg: MpcConfig, N: int
    ) -> PredictionErrorBound:
        """Bounds on ||y_hat_{t+k} - y_bar_k|| for k = 0..L-1 given the solution norms."""
        L, n, p = cfg.L, cfg.n, cfg.p
        eps = cfg.eps_bar
        c5 = float(p * (N - L - n + 1))
        rho2, rho_inf = self._propagation_constants(sys, n, L)

        alpha_l2_sq = float(sol.alpha @ sol.alpha)
        alpha_l1 = float(np.sum(np.abs(sol.alpha)))
        blocks = sol.sigma_blocks()
        sigma_init = blocks[:n]
        sigma_future = blocks[n:]
        sigma_init_l2_sq = float(np.sum(sigma_init**2))
        sigma_init_linf = float(np.max(np.abs(sigma_init))) if sigma_init.size else 0.0

        bound_l2 = (
            8.0 * c5 * eps**2 * alpha_l2_sq
            + 2.0 * np.sum(sigma_future**2, axis=1)
            + rho2 * (16.0 * n * eps**2 * (c5 * alpha_l2_sq + p) + 4.0 * sigma_init_l2_sq)
        )
        bound_linf = (
            eps * alpha_l1
            + np.max(np.abs(sigma_future), axis=1)
            + rho_inf * (eps * (alpha_l1 + 1.0) + sigma_init_linf)
        )
        return PredictionErrorBound(bound_l2, bound_linf, rho2, rho_inf, c5)

    def open_loop_replay(self, sys: LtiSystem, x_t, sol: MpcSolution) -> Sequence:
        """Plant output when the predicted inputs are applied open loop from x_t."""
        return simulate(sys, x_t, Sequence(sol.u_pred))["y"]

    def prediction_bound_report(
        self, sys: LtiSystem, log: ClosedLoopLog, cfg: MpcConfig, N: int
    ) -> List[Dict[str, Any]]:
        """Compare every stored solve of a run with its open-loop replay.

        Each row carries the solve time, the step k, both bounds (as norms) and
        the realized errors. Runs must be executed with ``keep_solutions=True``.
        """
        rows = []
        for record in log.solves:
            if record.solution is None:
                raise ValueError("Run was executed without keep_solutions; nothing to compare")
            sol = record.solution
            if sol.status == "infeasible":
                continue
            bound = self.prediction_error_bound(sys, sol, cfg, N)
            gap = self.open_loop_replay(sys, record.x, sol).values - sol.y_pred
            actual_l2 = np.linalg.norm(gap, axis=1)
            actual_linf = np.max(np.abs(gap), axis=1)
            for k in range(cfg.L):
                rows.append(
                    {
                        "t": record.t,
                        "k": k,
                        "bound_l2": float(bound.bound_l2_norm[k]),
                        "bound_linf": float(bound.bound_linf[k]),
                        "actual_l2": float(actual_l2[k]),
                        "actual_linf": float(actual_linf[k]),
                    }
                )

        violations = self.count_violations(rows)
        if violations:
            logger.warning(f"Prediction-error bound violated at {violations} (solve, k) pairs")
        else:
            logger.info(f"Prediction-error bound held over {len(log.solves)} solves")
        return rows

    @staticmethod
    def count_violations(rows: List[Dict[str, Any]]) -> int:
        """Report rows where either realized error exceeds its bound."""
        return sum(
            1 for row in rows if row["actual_l2"] > row["bound_l2"] or row["actual_linf"] > row["bound_linf"]
        )


# Global predictor diagnostics instance
predictor_diagnostics = PredictorDiagnostics()
