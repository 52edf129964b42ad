import logging
import numpy as np
from scipy import linalg
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from typing import Literal, Optional

from ..models.trajlib import (
    DimensionError,
    HankelMatrix,
    PeReport,
    Sequence,
    Trajectory,
    hankel,
    persistence_of_excitation,
)
from ..settings import settings
from .qpsolve import INFEASIBLE, SOLVED, QpProblem, QpSettings, solve_qp

logger = logging.getLogger(__name__)

SigmaMode = Literal["none", "convex_bound", "exact_nonconvex_check"]
Scheme = Literal["nominal", "robust"]


def _vector(value) -> Optional[np.ndarray]:
    if value is None:
        return None
    return np.atleast_1d(np.asarray(value, dtype=float)).reshape(-1)


class MpcConfig(BaseModel):
    """Horizon, weights, regularization and constraint boxes of one MPC problem."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    L: int
    n: int
    Q: np.ndarray
    R: np.ndarray
    u_s: np.ndarray
    y_s: np.ndarray
    lambda_alpha: float = 0.0
    lambda_sigma: float = 0.0
    eps_bar: float = 0.0
    u_lo: Optional[np.ndarray] = None
    u_hi: Optional[np.ndarray] = None
    y_lo: Optional[np.ndarray] = None
    y_hi: Optional[np.ndarray] = None
    sigma_constraint_mode: SigmaMode = "none"
    sigma_bound_c: Optional[float] = None
    terminal_constraint: bool = True

    @field_validator("Q", "R", mode="before")
    @classmethod
    def _as_weight(cls, value):
        return np.atleast_2d(np.asarray(value, dtype=float))

    @field_validator("u_s", "y_s", "u_lo", "u_hi", "y_lo", "y_hi", mode="before")
    @classmethod
    def _as_vector(cls, value):
        return _vector(value)

    @field_validator("L", "n")
    @classmethod
    def _positive(cls, value):
        if value < 1:
            raise ValueError(f"must be a positive integer, got {value}")
        return value

    @field_validator("lambda_alpha", "lambda_sigma", "eps_bar")
    @classmethod
    def _nonnegative(cls, value):
        if value < 0:
            raise ValueError(f"must be nonnegative, got {value}")
        return value

    @model_validator(mode="after")
    def _consistent(self):
        m, p = self.u_s.size, self.y_s.size
        for name, weight, dim in (("Q", self.Q, p), ("R", self.R, m)):
            if weight.shape != (dim, dim):
                raise ValueError(f"{name} must be {dim}x{dim}, got {weight.shape}")
            if not np.allclose(weight, weight.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            try:
                linalg.cholesky(weight)
            except linalg.LinAlgError:
                raise ValueError(f"{name} must be positive definite")
        for name, bound, dim in (
            ("u_lo", self.u_lo, m),
            ("u_hi", self.u_hi, m),
            ("y_lo", self.y_lo, p),
            ("y_hi", self.y_hi, p),
        ):
            if bound is not None and bound.size != dim:
                raise ValueError(f"{name} has {bound.size} entries, expected {dim}")
        if self.sigma_constraint_mode == "convex_bound":
            if self.sigma_bound_c is None or self.sigma_bound_c <= 0:
                raise ValueError("convex_bound mode needs a positive sigma_bound_c")
        return self

    @property
    def m(self) -> int:
        return self.u_s.size

    @property
    def p(self) -> int:
        return self.y_s.size

    def check_horizon(self, scheme: str):
        """Nominal needs L >= n, every robust variant needs L >= 2n."""
        needed = self.n if scheme == "nominal" else 2 * self.n
        if self.L < needed:
            raise ValueError(f"{scheme} scheme needs L >= {needed}, got L={self.L} with n={self.n}")

    def input_box(self):
        return self._box(self.u_lo, self.u_hi, self.m)

    def output_box(self):
        return self._box(self.y_lo, self.y_hi, self.p)

    @staticmethod
    def _box(lo, hi, dim):
        lo = np.full(dim, -np.inf) if lo is None else lo
        hi = np.full(dim, np.inf) if hi is None else hi
        return lo, hi


class DataMatrices:
    """Hankel matrices of depth L+n built from one measured trajectory."""

    def __init__(self, Hu: HankelMatrix, Hy: HankelMatrix, L: int, n: int, pe_report: PeReport):
        if Hu.L != L + n or Hy.L != L + n or Hu.n_cols != Hy.n_cols:
            raise DimensionError("Hu and Hy must share depth L+n and column count")
        self.Hu = Hu
        self.Hy = Hy
        self.L = L
        self.n = n
        self.pe_report = pe_report

    @classmethod
    def from_trajectory(cls, traj: Trajectory, L: int, n: int) -> "DataMatrices":
        depth = L + n
        Hu = hankel(traj.u, depth)
        Hy = hankel(traj.y, depth)

        order = L + 2 * n
        if traj.N >= order:
            pe_report = persistence_of_excitation(traj.u, order)
        else:
            pe_report = PeReport(order=order, is_pe=False, rank=0, sigma_min=0.0)
        if not pe_report.is_pe:
            logger.warning(
                f"Input is not persistently exciting of order {order} "
                f"(rank {pe_report.rank} < {traj.m * order}); predictions may be inexact"
            )
        return cls(Hu, Hy, L, n, pe_report)

    @property
    def m(self) -> int:
        return self.Hu.d

    @property
    def p(self) -> int:
        return self.Hy.d

    @property
    def n_alpha(self) -> int:
        return self.Hu.n_cols

    @property
    def N(self) -> int:
        return self.n_alpha + self.L + self.n - 1


class MpcSolution:
    """Optimizer of one MPC problem. u_bar and y_bar cover indices -n..L-1."""

    def __init__(
        self,
        alpha: np.ndarray,
        sigma: np.ndarray,
        u_bar: Sequence,
        y_bar: Sequence,
        cost: float,
        status: str,
        sigma_constraint_satisfied: bool,
        sigma_initial_satisfied: bool,
        n: int,
        qp_iterations: int = 0,
    ):
        self.alpha = alpha
        self.sigma = sigma
        self.u_bar = u_bar
        self.y_bar = y_bar
        self.cost = cost
        self.status = status
        self.sigma_constraint_satisfied = sigma_constraint_satisfied
        self.sigma_initial_satisfied = sigma_initial_satisfied
        self.n = n
        self.qp_iterations = qp_iterations

    @property
    def L(self) -> int:
        return self.u_bar.N - self.n

    @property
    def u_pred(self) -> np.ndarray:
        """Predicted inputs for k = 0..L-1, shape (L, m)."""
        return self.u_bar.values[self.n :]

    @property
    def y_pred(self) -> np.ndarray:
        return self.y_bar.values[self.n :]

    def sigma_blocks(self) -> np.ndarray:
        """Slack reshaped to (L+n, p); row i belongs to index i-n."""
        return self.sigma.reshape(self.u_bar.N, -1)

    def stage_costs(self, cfg: MpcConfig) -> np.ndarray:
        du = self.u_pred - cfg.u_s
        dy = self.y_pred - cfg.y_s
        return np.einsum("ki,ij,kj->k", du, cfg.R, du) + np.einsum("ki,ij,kj->k", dy, cfg.Q, dy)

    def __repr__(self) -> str:
        return f"MpcSolution(status={self.status}, cost={self.cost:.6g})"


class CondensedProblem(QpProblem):
    """QP in z = alpha (nominal) or z = (alpha, sigma) (robust) with affine output maps."""

    def __init__(self, Gu: np.ndarray, Gy: np.ndarray, n_alpha: int, scheme: str, **qp_data):
        super().__init__(**qp_data)
        self.Gu = Gu
        self.Gy = Gy
        self.n_alpha = n_alpha
        self.scheme = scheme

    def u_bar(self, z: np.ndarray) -> np.ndarray:
        return self.Gu @ z

    def y_bar(self, z: np.ndarray) -> np.ndarray:
        return self.Gy @ z


def _check_window(name: str, window, expected: int) -> np.ndarray:
    window = np.asarray(window, dtype=float).reshape(-1)
    if window.size != expected:
        raise DimensionError(f"{name} has {window.size} entries, expected {expected}")
    return window


def condense(
    data: DataMatrices, cfg: MpcConfig, scheme: Scheme, u_init, y_init
) -> CondensedProblem:
    """Eliminate u_bar and y_bar so that only alpha (and sigma) remain as decision variables."""
    if data.L != cfg.L or data.n != cfg.n:
        raise DimensionError(
            f"Data built for L={data.L}, n={data.n} but config has L={cfg.L}, n={cfg.n}"
        )
    if data.m != cfg.m or data.p != cfg.p:
        raise DimensionError(
            f"Data has m={data.m}, p={data.p} but setpoint has m={cfg.m}, p={cfg.p}"
        )
    L, n, m, p = cfg.L, cfg.n, cfg.m, cfg.p
    u_init = _check_window("u_init", u_init, m * n)
    y_init = _check_window("y_init", y_init, p * n)

    n_alpha = data.n_alpha
    n_sigma = p * (L + n) if scheme == "robust" else 0
    nz = n_alpha + n_sigma
    Hu, Hy = data.Hu.entries, data.Hy.entries

    Gu = np.hstack([Hu, np.zeros((m * (L + n), n_sigma))])
    Gy = np.hstack([Hy, -np.eye(n_sigma)]) if n_sigma else Hy.copy()

    # Stage cost over k = 0..L-1 (block rows n..n+L-1)
    Su, Sy = Gu[m * n :], Gy[p * n :]
    R_bar = np.kron(np.eye(L), cfg.R)
    Q_bar = np.kron(np.eye(L), cfg.Q)
    u_ref = np.tile(cfg.u_s, L)
    y_ref = np.tile(cfg.y_s, L)
    P = 2.0 * (Su.T @ R_bar @ Su + Sy.T @ Q_bar @ Sy)
    q = -2.0 * (Su.T @ R_bar @ u_ref + Sy.T @ Q_bar @ y_ref)

    delta = settings.numerics.tikhonov
    alpha_weight = cfg.lambda_alpha * cfg.eps_bar if scheme == "robust" else 0.0
    alpha_block = np.arange(n_alpha)
    sigma_block = np.arange(n_alpha, nz)
    P[alpha_block, alpha_block] += 2.0 * alpha_weight if alpha_weight > 0 else delta
    if n_sigma:
        P[sigma_block, sigma_block] += 2.0 * cfg.lambda_sigma if cfg.lambda_sigma > 0 else delta

    eq_rows = [Gu[: m * n], Gy[: p * n]]
    eq_rhs = [u_init, y_init]
    if cfg.terminal_constraint:
        eq_rows += [Gu[m * L :], Gy[p * L :]]
        eq_rhs += [np.tile(cfg.u_s, n), np.tile(cfg.y_s, n)]
    if n_sigma and cfg.eps_bar == 0.0:
        # Without noise the slack bound collapses to sigma = 0
        eq_rows.append(np.hstack([np.zeros((n_sigma, n_alpha)), np.eye(n_sigma)]))
        eq_rhs.append(np.zeros(n_sigma))

    ineq_rows, ineq_lo, ineq_hi = [], [], []

    def add_box(rows: np.ndarray, lo: np.ndarray, hi: np.ndarray, dim: int):
        bounded = np.isfinite(lo) | np.isfinite(hi)
        if not np.any(bounded):
            return
        mask = np.tile(bounded, rows.shape[0] // dim)
        ineq_rows.append(rows[mask])
        ineq_lo.append(np.tile(lo, rows.shape[0] // dim)[mask])
        ineq_hi.append(np.tile(hi, rows.shape[0] // dim)[mask])

    add_box(Su, *cfg.input_box(), m)
    if scheme == "nominal":
        add_box(Sy, *cfg.output_box(), p)
    elif cfg.sigma_constraint_mode == "convex_bound" and cfg.eps_bar > 0.0:
        bound = np.full(p, cfg.sigma_bound_c * cfg.eps_bar)
        add_box(np.hstack([np.zeros((n_sigma, n_alpha)), np.eye(n_sigma)]), -bound, bound, p)

    return CondensedProblem(
        Gu=Gu,
        Gy=Gy,
        n_alpha=n_alpha,
        scheme=scheme,
        P=P,
        q=q,
        Aeq=np.vstack(eq_rows),
        beq=np.concatenate(eq_rhs),
        Cineq=np.vstack(ineq_rows) if ineq_rows else None,
        lo=np.concatenate(ineq_lo) if ineq_lo else None,
        hi=np.concatenate(ineq_hi) if ineq_hi else None,
    )


def sigma_constraint_check(alpha: np.ndarray, sigma: np.ndarray, eps_bar: float, n: int, p: int):
    """Literal slack bound ||sigma_k||_inf <= eps_bar (1 + ||alpha||_1).

    Returns (future, initial): the check over k = 0..L-1 and over the initial window.
    """
    bound = eps_bar * (1.0 + np.sum(np.abs(alpha)))
    blocks = np.abs(sigma.reshape(-1, p))
    future = bool(np.all(blocks[n:].max(axis=1) <= bound))
    initial = bool(np.all(blocks[:n].max(axis=1) <= bound))
    return future, initial


def _solution_from_qp(
    prob: CondensedProblem, z: np.ndarray, status: str, iterations: int, data: DataMatrices,
    cfg: MpcConfig, scheme: str,
) -> MpcSolution:
    L, n, m, p = cfg.L, cfg.n, cfg.m, cfg.p
    alpha = z[: prob.n_alpha].copy()
    if scheme == "robust" and cfg.eps_bar > 0.0:
        sigma = z[prob.n_alpha :].copy()
    else:
        sigma = np.zeros(p * (L + n))

    u_bar = data.Hu.entries @ alpha
    y_bar = data.Hy.entries @ alpha - sigma
    solution = MpcSolution(
        alpha=alpha,
        sigma=sigma,
        u_bar=Sequence(u_bar.reshape(L + n, m)),
        y_bar=Sequence(y_bar.reshape(L + n, p)),
        cost=0.0,
        status=status,
        sigma_constraint_satisfied=True,
        sigma_initial_satisfied=True,
        n=n,
        qp_iterations=iterations,
    )
    cost = float(np.sum(solution.stage_costs(cfg)))
    if scheme == "robust":
        cost += cfg.lambda_alpha * cfg.eps_bar * float(alpha @ alpha)
        cost += cfg.lambda_sigma * float(sigma @ sigma)
        future, initial = sigma_constraint_check(alpha, sigma, cfg.eps_bar, n, p)
        solution.sigma_constraint_satisfied = future
        solution.sigma_initial_satisfied = initial
    solution.cost = cost
    return solution


def solve_nominal(
    data: DataMatrices, cfg: MpcConfig, u_init, y_init, qps: Optional[QpSettings] = None
) -> MpcSolution:
    """Terminal-equality MPC on noise-free Hankel data."""
    cfg.check_horizon("nominal")
    prob = condense(data, cfg, "nominal", u_init, y_init)
    result = solve_qp(prob, qps)
    if result.status != SOLVED:
        logger.warning(f"Nominal MPC problem not solved: {result.status}")
    solution = _solution_from_qp(prob, result.z, result.status, result.iterations, data, cfg, "nominal")
    logger.debug(
        f"Nominal solve: status={solution.status}, cost={solution.cost:.6g}, "
        f"|alpha|_2={np.linalg.norm(solution.alpha):.4g}"
    )
    return solution


def solve_robust(
    data: DataMatrices, cfg: MpcConfig, u_init, y_init_noisy, qps: Optional[QpSettings] = None
) -> MpcSolution:
    """Slack-relaxed, regularized MPC on noisy Hankel data."""
    cfg.check_horizon("robust")
    prob = condense(data, cfg, "robust", u_init, y_init_noisy)
    result = solve_qp(prob, qps)
    if result.status != SOLVED:
        logger.warning(f"Robust MPC problem not solved: {result.status}")
    solution = _solution_from_qp(prob, result.z, result.status, result.iterations, data, cfg, "robust")

    if result.status != INFEASIBLE and not solution.sigma_constraint_satisfied:
        level = logging.WARNING if cfg.sigma_constraint_mode == "exact_nonconvex_check" else logging.DEBUG
        logger.log(level, "Slack exceeds eps_bar (1 + |alpha|_1) on the prediction horizon")
    logger.debug(
        f"Robust solve: status={solution.status}, cost={solution.cost:.6g}, "
        f"|alpha|_2={np.linalg.norm(solution.alpha):.4g}, "
        f"|sigma|_inf={np.max(np.abs(solution.sigma)):.3g}"
    )
    return solution
