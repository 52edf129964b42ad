import logging
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Any, Dict, List, Literal, Optional, Tuple

from ..models.lti import Equilibrium, LtiSystem, NoiseSource, NoiseSpec, simulate
from ..models.trajlib import Sequence
from ..settings import settings
from .ddmpc import DataMatrices, MpcConfig, MpcSolution, solve_nominal, solve_robust
from .qpsolve import INFEASIBLE, QpSettings

logger = logging.getLogger(__name__)

COMPLETED = "completed"
DIVERGED = "diverged"

RunScheme = Literal["nominal", "robust", "robust_no_terminal"]


class RunConfig(BaseModel):
    """Everything one receding-horizon run needs besides the plant."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    scheme: RunScheme
    step_size: int = 1
    T: int
    data: DataMatrices
    mpc: MpcConfig
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    qps: QpSettings = Field(default_factory=QpSettings.from_settings)
    warmup_input: Optional[np.ndarray] = None
    x0: Optional[np.ndarray] = None
    divergence_guard: float = Field(default_factory=lambda: settings.closed_loop.divergence_guard)
    keep_solutions: bool = False

    @field_validator("warmup_input", "x0", mode="before")
    @classmethod
    def _as_vector(cls, value):
        if value is None:
            return None
        return np.atleast_1d(np.asarray(value, dtype=float)).reshape(-1)

    @model_validator(mode="after")
    def _check_blocks(self):
        n = self.mpc.n
        if not 1 <= self.step_size <= n:
            raise ValueError(f"step_size must lie in [1, {n}], got {self.step_size}")
        if self.T < n:
            raise ValueError(f"T must be at least n={n}, got {self.T}")
        self.mpc.check_horizon("nominal" if self.scheme == "nominal" else "robust")
        return self

    def effective_mpc(self) -> MpcConfig:
        if self.scheme == "robust_no_terminal":
            return self.mpc.model_copy(update={"terminal_constraint": False})
        return self.mpc


class SolveRecord:
    """Summary of one MPC solve inside a run."""

    def __init__(self, t: int, solution: MpcSolution, applied: int, x: np.ndarray, keep: bool):
        self.t = t
        self.cost = solution.cost
        self.alpha_l2 = float(np.linalg.norm(solution.alpha))
        self.alpha_l1 = float(np.sum(np.abs(solution.alpha)))
        self.sigma_l2 = float(np.linalg.norm(solution.sigma))
        self.sigma_linf = float(np.max(np.abs(solution.sigma))) if solution.sigma.size else 0.0
        self.status = solution.status
        self.sigma_constraint_satisfied = solution.sigma_constraint_satisfied
        self.sigma_initial_satisfied = solution.sigma_initial_satisfied
        self.applied = applied
        self.x = x
        self.solution = solution if keep else None
        self.applied_stage_cost = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "t": self.t,
            "cost": self.cost,
            "alpha_l2": self.alpha_l2,
            "alpha_l1": self.alpha_l1,
            "sigma_l2": self.sigma_l2,
            "sigma_linf": self.sigma_linf,
            "status": self.status,
            "constraint12e": self.sigma_constraint_satisfied,
        }


class ClosedLoopLog:
    """Per-step record of a run; warmup steps are kept separately at t = -n..-1."""

    def __init__(self, scheme: str, step_size: int, T: int, n: int, x0: np.ndarray):
        self.scheme = scheme
        self.step_size = step_size
        self.T = T
        self.n = n
        self.x0 = x0
        self.warmup_u: List[np.ndarray] = []
        self.warmup_y: List[np.ndarray] = []
        self.warmup_y_tilde: List[np.ndarray] = []
        self.u: List[np.ndarray] = []
        self.y: List[np.ndarray] = []
        self.y_tilde: List[np.ndarray] = []
        self.solve_index: List[int] = []
        self.row_status: List[str] = []
        self.solves: List[SolveRecord] = []
        self.status = COMPLETED

    @property
    def steps(self) -> int:
        return len(self.u)

    def u_array(self) -> np.ndarray:
        return np.array(self.u).reshape(self.steps, -1)

    def y_array(self) -> np.ndarray:
        return np.array(self.y).reshape(self.steps, -1)

    def y_tilde_array(self) -> np.ndarray:
        return np.array(self.y_tilde).reshape(self.steps, -1)

    def tracking_errors(self, y_s, ord=2) -> np.ndarray:
        """||y_t - y_s|| for every logged step."""
        if not self.steps:
            return np.zeros(0)
        return np.linalg.norm(self.y_array() - np.asarray(y_s), ord=ord, axis=1)

    def xi_errors(self, u_s, y_s) -> np.ndarray:
        """||xi_t - xi_s||_2 with xi_t the last n inputs and outputs, for t = 0..steps."""
        u_all = np.vstack([np.array(self.warmup_u), *([self.u_array()] if self.steps else [])])
        y_all = np.vstack([np.array(self.warmup_y), *([self.y_array()] if self.steps else [])])
        du = u_all - np.asarray(u_s)
        dy = y_all - np.asarray(y_s)
        errors = []
        for t in range(self.steps + 1):
            window = slice(t, t + self.n)
            errors.append(np.sqrt(np.sum(du[window] ** 2) + np.sum(dy[window] ** 2)))
        return np.array(errors)

    def resimulate(self, sys: LtiSystem) -> np.ndarray:
        """Plant output from x0 under the logged inputs (warmup included), main steps only."""
        u_all = np.vstack([np.array(self.warmup_u), *([self.u_array()] if self.steps else [])])
        y_all = simulate(sys, self.x0, Sequence(u_all))["y"].values
        return y_all[self.n :]

    def rows(self) -> List[Dict[str, Any]]:
        rows = []
        for t in range(self.steps):
            record = self.solves[self.solve_index[t]]
            rows.append(
                {
                    "t": t,
                    "u": self.u[t],
                    "y": self.y[t],
                    "y_tilde": self.y_tilde[t],
                    **{k: v for k, v in record.to_dict().items() if k != "t"},
                    "status": self.row_status[t],
                }
            )
        return rows


class RunMetrics:
    def __init__(
        self,
        max_terminal_error: float,
        settle_time: Optional[int],
        cost_decrease_violations: int,
        mean_alpha_norm: float,
        status: str,
        growth_rate: float = 0.0,
    ):
        self.max_terminal_error = max_terminal_error
        self.settle_time = settle_time
        self.cost_decrease_violations = cost_decrease_violations
        self.mean_alpha_norm = mean_alpha_norm
        self.status = status
        self.growth_rate = growth_rate

    @property
    def diverged(self) -> bool:
        return self.status == DIVERGED

    def converged(self, threshold: Optional[float] = None) -> bool:
        threshold = settings.closed_loop.settle_threshold if threshold is None else threshold
        return self.status == COMPLETED and self.max_terminal_error <= threshold

    def to_dict(self) -> Dict[str, Any]:
        return {
            "status": self.status,
            "max_terminal_error": self.max_terminal_error,
            "settle_time": self.settle_time,
            "cost_decrease_violations": self.cost_decrease_violations,
            "mean_alpha_norm": self.mean_alpha_norm,
            "growth_rate": self.growth_rate,
        }


def tail_growth(errors: np.ndarray, blocks: Optional[int] = None) -> Tuple[float, float]:
    """Log growth per step between the RMS of the first and last of equal blocks.

    Returns (rate, rms of the last block); the rate is 0 when the window is too short.
    """
    blocks = settings.closed_loop.growth_blocks if blocks is None else blocks
    errors = np.asarray(errors, dtype=float)
    size = errors.size // blocks if blocks >= 2 else 0
    if size < 1:
        return 0.0, float(np.sqrt(np.mean(errors**2))) if errors.size else 0.0
    first = float(np.sqrt(np.mean(errors[:size] ** 2)))
    last = float(np.sqrt(np.mean(errors[-size:] ** 2)))
    if first == 0.0:
        return (float("inf") if last > 0.0 else 0.0), last
    return float(np.log(last / first) / (errors.size - size)), last


def _stack_last(values: List[np.ndarray], n: int) -> np.ndarray:
    return np.concatenate(values[-n:])


def run(sys: LtiSystem, rc: RunConfig) -> ClosedLoopLog:
    """Receding-horizon loop: solve, apply the first s inputs, shift by s, repeat."""
    mpc = rc.effective_mpc()
    n, m = mpc.n, mpc.m
    if sys.m != m or sys.p != mpc.p:
        raise ValueError(f"Plant has m={sys.m}, p={sys.p}; config expects m={m}, p={mpc.p}")

    x0 = np.zeros(sys.n) if rc.x0 is None else np.asarray(rc.x0, dtype=float).reshape(-1)
    warmup = mpc.u_s if rc.warmup_input is None else np.asarray(rc.warmup_input, dtype=float)
    noise = NoiseSource(rc.noise)
    log = ClosedLoopLog(rc.scheme, rc.step_size, rc.T, n, x0)

    x = x0.copy()
    for _ in range(n):
        y = sys.C @ x + sys.D @ warmup
        log.warmup_u.append(warmup.copy())
        log.warmup_y.append(y)
        log.warmup_y_tilde.append(y + noise.draw(sys.p))
        x = sys.A @ x + sys.B @ warmup

    logger.info(f"Starting {rc.scheme} run: T={rc.T}, s={rc.step_size}, eps_bar={rc.noise.eps_bar}")
    past_u = list(log.warmup_u)
    past_y = list(log.warmup_y_tilde)
    t = 0
    while t < rc.T:
        u_init = _stack_last(past_u, n)
        y_init = _stack_last(past_y, n)
        if rc.scheme == "nominal":
            solution = solve_nominal(rc.data, mpc, u_init, y_init, rc.qps)
        else:
            solution = solve_robust(rc.data, mpc, u_init, y_init, rc.qps)

        applied = min(rc.step_size, rc.T - t)
        record = SolveRecord(t, solution, applied, x.copy(), rc.keep_solutions)
        log.solves.append(record)
        if solution.status == INFEASIBLE:
            log.status = INFEASIBLE
            logger.warning(f"MPC problem infeasible at t={t}; stopping run")
            break
        record.applied_stage_cost = float(np.sum(solution.stage_costs(mpc)[:applied]))

        for j in range(applied):
            u = solution.u_pred[j].copy()
            y = sys.C @ x + sys.D @ u
            y_tilde = y + noise.draw(sys.p)
            x = sys.A @ x + sys.B @ u
            log.u.append(u)
            log.y.append(y)
            log.y_tilde.append(y_tilde)
            log.solve_index.append(len(log.solves) - 1)
            past_u.append(u)
            past_y.append(y_tilde)
            if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > rc.divergence_guard:
                log.row_status.append(DIVERGED)
                log.status = DIVERGED
                break
            log.row_status.append(solution.status)
        if log.status == DIVERGED:
            logger.warning(f"Output exceeded the divergence guard at t={len(log.u) - 1}")
            break
        t += applied

    logger.info(f"Run finished with status {log.status} after {log.steps} steps")
    return log


def metrics(log: ClosedLoopLog, eq: Equilibrium, threshold: Optional[float] = None) -> RunMetrics:
    """Summary figures of a run against the target equilibrium."""
    threshold = settings.closed_loop.settle_threshold if threshold is None else threshold
    tol = settings.closed_loop.cost_decrease_tol

    errors = log.tracking_errors(eq.y_s, ord=np.inf)
    tail_start = (2 * log.T) // 3
    status = log.status
    growth_rate = 0.0
    if status != COMPLETED or log.steps <= tail_start:
        max_terminal_error = float("inf")
    else:
        max_terminal_error = float(np.max(errors[tail_start:]))
        growth_rate, last_rms = tail_growth(errors[tail_start:])
        # A loop that stays below the guard but keeps growing past the threshold is unstable
        if growth_rate > settings.closed_loop.growth_rate_tol and last_rms > threshold:
            logger.warning(
                f"Tracking error grows by {growth_rate:.3g} per step (last block RMS {last_rms:.3g}); "
                f"classifying the run as diverged"
            )
            status = DIVERGED
            max_terminal_error = float("inf")

    settle_time: Optional[int] = None
    if errors.size and status == COMPLETED:
        outside = np.nonzero(errors > threshold)[0]
        settle_time = 0 if outside.size == 0 else int(outside[-1]) + 1
        if settle_time >= errors.size:
            settle_time = None

    violations = 0
    for current, following in zip(log.solves, log.solves[1:]):
        if current.status == INFEASIBLE or following.status == INFEASIBLE:
            continue
        if following.cost > current.cost - current.applied_stage_cost + tol:
            violations += 1

    alpha_norms = [record.alpha_l2 for record in log.solves]
    return RunMetrics(
        max_terminal_error=max_terminal_error,
        settle_time=settle_time,
        cost_decrease_violations=violations,
        mean_alpha_norm=float(np.mean(alpha_norms)) if alpha_norms else 0.0,
        status=status,
        growth_rate=growth_rate,
    )
