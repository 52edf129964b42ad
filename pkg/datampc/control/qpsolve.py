"""Dense convex QP solver.

Solves

    minimize    1/2 z'Pz + q'z
    subject to  Aeq z = beq
                lo <= Cineq z <= hi

Equality-only problems go through a direct KKT solve. Problems with
inequalities use an operator-splitting (ADMM) iteration on the stacked
constraint matrix with Ruiz equilibration, a per-row penalty vector,
adaptive penalty updates and a final active-set polish.

Multipliers follow the convention P z + q + Aeq' y_eq + Cineq' y_ineq = 0,
so an active upper bound carries a positive multiplier.
"""

import logging
import warnings
import numpy as np
from scipy import linalg
from pydantic import BaseModel, Field
from typing import Dict, Optional, Tuple

from ..settings import settings

logger = logging.getLogger(__name__)

SOLVED = "solved"
MAX_ITERATIONS = "max_iterations"
INFEASIBLE = "infeasible"

RHO_MIN = 1e-6
RHO_MAX = 1e6
RHO_EQ_OVER_RHO_INEQ = 1e3
RHO_TOL = 1e-12
MIN_SCALING = 1e-4
MAX_SCALING = 1e4


class QpProblem:
    """Dense QP data. P is symmetrized on construction."""

    def __init__(self, P, q, Aeq=None, beq=None, Cineq=None, lo=None, hi=None):
        P = np.atleast_2d(np.array(P, dtype=float))
        q = np.array(q, dtype=float).reshape(-1)
        nz = q.size
        if P.shape != (nz, nz):
            raise ValueError(f"P has shape {P.shape}, expected ({nz}, {nz})")

        Aeq = np.zeros((0, nz)) if Aeq is None else np.array(Aeq, dtype=float).reshape(-1, nz)
        beq = np.zeros(0) if beq is None else np.array(beq, dtype=float).reshape(-1)
        Cineq = np.zeros((0, nz)) if Cineq is None else np.array(Cineq, dtype=float).reshape(-1, nz)
        mi = Cineq.shape[0]
        lo = np.full(mi, -np.inf) if lo is None else np.array(lo, dtype=float).reshape(-1)
        hi = np.full(mi, np.inf) if hi is None else np.array(hi, dtype=float).reshape(-1)

        if beq.size != Aeq.shape[0]:
            raise ValueError(f"beq has {beq.size} entries for {Aeq.shape[0]} equality rows")
        if lo.size != mi or hi.size != mi:
            raise ValueError(f"Bounds have {lo.size}/{hi.size} entries for {mi} inequality rows")
        if np.any(lo > hi):
            raise ValueError("Inequality bounds violate lo <= hi")

        self.P = 0.5 * (P + P.T)
        self.q = q
        self.Aeq = Aeq
        self.beq = beq
        self.Cineq = Cineq
        self.lo = lo
        self.hi = hi

    @property
    def nz(self) -> int:
        return self.q.size

    @property
    def me(self) -> int:
        return self.Aeq.shape[0]

    @property
    def mi(self) -> int:
        return self.Cineq.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.P @ z + self.q @ z)


class QpSettings(BaseModel):
    abs_tol: float = Field(default=1e-8, gt=0)
    rel_tol: float = Field(default=1e-8, gt=0)
    max_iter: int = Field(default=50000, gt=0)
    infeasibility_tol: float = Field(default=1e-10, gt=0)
    rho: float = Field(default=0.1, gt=0)
    sigma: float = Field(default=1e-6, gt=0)
    alpha: float = Field(default=1.6, gt=0, lt=2)
    scaling_iter: int = Field(default=10, ge=0)
    adaptive_rho_interval: int = Field(default=25, gt=0)
    check_interval: int = Field(default=10, gt=0)
    polish: bool = True

    @classmethod
    def from_settings(cls) -> "QpSettings":
        return cls(**settings.qp.model_dump())


class QpSolution:
    def __init__(
        self,
        z: np.ndarray,
        dual_eq: np.ndarray,
        dual_ineq: np.ndarray,
        objective: float,
        status: str,
        iterations: int = 0,
        polished: bool = False,
    ):
        self.z = z
        self.dual_eq = dual_eq
        self.dual_ineq = dual_ineq
        self.objective = objective
        self.status = status
        self.iterations = iterations
        self.polished = polished

    def __repr__(self) -> str:
        return (
            f"QpSolution(status={self.status}, objective={self.objective:.6g}, "
            f"iterations={self.iterations})"
        )


def _inf_norm(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def _solve_equality_qp(
    P: np.ndarray, q: np.ndarray, Aeq: np.ndarray, beq: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, bool]:
    """KKT solve of an equality-constrained QP after SVD row reduction.

    Returns (z, y, consistent); consistent is False when beq is not in range(Aeq).
    """
    nz, me = q.size, Aeq.shape[0]
    rank_tol = settings.numerics.rank_tol
    consistent = True

    if me:
        U, s, Vt = linalg.svd(Aeq, full_matrices=False)
        r = int(np.sum(s > rank_tol * s[0])) if s[0] > 0 else 0
        U_r, s_r, basis = U[:, :r], s[:r], Vt[:r]
        coords = U_r.T @ beq
        residual = beq - U_r @ coords
        consistent = _inf_norm(residual) <= settings.numerics.consistency_tol * max(
            1.0, _inf_norm(beq)
        )
        rhs = coords / s_r
    else:
        U_r, s_r, basis, rhs = np.zeros((0, 0)), np.zeros(0), np.zeros((0, nz)), np.zeros(0)

    k = basis.shape[0]
    kkt = np.block([[P, basis.T], [basis, np.zeros((k, k))]])
    b = np.concatenate([-q, rhs])
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", linalg.LinAlgWarning)
            sol = linalg.solve(kkt, b)
        if not np.all(np.isfinite(sol)):
            raise linalg.LinAlgError("non-finite KKT solution")
    except linalg.LinAlgError:
        sol = linalg.lstsq(kkt, b)[0]

    z = sol[:nz]
    y = U_r @ (sol[nz:] / s_r) if k else np.zeros(me)
    return z, y, consistent


def kkt_residuals(prob: QpProblem, sol: QpSolution) -> Dict[str, float]:
    """Infinity norms of the primal, dual and complementarity residual blocks."""
    z = sol.z
    y_eq = np.asarray(sol.dual_eq, dtype=float)
    y_in = np.asarray(sol.dual_ineq, dtype=float)

    primal_eq = _inf_norm(prob.Aeq @ z - prob.beq)

    cz = prob.Cineq @ z
    primal_ineq = _inf_norm(np.maximum(prob.lo - cz, 0.0) + np.maximum(cz - prob.hi, 0.0))

    stationarity = prob.P @ z + prob.q + prob.Aeq.T @ y_eq + prob.Cineq.T @ y_in
    dual = _inf_norm(stationarity)

    upper_mult = np.maximum(y_in, 0.0)
    lower_mult = np.maximum(-y_in, 0.0)
    # A multiplier on an infinite bound counts as a violation in full
    upper_gap = np.where(np.isfinite(prob.hi), prob.hi - cz, 1.0)
    lower_gap = np.where(np.isfinite(prob.lo), cz - prob.lo, 1.0)
    comp = np.abs(upper_mult * upper_gap) + np.abs(lower_mult * lower_gap)
    comp_slack = _inf_norm(comp)

    return {
        "primal_eq": primal_eq,
        "primal_ineq": primal_ineq,
        "dual": dual,
        "comp_slack": comp_slack,
    }


class AdmmQpSolver:
    """Operator-splitting QP solver on the stacked constraints l <= A z <= u."""

    def __init__(self, qps: QpSettings):
        self.qps = qps

    def solve(self, prob: QpProblem, z0: Optional[np.ndarray] = None) -> QpSolution:
        qps = self.qps
        P, q = prob.P, prob.q
        A = np.vstack([prob.Aeq, prob.Cineq])
        l = np.concatenate([prob.beq, prob.lo])
        u = np.concatenate([prob.beq, prob.hi])
        nz, m = q.size, A.shape[0]

        D, E, c, Ps, qs, As = self._scale(P, q, A)
        ls, us = E * l, E * u

        rho = qps.rho
        rho_vec = self._rho_vector(rho, ls, us)
        factor = self._factorize(Ps, As, rho_vec)

        x = np.zeros(nz) if z0 is None else np.asarray(z0, dtype=float) / D
        z = np.clip(As @ x, ls, us)
        y = np.zeros(m)
        polish_threshold = 1e-3
        eps = None

        for iteration in range(1, qps.max_iter + 1):
            y_prev = y
            rhs = qps.sigma * x - qs + As.T @ (rho_vec * z - y)
            x_tilde = linalg.cho_solve(factor, rhs)
            z_tilde = As @ x_tilde
            x = qps.alpha * x_tilde + (1.0 - qps.alpha) * x
            z_relaxed = qps.alpha * z_tilde + (1.0 - qps.alpha) * z
            z = np.clip(z_relaxed + y / rho_vec, ls, us)
            y = y + rho_vec * (z_relaxed - z)

            if iteration % qps.check_interval == 0 or iteration == qps.max_iter:
                x_u, z_u, y_u = D * x, z / E, E * y / c
                residuals, eps = self._residuals(P, q, A, x_u, z_u, y_u)
                converged = residuals[0] <= eps[0] and residuals[1] <= eps[1]
                # Equality rows are held to the absolute tolerance alone
                if converged and _inf_norm(prob.Aeq @ x_u - prob.beq) <= qps.abs_tol:
                    solution = self._finish(prob, x_u, y_u, SOLVED, iteration)
                    return self._maybe_polish(prob, A, l, u, solution, eps)

                if self._primal_infeasible(A, l, u, E * (y - y_prev) / c):
                    logger.debug(f"QP certified infeasible after {iteration} iterations")
                    return self._finish(prob, x_u, y_u, INFEASIBLE, iteration)

                relative = max(residuals[0] / eps[2], residuals[1] / eps[3])
                if qps.polish and relative < polish_threshold:
                    candidate = self._finish(prob, x_u, y_u, MAX_ITERATIONS, iteration)
                    polished = self._polish(prob, A, l, u, candidate, eps)
                    if polished is not None:
                        return polished
                    polish_threshold /= 10.0

            if iteration % qps.adaptive_rho_interval == 0:
                new_rho = self._adapted_rho(rho, Ps, qs, As, x, z, y)
                if new_rho > 5.0 * rho or new_rho < rho / 5.0:
                    rho = new_rho
                    rho_vec = self._rho_vector(rho, ls, us)
                    factor = self._factorize(Ps, As, rho_vec)

        x_u, y_u = D * x, E * y / c
        logger.warning(f"QP reached the iteration cap ({qps.max_iter})")
        solution = self._finish(prob, x_u, y_u, MAX_ITERATIONS, qps.max_iter)
        if eps is None:
            _, eps = self._residuals(P, q, A, x_u, z / E, y_u)
        return self._maybe_polish(prob, A, l, u, solution, eps)

    def _scale(self, P, q, A):
        """Ruiz equilibration of the KKT matrix followed by cost scaling."""
        nz, m = q.size, A.shape[0]
        D, E, c = np.ones(nz), np.ones(m), 1.0
        Ps, qs, As = P.copy(), q.copy(), A.copy()

        def limited(norms):
            norms = np.where(norms < MIN_SCALING, 1.0, norms)
            return np.minimum(norms, MAX_SCALING)

        for _ in range(self.qps.scaling_iter):
            col_norms = np.abs(Ps).max(axis=0)
            if m:
                col_norms = np.maximum(col_norms, np.abs(As).max(axis=0))
            d_step = 1.0 / np.sqrt(limited(col_norms))
            e_step = 1.0 / np.sqrt(limited(np.abs(As).max(axis=1))) if m else np.ones(0)

            Ps = d_step[:, None] * Ps * d_step[None, :]
            As = e_step[:, None] * As * d_step[None, :]
            qs = d_step * qs
            D, E = D * d_step, E * e_step

            cost_norm = max(float(np.mean(np.abs(Ps).max(axis=0))), _inf_norm(qs))
            c_step = 1.0 / float(limited(np.array([cost_norm]))[0])
            Ps, qs, c = Ps * c_step, qs * c_step, c * c_step

        return D, E, c, Ps, qs, As

    @staticmethod
    def _rho_vector(rho: float, l: np.ndarray, u: np.ndarray) -> np.ndarray:
        rho_vec = np.full(l.size, rho)
        rho_vec[np.isneginf(l) & np.isposinf(u)] = RHO_MIN
        rho_vec[(u - l) < RHO_TOL] = RHO_EQ_OVER_RHO_INEQ * rho
        return np.clip(rho_vec, RHO_MIN, RHO_MAX)

    def _factorize(self, Ps, As, rho_vec):
        K = Ps + self.qps.sigma * np.eye(Ps.shape[0]) + As.T @ (rho_vec[:, None] * As)
        return linalg.cho_factor(K)

    def _residuals(self, P, q, A, x, z, y):
        Ax = A @ x
        Px = P @ x
        Aty = A.T @ y
        prim = _inf_norm(Ax - z)
        dual = _inf_norm(Px + q + Aty)
        prim_scale = max(_inf_norm(Ax), _inf_norm(z))
        dual_scale = max(_inf_norm(Px), _inf_norm(Aty), _inf_norm(q))
        eps_prim = self.qps.abs_tol + self.qps.rel_tol * prim_scale
        eps_dual = self.qps.abs_tol + self.qps.rel_tol * dual_scale
        return (prim, dual), (eps_prim, eps_dual, 1.0 + prim_scale, 1.0 + dual_scale)

    def _adapted_rho(self, rho, Ps, qs, As, x, z, y) -> float:
        Ax = As @ x
        Px = Ps @ x
        Aty = As.T @ y
        prim = _inf_norm(Ax - z) / max(_inf_norm(Ax), _inf_norm(z), 1e-10)
        dual = _inf_norm(Px + qs + Aty) / max(_inf_norm(Px), _inf_norm(Aty), _inf_norm(qs), 1e-10)
        new_rho = rho * np.sqrt(prim / max(dual, 1e-10))
        return float(np.clip(new_rho, RHO_MIN, RHO_MAX))

    def _primal_infeasible(self, A, l, u, delta_y) -> bool:
        delta_y = delta_y.copy()
        delta_y[np.isposinf(u)] = np.minimum(delta_y[np.isposinf(u)], 0.0)
        delta_y[np.isneginf(l)] = np.maximum(delta_y[np.isneginf(l)], 0.0)
        norm = _inf_norm(delta_y)
        tol = self.qps.infeasibility_tol
        if norm <= tol:
            return False
        delta_y /= norm
        upper = np.where(np.isfinite(u), u, 0.0) @ np.maximum(delta_y, 0.0)
        lower = np.where(np.isfinite(l), l, 0.0) @ np.minimum(delta_y, 0.0)
        if upper + lower >= -tol:
            return False
        return _inf_norm(A.T @ delta_y) < tol

    @staticmethod
    def _finish(prob, x, y, status, iterations) -> QpSolution:
        return QpSolution(
            z=x,
            dual_eq=y[: prob.me],
            dual_ineq=y[prob.me :],
            objective=prob.objective(x),
            status=status,
            iterations=iterations,
        )

    def _maybe_polish(self, prob, A, l, u, solution, eps) -> QpSolution:
        if not self.qps.polish:
            return solution
        polished = self._polish(prob, A, l, u, solution, eps)
        return solution if polished is None else polished

    def _polish(self, prob, A, l, u, solution, eps) -> Optional[QpSolution]:
        """Re-solve on the guessed active set; None when the guess does not verify."""
        y = np.concatenate([solution.dual_eq, solution.dual_ineq])
        Az = A @ solution.z
        equality = (u - l) < RHO_TOL
        lower = ~equality & (Az - l < -y)
        upper = ~equality & (u - Az < y)
        active = equality | lower | upper
        targets = np.where(upper, u, l)[active]

        z, y_active, consistent = _solve_equality_qp(prob.P, prob.q, A[active], targets)
        if not consistent:
            return None
        y_full = np.zeros(A.shape[0])
        y_full[active] = y_active

        sign_violation = max(
            _inf_norm(np.maximum(y_full[lower], 0.0)),
            _inf_norm(np.maximum(-y_full[upper], 0.0)),
        )
        candidate = self._finish(prob, z, y_full, SOLVED, solution.iterations)
        residuals = kkt_residuals(prob, candidate)
        primal = max(residuals["primal_eq"], residuals["primal_ineq"])
        if primal > eps[0] or residuals["dual"] > eps[1] or sign_violation > eps[1]:
            return None
        if residuals["primal_eq"] > self.qps.abs_tol:
            return None
        candidate.polished = True
        return candidate


def solve_qp(
    prob: QpProblem, qps: Optional[QpSettings] = None, z0: Optional[np.ndarray] = None
) -> QpSolution:
    """Solve a convex QP; equality-only problems use a direct KKT solve."""
    qps = QpSettings.from_settings() if qps is None else qps

    if prob.mi == 0:
        z, y, consistent = _solve_equality_qp(prob.P, prob.q, prob.Aeq, prob.beq)
        if not consistent:
            logger.debug("Equality constraints are inconsistent")
            return QpSolution(z, y, np.zeros(0), prob.objective(z), INFEASIBLE)

        solution = QpSolution(z, y, np.zeros(0), prob.objective(z), SOLVED)
        residuals = kkt_residuals(prob, solution)
        eps_dual = qps.abs_tol + qps.rel_tol * max(
            _inf_norm(prob.P @ z), _inf_norm(prob.Aeq.T @ y), _inf_norm(prob.q)
        )
        if residuals["primal_eq"] <= qps.abs_tol and residuals["dual"] <= eps_dual:
            return solution
        if prob.me == 0:
            logger.warning("Unconstrained QP has no accurate stationary point")
            solution.status = MAX_ITERATIONS
            return solution
        logger.debug(
            f"Direct KKT solve inaccurate (primal {residuals['primal_eq']:.3g}, "
            f"dual {residuals['dual']:.3g}); switching to ADMM"
        )

    return AdmmQpSolver(qps).solve(prob, z0=z0)
