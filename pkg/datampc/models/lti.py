import logging
import numpy as np
from scipy import linalg
from pydantic import BaseModel, Field
from typing import Dict, Literal, Optional, Tuple

from .trajlib import DimensionError, Sequence, Trajectory, numerical_rank
from ..settings import settings

logger = logging.getLogger(__name__)


class NotMinimalError(ValueError):
    """Raised when a realization is not both controllable and observable."""


class SingularSteadyStateError(ValueError):
    """Raised when I - A is singular and the equilibrium is not unique."""


def _as_matrix(value, name: str) -> np.ndarray:
    matrix = np.array(value, dtype=float)
    if matrix.ndim == 0:
        matrix = matrix.reshape(1, 1)
    elif matrix.ndim == 1:
        matrix = matrix.reshape(-1, 1) if name == "B" else matrix.reshape(1, -1)
    if matrix.ndim != 2:
        raise DimensionError(f"Matrix {name} must be 2-D, got shape {matrix.shape}")
    matrix.setflags(write=False)
    return matrix


def controllability_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def observability_matrix(A: np.ndarray, C: np.ndarray) -> np.ndarray:
    blocks = [C]
    for _ in range(A.shape[0] - 1):
        blocks.append(blocks[-1] @ A)
    return np.vstack(blocks)


class LtiSystem:
    """Minimal discrete-time realization x+ = Ax + Bu, y = Cx + Du."""

    def __init__(self, A, B, C, D=None, check_minimal: bool = True):
        self.A = _as_matrix(A, "A")
        self.B = _as_matrix(B, "B")
        self.C = _as_matrix(C, "C")
        if D is None:
            D = np.zeros((self.C.shape[0], self.B.shape[1]))
        self.D = _as_matrix(D, "D")
        self._validate_dimensions()
        if check_minimal:
            self._validate_minimality()

    def _validate_dimensions(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise DimensionError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise DimensionError(f"B has {self.B.shape[0]} rows, expected {n}")
        if self.C.shape[1] != n:
            raise DimensionError(f"C has {self.C.shape[1]} columns, expected {n}")
        if self.D.shape != (self.C.shape[0], self.B.shape[1]):
            raise DimensionError(
                f"D must be {self.C.shape[0]}x{self.B.shape[1]}, got {self.D.shape}"
            )

    def _validate_minimality(self):
        ctrb_rank = numerical_rank(controllability_matrix(self.A, self.B))
        obsv_rank = numerical_rank(observability_matrix(self.A, self.C))
        if ctrb_rank < self.n or obsv_rank < self.n:
            raise NotMinimalError(
                f"Realization is not minimal: controllability rank {ctrb_rank}, "
                f"observability rank {obsv_rank}, order {self.n}"
            )

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(linalg.eigvals(self.A))))

    def __repr__(self) -> str:
        return f"LtiSystem(n={self.n}, m={self.m}, p={self.p})"


class Equilibrium:
    """Steady state (u_s, y_s, x_s)."""

    def __init__(self, u_s, y_s, x_s):
        self.u_s = np.asarray(u_s, dtype=float).reshape(-1)
        self.y_s = np.asarray(y_s, dtype=float).reshape(-1)
        self.x_s = np.asarray(x_s, dtype=float).reshape(-1)

    def __repr__(self) -> str:
        return f"Equilibrium(u_s={self.u_s}, y_s={self.y_s})"


class NoiseSpec(BaseModel):
    """Bounded measurement noise, uniform on [-eps_bar, eps_bar]^p."""

    eps_bar: float = Field(default=0.0, ge=0.0)
    distribution: Literal["uniform"] = "uniform"
    seed: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def sample(self, rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
        if self.eps_bar == 0.0:
            return np.zeros(shape)
        return rng.uniform(-self.eps_bar, self.eps_bar, size=shape)


class NoiseSource:
    """Stateful noise stream owned by a single closed-loop run."""

    def __init__(self, spec: NoiseSpec):
        self.spec = spec
        self._rng = spec.generator()

    def draw(self, p: int) -> np.ndarray:
        return self.spec.sample(self._rng, (p,))


def simulate(sys: LtiSystem, x0, u: Sequence) -> Dict[str, Sequence]:
    """Run the state recursion from x0; returns y (length N) and x (length N+1)."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != sys.n:
        raise DimensionError(f"Initial state has dimension {x0.size}, expected {sys.n}")
    if u.d != sys.m:
        raise DimensionError(f"Input has dimension {u.d}, expected {sys.m}")

    states = np.empty((u.N + 1, sys.n))
    outputs = np.empty((u.N, sys.p))
    states[0] = x0
    for k in range(u.N):
        outputs[k] = sys.C @ states[k] + sys.D @ u[k]
        states[k + 1] = sys.A @ states[k] + sys.B @ u[k]
    return {"y": Sequence(outputs), "x": Sequence(states)}


def four_tank() -> LtiSystem:
    """Linearized four-tank process, sampled, with two pumps and two level sensors."""
    A = [
        [0.921, 0.0, 0.041, 0.0],
        [0.0, 0.918, 0.0, 0.033],
        [0.0, 0.0, 0.924, 0.0],
        [0.0, 0.0, 0.0, 0.937],
    ]
    B = [
        [0.017, 0.001],
        [0.001, 0.023],
        [0.0, 0.061],
        [0.072, 0.0],
    ]
    C = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
    ]
    return LtiSystem(A, B, C, np.zeros((2, 2)))


def steady_state(sys: LtiSystem, u_s) -> Equilibrium:
    u_s = np.asarray(u_s, dtype=float).reshape(-1)
    if u_s.size != sys.m:
        raise DimensionError(f"Setpoint input has dimension {u_s.size}, expected {sys.m}")
    I_minus_A = np.eye(sys.n) - sys.A
    if numerical_rank(I_minus_A) < sys.n:
        raise SingularSteadyStateError("I - A is singular; the plant has an integrator")
    x_s = linalg.solve(I_minus_A, sys.B @ u_s)
    y_s = sys.C @ x_s + sys.D @ u_s
    return Equilibrium(u_s, y_s, x_s)


def observability_pseudoinverse(sys: LtiSystem) -> Dict[str, np.ndarray]:
    """Observability matrix Phi and its left inverse (Phi^T Phi)^{-1} Phi^T."""
    Phi = observability_matrix(sys.A, sys.C)
    if numerical_rank(Phi) < sys.n:
        raise NotMinimalError("Observability matrix is rank deficient")
    Phi_dagger = linalg.solve(Phi.T @ Phi, Phi.T, assume_a="pos")
    return {"Phi": Phi, "Phi_dagger": Phi_dagger}


def input_output_toeplitz(sys: LtiSystem, steps: int) -> np.ndarray:
    """Block lower-triangular map from u_{[0,steps-1]} to the forced output response."""
    T = np.zeros((steps * sys.p, steps * sys.m))
    markov = [sys.D]
    power = np.eye(sys.n)
    for _ in range(1, steps):
        markov.append(sys.C @ power @ sys.B)
        power = power @ sys.A
    for i in range(steps):
        for j in range(i + 1):
            T[i * sys.p : (i + 1) * sys.p, j * sys.m : (j + 1) * sys.m] = markov[i - j]
    return T


def initial_state_from_window(sys: LtiSystem, u_window, y_window) -> np.ndarray:
    """State at the start of an n-step window recovered from its inputs and outputs."""
    u_window = np.asarray(u_window, dtype=float).reshape(-1)
    y_window = np.asarray(y_window, dtype=float).reshape(-1)
    if u_window.size != sys.n * sys.m or y_window.size != sys.n * sys.p:
        raise DimensionError(
            f"Window needs {sys.n} steps: got {u_window.size} inputs, {y_window.size} outputs"
        )
    Phi_dagger = observability_pseudoinverse(sys)["Phi_dagger"]
    forced = input_output_toeplitz(sys, sys.n) @ u_window
    return Phi_dagger @ (y_window - forced)


def add_noise(y: Sequence, spec: NoiseSpec) -> Sequence:
    """Measured output y + eps with eps i.i.d. uniform on [-eps_bar, eps_bar]^p."""
    if spec.eps_bar == 0.0:
        return Sequence(y.values)
    rng = spec.generator()
    return Sequence(y.values + spec.sample(rng, y.values.shape))


def collect_data(
    sys: LtiSystem,
    x0,
    N: int,
    input_amplitude: float,
    spec: NoiseSpec,
    input_seed: Optional[int] = None,
) -> Dict[str, Trajectory]:
    """Open-loop experiment with i.i.d. uniform input and noisy output measurements.

    The input stream and the noise stream are drawn from independent children of
    the same seed, so scaling the amplitude leaves the underlying draws unchanged.
    """
    if N < 1:
        raise ValueError(f"Data length must be positive, got N={N}")
    if input_amplitude < 0:
        raise ValueError(f"Input amplitude must be nonnegative, got {input_amplitude}")

    seed = spec.seed if input_seed is None else input_seed
    input_stream, noise_stream = np.random.SeedSequence(seed).spawn(2)
    base = np.random.default_rng(input_stream).uniform(-1.0, 1.0, size=(N, sys.m))
    u = Sequence(input_amplitude * base)

    x0 = np.zeros(sys.n) if x0 is None else x0
    y = simulate(sys, x0, u)["y"]
    noisy_spec = spec.model_copy(update={"seed": int(noise_stream.generate_state(1)[0])})
    y_tilde = add_noise(y, noisy_spec)

    logger.info(
        f"Collected N={N} samples (m={sys.m}, p={sys.p}), amplitude={input_amplitude}, "
        f"eps_bar={spec.eps_bar}"
    )
    return {"clean": Trajectory(u, y), "noisy": Trajectory(u, y_tilde)}
