import logging
import numpy as np
from scipy import linalg
from typing import Iterator, Optional, Union

from ..settings import settings

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, list, tuple]


class DimensionError(ValueError):
    """Raised when sequence, window or matrix dimensions do not fit together."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


class Sequence:
    """Finite sequence of real vectors x_0, ..., x_{N-1}, stored as an (N, d) array."""

    def __init__(self, values: ArrayLike):
        array = np.array(values, dtype=float)
        if array.ndim == 1:
            array = array.reshape(-1, 1)
        if array.ndim != 2:
            raise DimensionError(f"Sequence values must be 1-D or 2-D, got {array.ndim}-D")
        if array.shape[0] < 1 or array.shape[1] < 1:
            raise DimensionError(f"Sequence needs N >= 1 and d >= 1, got shape {array.shape}")
        self._values = _frozen(array)

    @classmethod
    def from_stacked(cls, stacked: ArrayLike, d: int) -> "Sequence":
        """Rebuild a sequence from a stacked vector [x_0; x_1; ...]."""
        flat = np.asarray(stacked, dtype=float).reshape(-1)
        if d < 1 or flat.size % d != 0:
            raise DimensionError(f"Stacked vector of size {flat.size} is not a multiple of d={d}")
        return cls(flat.reshape(-1, d))

    @classmethod
    def constant(cls, value: ArrayLike, N: int) -> "Sequence":
        return cls(np.tile(np.asarray(value, dtype=float).reshape(1, -1), (N, 1)))

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def N(self) -> int:
        return self._values.shape[0]

    @property
    def d(self) -> int:
        return self._values.shape[1]

    def stacked(self) -> np.ndarray:
        """Stacked vector [x_0; ...; x_{N-1}] of dimension d*N."""
        return self._values.reshape(-1).copy()

    def slice(self, a: int, b: int) -> "Sequence":
        """Subsequence x_a, ..., x_b (inclusive)."""
        if not 0 <= a <= b < self.N:
            raise DimensionError(f"Slice [{a}, {b}] outside sequence of length {self.N}")
        return Sequence(self._values[a : b + 1])

    def concat(self, other: "Sequence") -> "Sequence":
        if other.d != self.d:
            raise DimensionError(f"Cannot concatenate d={self.d} with d={other.d}")
        return Sequence(np.vstack([self._values, other.values]))

    def __len__(self) -> int:
        return self.N

    def __getitem__(self, k: int) -> np.ndarray:
        return self._values[k]

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self._values)

    def __repr__(self) -> str:
        return f"Sequence(N={self.N}, d={self.d})"


class Trajectory:
    """Input-output pair (u, y) of equal length."""

    def __init__(self, u: Sequence, y: Sequence):
        if u.N != y.N:
            raise DimensionError(f"Input length {u.N} differs from output length {y.N}")
        self.u = u
        self.y = y

    @classmethod
    def from_arrays(cls, u: ArrayLike, y: ArrayLike) -> "Trajectory":
        return cls(Sequence(u), Sequence(y))

    @property
    def N(self) -> int:
        return self.u.N

    @property
    def m(self) -> int:
        return self.u.d

    @property
    def p(self) -> int:
        return self.y.d

    def window(self, a: int, b: int) -> "Trajectory":
        return Trajectory(self.u.slice(a, b), self.y.slice(a, b))

    def __repr__(self) -> str:
        return f"Trajectory(N={self.N}, m={self.m}, p={self.p})"


class HankelMatrix:
    """Materialized Hankel matrix H_L(x) with L block rows of dimension d."""

    def __init__(self, entries: np.ndarray, L: int, d: int):
        entries = np.array(entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != L * d:
            raise DimensionError(f"Hankel entries of shape {entries.shape} do not match L={L}, d={d}")
        self.entries = _frozen(entries)
        self.L = L
        self.d = d

    @property
    def shape(self):
        return self.entries.shape

    @property
    def n_cols(self) -> int:
        return self.entries.shape[1]

    def block_row(self, i: int) -> np.ndarray:
        """Rows belonging to time offset i, shape (d, n_cols)."""
        if not 0 <= i < self.L:
            raise DimensionError(f"Block row {i} outside [0, {self.L - 1}]")
        return self.entries[i * self.d : (i + 1) * self.d]

    def block_rows(self, a: int, b: int) -> np.ndarray:
        """Rows for time offsets a..b (inclusive)."""
        if not 0 <= a <= b < self.L:
            raise DimensionError(f"Block rows [{a}, {b}] outside [0, {self.L - 1}]")
        return self.entries[a * self.d : (b + 1) * self.d]

    def column(self, j: int) -> np.ndarray:
        return self.entries[:, j]

    def __repr__(self) -> str:
        return f"HankelMatrix(L={self.L}, d={self.d}, cols={self.n_cols})"


class PeReport:
    """Outcome of a persistence-of-excitation check."""

    def __init__(self, order: int, is_pe: bool, rank: int, sigma_min: float):
        self.order = order
        self.is_pe = is_pe
        self.rank = rank
        self.sigma_min = sigma_min

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "is_pe": self.is_pe,
            "rank": self.rank,
            "sigma_min": self.sigma_min,
        }

    def __repr__(self) -> str:
        return (
            f"PeReport(order={self.order}, is_pe={self.is_pe}, "
            f"rank={self.rank}, sigma_min={self.sigma_min:.6g})"
        )


def hankel(x: Sequence, L: int) -> HankelMatrix:
    """Hankel matrix whose column j stacks x_j, ..., x_{j+L-1}."""
    if L < 1:
        raise DimensionError(f"Hankel depth must be positive, got L={L}")
    if L > x.N:
        raise DimensionError(f"Hankel depth L={L} exceeds sequence length N={x.N}")
    n_cols = x.N - L + 1
    index = np.arange(L)[:, None] + np.arange(n_cols)[None, :]
    # (L, n_cols, d) -> (L, d, n_cols) so that row i*d + r holds component r at offset i
    blocks = x.values[index].transpose(0, 2, 1)
    return HankelMatrix(blocks.reshape(L * x.d, n_cols), L, x.d)


def window(x: Sequence, a: int, b: int) -> np.ndarray:
    """Stacked window x_{[a,b]} of dimension d*(b-a+1)."""
    if not 0 <= a <= b < x.N:
        raise DimensionError(f"Window [{a}, {b}] outside sequence of length {x.N}")
    return x.values[a : b + 1].reshape(-1).copy()


def numerical_rank(matrix: np.ndarray, tol: Optional[float] = None) -> int:
    """Rank from singular values, counting those above tol * sigma_max."""
    tol = settings.numerics.rank_tol if tol is None else tol
    if matrix.size == 0:
        return 0
    singular_values = linalg.svdvals(matrix)
    if singular_values[0] == 0.0:
        return 0
    return int(np.sum(singular_values > tol * singular_values[0]))


def persistence_of_excitation(u: Sequence, L: int, tol: Optional[float] = None) -> PeReport:
    """Check whether H_L(u) has full row rank m*L."""
    tol = settings.numerics.rank_tol if tol is None else tol
    if tol <= 0:
        raise ValueError(f"Rank tolerance must be positive, got {tol}")

    H = hankel(u, L).entries
    rows, cols = H.shape
    singular_values = linalg.svdvals(H)
    if singular_values[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(singular_values > tol * singular_values[0]))

    # A wide-enough matrix is needed for a nonzero smallest row-space singular value
    sigma_min = float(singular_values[-1]) if rows <= cols else 0.0
    report = PeReport(order=L, is_pe=rank == rows, rank=rank, sigma_min=sigma_min)
    logger.debug(f"PE check: {report}")
    return report


def minimum_data_length(m: int, L: int) -> int:
    """Shortest sequence length for which an m-input signal can be PE of order L."""
    return (m + 1) * L - 1
