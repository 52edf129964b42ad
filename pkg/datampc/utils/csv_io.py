import logging
import numpy as np
import pandas as pd
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

from ..control.closedloop import ClosedLoopLog
from ..models.lti import LtiSystem
from ..models.trajlib import Trajectory
from ..settings import settings

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LOG_SOLVE_COLUMNS = ["cost", "alpha_l2", "alpha_l1", "sigma_l2", "sigma_linf", "constraint12e", "status"]
DIAGNOSTICS_COLUMNS = ["t", "k", "bound_l2", "bound_linf", "actual_l2", "actual_linf"]


def format_value(value: Any) -> str:
    """Render a cell: floats with the configured precision, booleans as 0/1."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if np.isnan(value):
            return "nan"
        if np.isinf(value):
            return "inf" if value > 0 else "-inf"
        return settings.output.float_format % value
    if value is None:
        return ""
    return str(value)


def _write_frame(path: PathLike, cells: List[List[Any]], columns: List[str]):
    """Every cell goes through format_value before pandas sees it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([[format_value(cell) for cell in row] for row in cells], columns=columns, dtype=str)
    frame.to_csv(path, index=False, lineterminator="\n")


def _read_frame(path: PathLike, **kwargs) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    try:
        return pd.read_csv(path, **kwargs)
    except pd.errors.EmptyDataError:
        raise ValueError(f"File is empty: {path}")


def write_trajectory_csv(path: PathLike, traj: Trajectory):
    """Header ``t,u_1..u_m,y_1..y_p``, one row per time step."""
    header = ["t"] + [f"u_{i + 1}" for i in range(traj.m)] + [f"y_{i + 1}" for i in range(traj.p)]
    cells = [[t, *traj.u[t], *traj.y[t]] for t in range(traj.N)]
    _write_frame(path, cells, header)
    logger.info(f"Wrote trajectory with N={traj.N} to {path}")


def read_trajectory_csv(path: PathLike) -> Trajectory:
    frame = _read_frame(path, float_precision="round_trip")
    header = [str(name).strip() for name in frame.columns]
    u_cols = [name for name in header if name.startswith("u_")]
    y_cols = [name for name in header if name.startswith("y_")]
    if header[0] != "t" or not u_cols or not y_cols:
        raise ValueError(f"Trajectory header must be t,u_1..,y_1..; got {header}")
    if frame.empty:
        raise ValueError(f"Trajectory file has no data rows: {path}")

    frame.columns = header
    return Trajectory.from_arrays(frame[u_cols].to_numpy(dtype=float), frame[y_cols].to_numpy(dtype=float))


def read_system_file(path: PathLike) -> LtiSystem:
    """Plain-text matrices in ``[A]``, ``[B]``, ``[C]``, ``[D]`` sections."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"System file not found: {path}")

    sections: Dict[str, List[List[float]]] = {}
    current: Optional[str] = None
    with open(path, "r") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip().upper()
                if current not in ("A", "B", "C", "D"):
                    raise ValueError(f"{path}:{line_no}: unknown section [{current}]")
                sections[current] = []
                continue
            if current is None:
                raise ValueError(f"{path}:{line_no}: matrix row outside of a section")
            try:
                sections[current].append([float(token) for token in line.split()])
            except ValueError:
                raise ValueError(f"{path}:{line_no}: cannot parse matrix row '{line}'")

    missing = [name for name in ("A", "B", "C") if name not in sections]
    if missing:
        raise ValueError(f"{path}: missing sections {missing}")
    D = sections.get("D")
    return LtiSystem(sections["A"], sections["B"], sections["C"], D if D else None)


def write_system_file(path: PathLike, sys: LtiSystem):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for name, matrix in (("A", sys.A), ("B", sys.B), ("C", sys.C), ("D", sys.D)):
            f.write(f"[{name}]\n")
            for row in matrix:
                f.write(" ".join(format_value(float(v)) for v in row) + "\n")


def write_log_csv(path: PathLike, log: ClosedLoopLog):
    """One row per plant step; solve-level fields repeat over the steps of a block."""
    if log.steps:
        m, p = len(log.u[0]), len(log.y[0])
    else:
        m, p = len(log.warmup_u[0]), len(log.warmup_y[0])
    header = (
        ["t"]
        + [f"u_{i + 1}" for i in range(m)]
        + [f"y_{i + 1}" for i in range(p)]
        + [f"ytilde_{i + 1}" for i in range(p)]
        + LOG_SOLVE_COLUMNS
    )
    cells = [
        [row["t"], *row["u"], *row["y"], *row["y_tilde"], *(row[column] for column in LOG_SOLVE_COLUMNS)]
        for row in log.rows()
    ]
    _write_frame(path, cells, header)
    logger.info(f"Wrote closed-loop log ({log.steps} steps, status {log.status}) to {path}")


def write_table_csv(path: PathLike, rows: Iterable[Dict[str, Any]], columns: List[str]):
    _write_frame(path, [[row.get(column) for column in columns] for row in rows], columns)


def write_diagnostics_csv(path: PathLike, rows: Iterable[Dict[str, Any]]):
    write_table_csv(path, rows, DIAGNOSTICS_COLUMNS)


def read_table_csv(path: PathLike) -> List[Dict[str, str]]:
    """Rows as string dicts in file column order."""
    frame = _read_frame(path, dtype=str, keep_default_na=False)
    return frame.to_dict("records")
