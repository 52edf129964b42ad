import configparser
import itertools
import logging
import numpy as np
import yaml
from pathlib import Path
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from typing import Any, Dict, List, Literal, Optional, Tuple

from ..control.closedloop import RunConfig, metrics, run
from ..control.ddmpc import DataMatrices, MpcConfig
from ..control.qpsolve import QpSettings
from ..models.lti import (
    Equilibrium,
    LtiSystem,
    NoiseSpec,
    SingularSteadyStateError,
    collect_data,
    four_tank,
    steady_state,
)
from ..models.trajlib import Trajectory
from ..settings import deep_merge, settings
from .csv_io import read_system_file

logger = logging.getLogger(__name__)

SWEEP_KEYS = ("lambda_alpha_eps", "lambda_sigma", "eps_bar", "L", "N", "n", "R_scale", "amplitude")


class ConfigError(ValueError):
    """Raised when an experiment description is malformed or violates an invariant."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemSection(_Section):
    name: str = "four_tank"
    file: Optional[str] = None


class DataSection(_Section):
    N: int = Field(default_factory=lambda: settings.four_tank.N, ge=1)
    amplitude: float = Field(default_factory=lambda: settings.four_tank.amplitude, ge=0)
    x0: Optional[List[float]] = None


class NoiseSection(_Section):
    eps_bar: float = Field(default_factory=lambda: settings.four_tank.eps_bar, ge=0)


class MpcSection(_Section):
    L: int = Field(default_factory=lambda: settings.four_tank.L, ge=1)
    n: int = Field(default_factory=lambda: settings.four_tank.n, ge=1)
    Q_scale: float = Field(default_factory=lambda: settings.four_tank.Q_scale, gt=0)
    R_scale: float = Field(default_factory=lambda: settings.four_tank.R_scale, gt=0)
    lambda_alpha: Optional[float] = Field(default=None, ge=0)
    lambda_alpha_eps: float = Field(default_factory=lambda: settings.four_tank.lambda_alpha_eps, ge=0)
    lambda_sigma: float = Field(default_factory=lambda: settings.four_tank.lambda_sigma, ge=0)
    u_s: Optional[List[float]] = None
    y_s: Optional[List[float]] = None
    u_lo: Optional[List[float]] = None
    u_hi: Optional[List[float]] = None
    y_lo: Optional[List[float]] = None
    y_hi: Optional[List[float]] = None
    sigma_constraint_mode: Literal["none", "convex_bound", "exact_nonconvex_check"] = "none"
    sigma_bound_c: Optional[float] = None


class RunSection(_Section):
    scheme: Literal["nominal", "robust", "robust_no_terminal"] = "robust"
    step_size: int = Field(default=1, ge=1)
    T: int = Field(default_factory=lambda: settings.four_tank.T, ge=1)
    x0: Optional[List[float]] = None
    warmup_input: Optional[List[float]] = None


class SweepSection(_Section):
    lambda_alpha_eps: List[float] = Field(default_factory=list)
    lambda_sigma: List[float] = Field(default_factory=list)
    eps_bar: List[float] = Field(default_factory=list)
    L: List[int] = Field(default_factory=list)
    N: List[int] = Field(default_factory=list)
    n: List[int] = Field(default_factory=list)
    R_scale: List[float] = Field(default_factory=list)
    amplitude: List[float] = Field(default_factory=list)
    seeds: List[int] = Field(default_factory=list)


class PathsSection(_Section):
    data: Optional[str] = None
    data_clean: Optional[str] = None
    output_dir: str = Field(default_factory=lambda: settings.output.results_dir)


class ExperimentConfig(_Section):
    seed: int = Field(default_factory=lambda: settings.seed)
    system: SystemSection = Field(default_factory=SystemSection)
    data: DataSection = Field(default_factory=DataSection)
    noise: NoiseSection = Field(default_factory=NoiseSection)
    mpc: MpcSection = Field(default_factory=MpcSection)
    run: RunSection = Field(default_factory=RunSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    paths: PathsSection = Field(default_factory=PathsSection)

    def with_overrides(self, overrides: Dict[str, Any]) -> "ExperimentConfig":
        """Apply flat ``section.key`` overrides (``seed`` at top level) and revalidate."""
        nested: Dict[str, Any] = {}
        for dotted, value in overrides.items():
            if value is None:
                continue
            if "." in dotted:
                section, key = dotted.split(".", 1)
                nested.setdefault(section, {})[key] = value
            else:
                nested[dotted] = value
        return parse_experiment(deep_merge(self.model_dump(), nested))

    def sweep_grid(self) -> List[Dict[str, Any]]:
        """Cartesian product of the nonempty sweep lists (and seeds)."""
        axes = [(key, getattr(self.sweep, key)) for key in SWEEP_KEYS if getattr(self.sweep, key)]
        seeds = self.sweep.seeds or [self.seed]
        grid = []
        for values in itertools.product(*[axis for _, axis in axes], seeds):
            point = dict(zip([key for key, _ in axes], values[:-1]))
            point["seed"] = values[-1]
            grid.append(point)
        return grid

    def apply_point(self, point: Dict[str, Any]) -> "ExperimentConfig":
        section_of = {
            "lambda_alpha_eps": "mpc",
            "lambda_sigma": "mpc",
            "L": "mpc",
            "n": "mpc",
            "R_scale": "mpc",
            "eps_bar": "noise",
            "N": "data",
            "amplitude": "data",
        }
        overrides = {
            (key if key == "seed" else f"{section_of[key]}.{key}"): value
            for key, value in point.items()
        }
        return self.with_overrides(overrides)


def parse_experiment(raw: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig(**raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment configuration:\n{e}") from e


def _parse_value(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def load_experiment_config(path: Optional[str]) -> ExperimentConfig:
    """Read ``[section]`` / ``key = value`` text, or YAML when the suffix says so."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Experiment config not found: {path}")

    if path.suffix.lower() in (".yaml", ".yml"):
        with open(path, "r") as f:
            try:
                raw = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"Cannot parse {path}: {e}") from e
    else:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as e:
            raise ConfigError(f"Cannot parse {path}: {e}") from e
        raw = {}
        for section in parser.sections():
            values = {key: _parse_value(value) for key, value in parser.items(section)}
            if section == "experiment":
                raw.update(values)
            else:
                raw[section] = values
    return parse_experiment(raw)


def build_system(cfg: ExperimentConfig) -> LtiSystem:
    if cfg.system.file:
        return read_system_file(cfg.system.file)
    if cfg.system.name == "four_tank":
        return four_tank()
    raise ConfigError(f"Unknown builtin system '{cfg.system.name}'")


def _derived_seeds(seed: int) -> Tuple[int, int]:
    data_seq, loop_seq = np.random.SeedSequence(seed).spawn(2)
    return int(data_seq.generate_state(1)[0]), int(loop_seq.generate_state(1)[0])


def lambda_alpha(cfg: ExperimentConfig) -> float:
    if cfg.mpc.lambda_alpha is not None:
        return cfg.mpc.lambda_alpha
    if cfg.noise.eps_bar == 0.0:
        return 0.0
    return cfg.mpc.lambda_alpha_eps / cfg.noise.eps_bar


def setpoint(cfg: ExperimentConfig, sys: LtiSystem) -> Equilibrium:
    """Configured setpoint, or the four-tank default input when none is given."""
    if cfg.mpc.u_s is not None:
        if len(cfg.mpc.u_s) != sys.m:
            raise ConfigError(f"mpc.u_s has {len(cfg.mpc.u_s)} entries, the system has m={sys.m} inputs")
        u_s = list(cfg.mpc.u_s)
    elif len(settings.four_tank.u_s) == sys.m:
        u_s = list(settings.four_tank.u_s)
    else:
        u_s = [1.0] * sys.m
    if cfg.mpc.y_s is not None and len(cfg.mpc.y_s) != sys.p:
        raise ConfigError(f"mpc.y_s has {len(cfg.mpc.y_s)} entries, the system has p={sys.p} outputs")

    try:
        eq = steady_state(sys, u_s)
    except SingularSteadyStateError as e:
        raise ConfigError(f"No steady state for u_s={u_s}: {e}") from e
    if cfg.mpc.y_s is not None:
        eq = Equilibrium(eq.u_s, cfg.mpc.y_s, eq.x_s)
    return eq


def build_mpc_config(cfg: ExperimentConfig, sys: LtiSystem, eq: Equilibrium) -> MpcConfig:
    section = cfg.mpc
    return MpcConfig(
        L=section.L,
        n=section.n,
        Q=section.Q_scale * np.eye(sys.p),
        R=section.R_scale * np.eye(sys.m),
        u_s=eq.u_s,
        y_s=eq.y_s,
        lambda_alpha=lambda_alpha(cfg),
        lambda_sigma=section.lambda_sigma,
        eps_bar=cfg.noise.eps_bar,
        u_lo=section.u_lo,
        u_hi=section.u_hi,
        y_lo=section.y_lo,
        y_hi=section.y_hi,
        sigma_constraint_mode=section.sigma_constraint_mode,
        sigma_bound_c=section.sigma_bound_c,
    )


def validate_experiment(cfg: ExperimentConfig, sys: LtiSystem) -> None:
    """Check every run the config describes against the MPC invariants."""
    scheme = "nominal" if cfg.run.scheme == "nominal" else "robust"
    points = cfg.sweep_grid() if any(getattr(cfg.sweep, k) for k in SWEEP_KEYS) else [{}]
    eq = setpoint(cfg, sys)
    for point in points:
        candidate = cfg.apply_point(point) if point else cfg
        try:
            mpc = build_mpc_config(candidate, sys, eq)
            mpc.check_horizon(scheme)
        except (ValueError, ValidationError) as e:
            raise ConfigError(f"Invalid run {point or 'configuration'}: {e}") from e
        if not 1 <= candidate.run.step_size <= candidate.mpc.n:
            raise ConfigError(f"step_size must lie in [1, n={candidate.mpc.n}]")
        if candidate.data.N < candidate.mpc.L + candidate.mpc.n:
            raise ConfigError(
                f"N={candidate.data.N} is shorter than the Hankel depth L+n="
                f"{candidate.mpc.L + candidate.mpc.n}"
            )


def collect(cfg: ExperimentConfig, sys: LtiSystem) -> Dict[str, Trajectory]:
    data_seed, _ = _derived_seeds(cfg.seed)
    spec = NoiseSpec(eps_bar=cfg.noise.eps_bar, seed=data_seed)
    return collect_data(sys, cfg.data.x0, cfg.data.N, cfg.data.amplitude, spec)


def build_run_config(
    cfg: ExperimentConfig, sys: LtiSystem, data: Trajectory, keep_solutions: bool = False
) -> RunConfig:
    eq = setpoint(cfg, sys)
    mpc = build_mpc_config(cfg, sys, eq)
    _, loop_seed = _derived_seeds(cfg.seed)
    return RunConfig(
        scheme=cfg.run.scheme,
        step_size=cfg.run.step_size,
        T=cfg.run.T,
        data=DataMatrices.from_trajectory(data, mpc.L, mpc.n),
        mpc=mpc,
        noise=NoiseSpec(eps_bar=cfg.noise.eps_bar, seed=loop_seed),
        qps=QpSettings.from_settings(),
        warmup_input=cfg.run.warmup_input,
        x0=cfg.run.x0,
        keep_solutions=keep_solutions,
    )


def run_experiment(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Collect data, run the closed loop and summarize; one sweep row."""
    sys = build_system(cfg)
    data = collect(cfg, sys)["noisy"]
    rc = build_run_config(cfg, sys, data)
    log = run(sys, rc)
    summary = metrics(log, setpoint(cfg, sys))
    return {**summary.to_dict(), "steps": log.steps}


def run_sweep_point(cfg: ExperimentConfig, point: Dict[str, Any]) -> Dict[str, Any]:
    """Sweep row that records failures instead of raising."""
    row: Dict[str, Any] = dict(point)
    try:
        row.update(run_experiment(cfg.apply_point(point)))
        row["error"] = ""
    except Exception as e:
        logger.error(f"Sweep point {point} failed: {e}")
        row.update({"status": "error", "error": str(e)})
    return row
