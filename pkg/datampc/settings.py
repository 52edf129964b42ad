import os
import yaml
from pathlib import Path
from pydantic import BaseModel, Field
from typing import Dict, List, Optional, Any


class NumericsConfig(BaseModel):
    rank_tol: float = 1e-9
    tikhonov: float = 1e-8
    consistency_tol: float = 1e-6


class QpConfig(BaseModel):
    abs_tol: float = 1e-8
    rel_tol: float = 1e-8
    max_iter: int = 50000
    infeasibility_tol: float = 1e-10
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    scaling_iter: int = 10
    adaptive_rho_interval: int = 25
    check_interval: int = 10
    polish: bool = True


class ClosedLoopConfig(BaseModel):
    divergence_guard: float = 1e6
    settle_threshold: float = 0.05
    cost_decrease_tol: float = 1e-6
    growth_blocks: int = 4
    growth_rate_tol: float = 5e-3
    unconstrained_horizon_factor: int = 4


class FourTankConfig(BaseModel):
    N: int = 400
    L: int = 30
    n: int = 4
    T: int = 300
    eps_bar: float = 0.002
    amplitude: float = 1.0
    Q_scale: float = 3.0
    R_scale: float = 1e-4
    lambda_sigma: float = 1000.0
    lambda_alpha_eps: float = 0.1
    u_s: List[float] = Field(default_factory=lambda: [1.0, 1.0])


class OutputConfig(BaseModel):
    float_format: str = "%.12g"
    results_dir: str = "results"


class Settings(BaseModel):
    app: Dict[str, Any] = Field(default_factory=dict)
    numerics: NumericsConfig = Field(default_factory=NumericsConfig)
    qp: QpConfig = Field(default_factory=QpConfig)
    closed_loop: ClosedLoopConfig = Field(default_factory=ClosedLoopConfig)
    four_tank: FourTankConfig = Field(default_factory=FourTankConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    logging: Dict[str, str] = Field(default_factory=dict)

    @property
    def seed(self) -> int:
        return int(self.app.get("seed", 1))


def deep_merge(base: dict, override: dict) -> dict:
    for key, value in override.items():
        if key in base and isinstance(base[key], dict) and isinstance(value, dict):
            deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def _env_overrides() -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if os.getenv("DDMPC_SEED"):
        overrides.setdefault("app", {})["seed"] = int(os.environ["DDMPC_SEED"])
    if os.getenv("DDMPC_LOG_LEVEL"):
        overrides.setdefault("logging", {})["level"] = os.environ["DDMPC_LOG_LEVEL"].upper()
    if os.getenv("DDMPC_ABS_TOL"):
        overrides.setdefault("qp", {})["abs_tol"] = float(os.environ["DDMPC_ABS_TOL"])
    if os.getenv("DDMPC_MAX_ITER"):
        overrides.setdefault("qp", {})["max_iter"] = int(os.environ["DDMPC_MAX_ITER"])
    return overrides


def load_config(config_path: Optional[str] = None) -> Settings:
    """Load configuration from YAML file and environment variables."""
    if config_path is None:
        config_path = Path(__file__).parent.parent / "config.yaml"

    config_data: Dict[str, Any] = {}
    if Path(config_path).exists():
        with open(config_path, "r") as f:
            config_data = yaml.safe_load(f) or {}

    merged_config = deep_merge(config_data, _env_overrides())

    return Settings(**merged_config)


# Global settings instance
settings = load_config()
