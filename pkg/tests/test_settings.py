import pytest
import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.append(str(Path(__file__).parent.parent))

from datampc.settings import Settings, deep_merge, load_config


class TestLoadConfig:

    def test_repository_config(self):
        cfg = load_config()
        assert cfg.seed == 1
        assert cfg.numerics.rank_tol == 1e-9
        assert cfg.qp.alpha == 1.6
        assert cfg.four_tank.L == 30
        assert cfg.four_tank.u_s == [1.0, 1.0]
        assert cfg.logging["level"] == "INFO"

    def test_missing_file_gives_defaults(self, tmp_path):
        cfg = load_config(str(tmp_path / "none.yaml"))
        assert cfg.closed_loop.settle_threshold == 0.05
        assert cfg.closed_loop.growth_blocks == 4
        assert cfg.closed_loop.growth_rate_tol == 5e-3
        assert cfg.closed_loop.unconstrained_horizon_factor == 4
        assert cfg.output.float_format == "%.12g"

    def test_environment_overrides(self, monkeypatch):
        monkeypatch.setenv("DDMPC_SEED", "42")
        monkeypatch.setenv("DDMPC_LOG_LEVEL", "debug")
        monkeypatch.setenv("DDMPC_MAX_ITER", "100")
        cfg = load_config()
        assert cfg.seed == 42
        assert cfg.logging["level"] == "DEBUG"
        assert cfg.qp.max_iter == 100

    def test_partial_file(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("qp:\n  rho: 0.5\n")
        cfg = load_config(str(path))
        assert cfg.qp.rho == 0.5
        assert cfg.qp.abs_tol == 1e-8
        assert isinstance(cfg, Settings)


class TestDeepMerge:

    def test_nested_keys_merge(self):
        merged = deep_merge({"qp": {"rho": 0.1, "alpha": 1.6}, "app": {}}, {"qp": {"rho": 1.0}})
        assert merged == {"qp": {"rho": 1.0, "alpha": 1.6}, "app": {}}

    def test_scalar_replaces_dict(self):
        assert deep_merge({"a": {"b": 1}}, {"a": 2}) == {"a": 2}


if __name__ == "__main__":
    pytest.main([__file__])
