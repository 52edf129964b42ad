#!/usr/bin/env python3
"""
datampc CLI - data collection, closed-loop runs and sweeps for data-driven MPC
Usage: python -m cli.ddmpc_cli <command> [options]
"""

import argparse
import logging
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional

# Add parent directory to path for imports
sys.path.append(str(Path(__file__).parent.parent))

from datampc.analysis.diagnostics import predictor_diagnostics
from datampc.control.closedloop import metrics, run
from datampc.models.trajlib import PeReport, persistence_of_excitation
from datampc.settings import settings
from datampc.utils.csv_io import (
    read_trajectory_csv,
    write_diagnostics_csv,
    write_log_csv,
    write_table_csv,
    write_trajectory_csv,
)
from datampc.utils.experiment import (
    ConfigError,
    SWEEP_KEYS,
    ExperimentConfig,
    SystemSection,
    build_run_config,
    build_system,
    collect,
    load_experiment_config,
    run_sweep_point,
    setpoint,
    validate_experiment,
)

BUILTIN_SYSTEMS = ("four_tank",)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3

SUMMARY_COLUMNS = [
    "status",
    "max_terminal_error",
    "settle_time",
    "cost_decrease_violations",
    "mean_alpha_norm",
    "growth_rate",
]

# flag dest -> dotted config key
FLAG_KEYS = {
    "seed": "seed",
    "N": "data.N",
    "amplitude": "data.amplitude",
    "eps": "noise.eps_bar",
    "L": "mpc.L",
    "n": "mpc.n",
    "Q": "mpc.Q_scale",
    "R": "mpc.R_scale",
    "lambda_alpha": "mpc.lambda_alpha",
    "lambda_alpha_eps": "mpc.lambda_alpha_eps",
    "lambda_sigma": "mpc.lambda_sigma",
    "sigma_mode": "mpc.sigma_constraint_mode",
    "sigma_c": "mpc.sigma_bound_c",
    "scheme": "run.scheme",
    "step": "run.step_size",
    "T": "run.T",
    "x0": "run.x0",
    "out": "paths.output_dir",
    "data": "paths.data",
    "data_clean": "paths.data_clean",
}

SWEEP_FLAGS = {
    "sweep_lambda_alpha_eps": "sweep.lambda_alpha_eps",
    "sweep_lambda_sigma": "sweep.lambda_sigma",
    "sweep_eps": "sweep.eps_bar",
    "sweep_L": "sweep.L",
    "sweep_N": "sweep.N",
    "sweep_n": "sweep.n",
    "sweep_R": "sweep.R_scale",
    "sweep_amplitude": "sweep.amplitude",
    "seeds": "sweep.seeds",
}


def _number_list(text: str) -> List[float]:
    return [float(token) for token in text.replace(";", ",").split(",") if token.strip()]


def _int_list(text: str) -> List[int]:
    return [int(float(token)) for token in text.replace(";", ",").split(",") if token.strip()]


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return "-" if value is None else str(value)


class DdmpcCLI:
    """Command-line interface for data-driven MPC experiments."""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def load(self, args: argparse.Namespace) -> ExperimentConfig:
        cfg = load_experiment_config(getattr(args, "config", None))
        overrides: Dict[str, Any] = {}
        for dest, key in {**FLAG_KEYS, **SWEEP_FLAGS}.items():
            value = getattr(args, dest, None)
            if value is not None:
                overrides[key] = value
        system = getattr(args, "system", None)
        if system:
            if system in BUILTIN_SYSTEMS:
                overrides["system.name"] = system
            else:
                overrides["system.file"] = system
        return cfg.with_overrides(overrides)

    def _output_dir(self, cfg: ExperimentConfig) -> Path:
        out = Path(cfg.paths.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        return out

    def _measured_data(self, cfg: ExperimentConfig, system):
        if cfg.paths.data:
            return read_trajectory_csv(cfg.paths.data)
        return collect(cfg, system)["noisy"]

    def cmd_collect(self, args: argparse.Namespace) -> int:
        cfg = self.load(args)
        system = build_system(cfg)
        trajectories = collect(cfg, system)
        out = self._output_dir(cfg)
        clean_path = out / "data_clean.csv"
        noisy_path = out / "data_noisy.csv"
        write_trajectory_csv(clean_path, trajectories["clean"])
        write_trajectory_csv(noisy_path, trajectories["noisy"])

        order = cfg.mpc.L + 2 * cfg.mpc.n
        u = trajectories["clean"].u
        if u.N >= order:
            report = persistence_of_excitation(u, order)
        else:
            report = PeReport(order=order, is_pe=False, rank=0, sigma_min=0.0)
        print(f"Wrote {clean_path} and {noisy_path} (N={u.N})")
        print(
            f"PE report: order={report.order} is_pe={str(report.is_pe).lower()} "
            f"rank={report.rank} sigma_min={report.sigma_min:.12g}"
        )
        if not report.is_pe:
            print(f"WARNING: input is not persistently exciting of order {order}")
        return EXIT_OK

    def cmd_run(self, args: argparse.Namespace) -> int:
        cfg = self.load(args)
        system = build_system(cfg)
        validate_experiment(cfg, system)
        data = self._measured_data(cfg, system)
        rc = build_run_config(cfg, system, data)

        start = time.perf_counter()
        log = run(system, rc)
        summary = metrics(log, setpoint(cfg, system))
        elapsed = time.perf_counter() - start

        out = self._output_dir(cfg)
        log_path = Path(args.log) if args.log else out / f"log_{cfg.run.scheme}_s{cfg.run.step_size}.csv"
        write_log_csv(log_path, log)

        if log.status == "infeasible" and len(log.solves) == 1:
            print("ERROR: MPC problem infeasible at t=0")
            return EXIT_INFEASIBLE

        print("=" * 60)
        print(f"Closed-loop run: scheme={cfg.run.scheme} s={cfg.run.step_size} T={cfg.run.T}")
        print("=" * 60)
        for key, value in summary.to_dict().items():
            print(f"{key:<26} {_fmt(value)}")
        print(f"{'converged':<26} {summary.converged()}")
        print(f"{'log':<26} {log_path}")
        print(f"{'elapsed_s':<26} {elapsed:.2f}")
        return EXIT_OK

    def cmd_reproduce_four_tank(self, args: argparse.Namespace) -> int:
        cfg = self.load(args).model_copy(update={"system": SystemSection()})
        system = build_system(cfg)
        validate_experiment(cfg.with_overrides({"run.scheme": "robust"}), system)
        data = collect(cfg, system)["noisy"]
        out = self._output_dir(cfg)
        eq = setpoint(cfg, system)

        # The variant without terminal constraint runs unconstrained_horizon_factor times longer
        T = cfg.run.T
        T_ucon = T * settings.closed_loop.unconstrained_horizon_factor
        variants = [
            ("tec_1step", "robust", 1, T),
            ("tec_nstep", "robust", cfg.mpc.n, T),
            ("ucon_1step", "robust_no_terminal", 1, T_ucon),
        ]
        rows = []
        for name, scheme, step, horizon in variants:
            variant = cfg.with_overrides({"run.scheme": scheme, "run.step_size": step, "run.T": horizon})
            log = run(system, build_run_config(variant, system, data))
            write_log_csv(out / f"four_tank_{name}.csv", log)
            summary = metrics(log, eq)
            rows.append({"variant": name, "scheme": scheme, "step_size": step, "T": horizon, **summary.to_dict()})

        if args.lambda_sweep:
            for value in (0.05, 0.1, 0.5):
                variant = cfg.with_overrides(
                    {"run.scheme": "robust", "run.step_size": 1, "mpc.lambda_alpha_eps": value}
                )
                log = run(system, build_run_config(variant, system, data))
                summary = metrics(log, eq)
                rows.append(
                    {
                        "variant": f"tec_1step_lae_{value:g}",
                        "scheme": "robust",
                        "step_size": 1,
                        "T": T,
                        **summary.to_dict(),
                    }
                )

        columns = ["variant", "scheme", "step_size", "T"] + SUMMARY_COLUMNS
        write_table_csv(out / "four_tank_summary.csv", rows, columns)

        print(f"{'variant':<20}{'T':>6}  {'status':<12}{'max_terminal_error':>20}{'growth_rate':>14}")
        print("-" * 74)
        for row in rows:
            print(
                f"{row['variant']:<20}{row['T']:>6}  {row['status']:<12}"
                f"{_fmt(row['max_terminal_error']):>20}{_fmt(row['growth_rate']):>14}"
            )

        one_step, n_step = rows[0]["max_terminal_error"], rows[1]["max_terminal_error"]
        if n_step > one_step + 0.02:
            self.logger.warning(
                f"n-step terminal error {n_step:.4g} exceeds 1-step error {one_step:.4g} by more than 0.02"
            )
        return EXIT_OK

    def cmd_sweep(self, args: argparse.Namespace) -> int:
        cfg = self.load(args)
        system = build_system(cfg)
        grid = cfg.sweep_grid()
        if not cfg.sweep.seeds and not any(getattr(cfg.sweep, key) for key in SWEEP_KEYS):
            raise ConfigError("Sweep needs at least one nonempty sweep list")
        validate_experiment(cfg, system)

        jobs = max(1, args.jobs)
        self.logger.info(f"Sweeping {len(grid)} runs with {jobs} worker(s)")
        if jobs == 1:
            rows = [run_sweep_point(cfg, point) for point in grid]
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                rows = list(pool.map(run_sweep_point, [cfg] * len(grid), grid))

        for row in rows:
            row["flagged"] = row.get("status") != "completed" or not (
                row.get("max_terminal_error", float("inf")) <= settings.closed_loop.settle_threshold
            )

        keys = [key for key in grid[0] if key != "seed"]
        columns = keys + ["seed"] + SUMMARY_COLUMNS + ["flagged", "error"]
        out = self._output_dir(cfg)
        results_path = Path(args.results) if args.results else out / "sweep_results.csv"
        write_table_csv(results_path, rows, columns)

        print(f"Wrote {len(rows)} sweep rows to {results_path}")
        for key in keys:
            for value in dict.fromkeys(row[key] for row in rows):
                errors = [row.get("max_terminal_error", float("inf")) for row in rows if row[key] == value]
                print(f"{key}={value:g}: median max_terminal_error={_fmt(statistics.median(errors))}")
        return EXIT_OK

    def cmd_diagnose(self, args: argparse.Namespace) -> int:
        cfg = self.load(args).with_overrides({"run.scheme": "robust"})
        system = build_system(cfg)
        validate_experiment(cfg, system)

        if cfg.paths.data and cfg.paths.data_clean:
            noisy = read_trajectory_csv(cfg.paths.data)
            clean = read_trajectory_csv(cfg.paths.data_clean)
            x0 = None
        else:
            trajectories = collect(cfg, system)
            noisy, clean = trajectories["noisy"], trajectories["clean"]
            x0 = cfg.data.x0 if cfg.data.x0 is not None else [0.0] * system.n

        pe = predictor_diagnostics.compute_c_pe(system, clean, cfg.mpc.L, cfg.mpc.n, x0=x0)
        out = self._output_dir(cfg)
        write_table_csv(out / "pe_diagnostics.csv", [pe.to_dict()], list(pe.to_dict()))
        print("Excitation diagnostics")
        for key, value in pe.to_dict().items():
            print(f"  {key:<22} {value:.12g}")

        rc = build_run_config(cfg, system, noisy, keep_solutions=True)
        log = run(system, rc)
        rows = predictor_diagnostics.prediction_bound_report(system, log, rc.mpc, noisy.N)
        diag_path = Path(args.diagnostics_csv) if args.diagnostics_csv else out / "prediction_bounds.csv"
        write_diagnostics_csv(diag_path, rows)

        violations = predictor_diagnostics.count_violations(rows)
        print(f"Prediction-error bound: {len(rows)} checks, {violations} violations -> {diag_path}")
        return EXIT_OK


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="Experiment file ([section] key = value, or YAML)")
    parser.add_argument("--system", help="Builtin system name (four_tank) or system matrix file")
    parser.add_argument("--seed", type=int, default=None, help="Seed (default: DDMPC_SEED or config)")
    parser.add_argument("--N", type=int, help="Data length")
    parser.add_argument("--amplitude", type=float, help="Data input amplitude")
    parser.add_argument("--eps", type=float, help="Noise bound eps_bar")
    parser.add_argument("--L", type=int, help="Prediction horizon")
    parser.add_argument("--n", type=int, help="System order (upper bound)")
    parser.add_argument("--Q", type=float, help="Output weight scale (Q = value * I)")
    parser.add_argument("--R", type=float, help="Input weight scale (R = value * I)")
    parser.add_argument("--lambda-alpha", type=float, help="Regularization weight lambda_alpha")
    parser.add_argument("--lambda-alpha-eps", type=float, help="Product lambda_alpha * eps_bar")
    parser.add_argument("--lambda-sigma", type=float, help="Slack weight lambda_sigma")
    parser.add_argument(
        "--sigma-mode", choices=["none", "convex_bound", "exact_nonconvex_check"], help="Slack constraint handling"
    )
    parser.add_argument("--sigma-c", type=float, help="Constant c of the convex slack bound")
    parser.add_argument("--scheme", choices=["nominal", "robust", "robust_no_terminal"], help="MPC scheme")
    parser.add_argument("--step", type=int, help="Inputs applied per solve (1..n)")
    parser.add_argument("--T", type=int, help="Closed-loop length")
    parser.add_argument("--x0", type=_number_list, help="Initial plant state, comma separated")
    parser.add_argument("--data", help="Measured trajectory CSV")
    parser.add_argument("--data-clean", help="Noise-free trajectory CSV (diagnose)")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    parser.add_argument("--quiet", "-q", action="store_true", help="Warnings and errors only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Data-driven MPC from a single measured trajectory",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python -m cli.ddmpc_cli collect --system four_tank --N 400 --amplitude 1 --eps 0.002 --seed 1
  python -m cli.ddmpc_cli run --scheme robust --step 1 --T 300
  python -m cli.ddmpc_cli run --scheme nominal --eps 0
  python -m cli.ddmpc_cli reproduce-four-tank --seed 3
  python -m cli.ddmpc_cli sweep --sweep-eps 0.002,0.0002,0.00002 --seeds 1,2,3,4,5 --jobs 4
  python -m cli.ddmpc_cli diagnose --out results/diag
        """,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    collect_parser = subparsers.add_parser("collect", help="Open-loop data collection")
    _add_common(collect_parser)

    run_parser = subparsers.add_parser("run", help="Closed-loop run")
    _add_common(run_parser)
    run_parser.add_argument("--log", help="Log CSV path")

    reproduce_parser = subparsers.add_parser("reproduce-four-tank", help="Four-tank comparison")
    _add_common(reproduce_parser)
    reproduce_parser.add_argument(
        "--lambda-sweep", action="store_true", help="Also run lambda_alpha*eps_bar in {0.05, 0.1, 0.5}"
    )

    sweep_parser = subparsers.add_parser("sweep", help="Cartesian parameter sweep")
    _add_common(sweep_parser)
    sweep_parser.add_argument("--sweep-lambda-alpha-eps", type=_number_list)
    sweep_parser.add_argument("--sweep-lambda-sigma", type=_number_list)
    sweep_parser.add_argument("--sweep-eps", type=_number_list)
    sweep_parser.add_argument("--sweep-L", type=_int_list)
    sweep_parser.add_argument("--sweep-N", type=_int_list)
    sweep_parser.add_argument("--sweep-n", type=_int_list)
    sweep_parser.add_argument("--sweep-R", type=_number_list)
    sweep_parser.add_argument("--sweep-amplitude", type=_number_list)
    sweep_parser.add_argument("--seeds", type=_int_list, help="Seeds per sweep point")
    sweep_parser.add_argument("--jobs", type=int, default=1, help="Parallel worker processes")
    sweep_parser.add_argument("--results", help="Results CSV path")

    diagnose_parser = subparsers.add_parser("diagnose", help="Excitation and prediction-error diagnostics")
    _add_common(diagnose_parser)
    diagnose_parser.add_argument("--diagnostics-csv", help="Prediction-bound CSV path")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    else:
        level = getattr(logging, settings.logging.get("level", "INFO"))
    logging.basicConfig(
        level=level,
        format=settings.logging.get("format", "%(asctime)s - %(name)s - %(levelname)s - %(message)s"),
    )

    cli = DdmpcCLI()
    commands = {
        "collect": cli.cmd_collect,
        "run": cli.cmd_run,
        "reproduce-four-tank": cli.cmd_reproduce_four_tank,
        "sweep": cli.cmd_sweep,
        "diagnose": cli.cmd_diagnose,
    }
    try:
        return commands[args.command](args)
    except KeyboardInterrupt:
        print("\nInterrupted by user")
        return 130
    except (FileNotFoundError, ConfigError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"ERROR: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
