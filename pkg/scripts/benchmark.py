#!/usr/bin/env python3
"""
Benchmark script for datampc.
Times the QP-backed MPC solves and a full closed-loop run on the four-tank plant.
"""

import json
import logging
import platform
import statistics
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Tuple

import numpy as np

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from datampc.control.closedloop import metrics, run
from datampc.control.ddmpc import DataMatrices, solve_nominal, solve_robust
from datampc.models.lti import simulate
from datampc.models.trajlib import Sequence
from datampc.utils.experiment import (
    ExperimentConfig,
    build_mpc_config,
    build_run_config,
    build_system,
    collect,
    setpoint,
)

logger = logging.getLogger(__name__)


def summarize(times: List[float]) -> Dict[str, float]:
    return {
        "mean": statistics.mean(times),
        "median": statistics.median(times),
        "std": statistics.stdev(times) if len(times) > 1 else 0.0,
        "min": min(times),
        "max": max(times),
        "iterations": len(times),
    }


class DdmpcBenchmark:
    """Timing of the data-driven MPC building blocks."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.system = build_system(cfg)
        self.eq = setpoint(cfg, self.system)
        self.data = collect(cfg, self.system)["noisy"]

    def time_function(self, func: Callable, *args, **kwargs) -> Tuple[Any, float]:
        start = time.perf_counter()
        result = func(*args, **kwargs)
        return result, time.perf_counter() - start

    def _initial_window(self) -> Tuple[np.ndarray, np.ndarray]:
        n = self.cfg.mpc.n
        warmup = simulate(self.system, np.zeros(self.system.n), Sequence.constant(self.eq.u_s, n))
        return np.tile(self.eq.u_s, n), warmup["y"].stacked()

    def benchmark_hankel(self, iterations: int = 5) -> Dict[str, float]:
        logger.info(f"Benchmarking Hankel construction ({iterations} iterations)...")
        times = []
        for _ in range(iterations):
            _, duration = self.time_function(
                DataMatrices.from_trajectory, self.data, self.cfg.mpc.L, self.cfg.mpc.n
            )
            times.append(duration)
        return summarize(times)

    def benchmark_solve(self, scheme: str, iterations: int = 3) -> Dict[str, Any]:
        logger.info(f"Benchmarking {scheme} solve ({iterations} iterations)...")
        mpc = build_mpc_config(self.cfg, self.system, self.eq)
        data = DataMatrices.from_trajectory(self.data, mpc.L, mpc.n)
        u_init, y_init = self._initial_window()
        solver = solve_nominal if scheme == "nominal" else solve_robust

        times, qp_iterations = [], []
        status = None
        for _ in range(iterations):
            solution, duration = self.time_function(solver, data, mpc, u_init, y_init)
            times.append(duration)
            qp_iterations.append(solution.qp_iterations)
            status = solution.status
        return {**summarize(times), "qp_iterations": statistics.mean(qp_iterations), "status": status}

    def benchmark_closed_loop(self, T: int) -> Dict[str, Any]:
        logger.info(f"Benchmarking closed loop (T={T})...")
        cfg = self.cfg.with_overrides({"run.T": T})
        rc = build_run_config(cfg, self.system, self.data)
        log, duration = self.time_function(run, self.system, rc)
        summary = metrics(log, self.eq)
        return {
            "total_time": duration,
            "time_per_solve": duration / max(1, len(log.solves)),
            "solves": len(log.solves),
            **summary.to_dict(),
        }

    def run_full_benchmark(self, iterations: int = 3, T: int = 60) -> Dict[str, Any]:
        logger.info("Starting datampc benchmark")
        start = time.perf_counter()
        results: Dict[str, Any] = {
            "timestamp": time.time(),
            "system_info": {
                "platform": platform.platform(),
                "python_version": platform.python_version(),
                "numpy_version": np.__version__,
            },
            "problem": {
                "N": self.data.N,
                "L": self.cfg.mpc.L,
                "n": self.cfg.mpc.n,
                "eps_bar": self.cfg.noise.eps_bar,
            },
            "benchmarks": {},
        }

        jobs = {
            "hankel": lambda: self.benchmark_hankel(iterations),
            "nominal_solve": lambda: self.benchmark_solve("nominal", iterations),
            "robust_solve": lambda: self.benchmark_solve("robust", iterations),
            "closed_loop": lambda: self.benchmark_closed_loop(T),
        }
        for name, job in jobs.items():
            try:
                results["benchmarks"][name] = job()
            except Exception as e:
                logger.error(f"{name} benchmark failed: {e}")
                results["benchmarks"][name] = {"error": str(e)}

        results["benchmark_duration"] = time.perf_counter() - start
        return results

    def format_results(self, results: Dict[str, Any]) -> str:
        output = ["DATAMPC BENCHMARK RESULTS", "=" * 60]
        problem = results["problem"]
        output.append(
            f"N={problem['N']}  L={problem['L']}  n={problem['n']}  eps_bar={problem['eps_bar']}"
        )
        output.append(f"Python {results['system_info']['python_version']} on {results['system_info']['platform']}")
        output.append("")

        for name, entry in results["benchmarks"].items():
            output.append(name.replace("_", " ").upper())
            output.append("-" * 30)
            if "error" in entry:
                output.append(f"FAILED: {entry['error']}")
            elif "mean" in entry:
                output.append(f"Mean Time:        {entry['mean'] * 1000:.2f} ms")
                output.append(f"Min/Max:          {entry['min'] * 1000:.2f} / {entry['max'] * 1000:.2f} ms")
                if "qp_iterations" in entry:
                    output.append(f"QP Iterations:    {entry['qp_iterations']:.0f} ({entry['status']})")
            else:
                output.append(f"Total Time:       {entry['total_time']:.2f} s")
                output.append(f"Per Solve:        {entry['time_per_solve'] * 1000:.2f} ms")
                output.append(f"Status:           {entry['status']}")
            output.append("")

        output.append(f"Total Benchmark Time: {results['benchmark_duration']:.1f}s")
        output.append("=" * 60)
        return "\n".join(output)


def main():
    import argparse

    parser = argparse.ArgumentParser(description="datampc benchmark")
    parser.add_argument("--iterations", type=int, default=3, help="Repetitions per solve benchmark")
    parser.add_argument("--T", type=int, default=60, help="Closed-loop length")
    parser.add_argument("--seed", type=int, default=None, help="Experiment seed")
    parser.add_argument("--output", "-o", help="Output file for results (JSON)")
    parser.add_argument("--verbose", "-v", action="store_true", help="Verbose output")
    args = parser.parse_args()

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)

    cfg = ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides({"seed": args.seed})

    try:
        benchmark = DdmpcBenchmark(cfg)
        results = benchmark.run_full_benchmark(args.iterations, args.T)
        print(benchmark.format_results(results))
        if args.output:
            with open(args.output, "w") as f:
                json.dump(results, f, indent=2, default=str)
            print(f"\nDetailed results saved to: {args.output}")
    except Exception as e:
        logger.error(f"Benchmark failed: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
