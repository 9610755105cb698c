"""Throughput microkernels and the steps-per-second harness.

The microkernels follow a three-level loop: ``threads`` workers, each
repeating ``iterations`` passes over a vector of ``width`` lanes.  Work is
counted from the loop bounds, never from timing; each kernel's lane values
end up in a checksum so the loops cannot be optimized away.
"""

from __future__ import annotations

import csv
import math
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from bulbsim.config import RunConfig
from bulbsim.errors import BulbError, ConfigError
from bulbsim.topology import RankPlan, thread_iterations

FLOPS_PER_ELEMENT = 2  # one multiply and one add per lane per iteration
DEFAULT_ITERATIONS = 10_000_000
CSV_FIELDS = ("kernel", "width", "threads", "iterations", "elapsed_s", "rate", "checksum")

# recurrence x <- x * A + B converges to B / (1 - A) = 1 without overflow
_A = 0.5
_B = 0.5


class InsufficientDurationError(BulbError):
    """Fewer than three steps completed in the measurement window."""


@dataclass(frozen=True)
class BenchReport:
    kernel: str
    width: int
    threads: int
    iterations: int
    elapsed_s: float
    rate: float
    checksum: float
    work: int
    unit: str
    config_hash: str = ""
    critical_path_rate: float | None = None  # steps harness only, see measure_steps_per_second
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in CSV_FIELDS}


@njit(cache=True, nogil=True)
def _fma_loop(x, iterations, a, b):
    for _ in range(iterations):
        for lane in range(x.shape[0]):
            x[lane] = x[lane] * a + b
    return x


@njit(cache=True, nogil=True)
def _sincos_loop(x, acc, iterations, perturbation):
    for _ in range(iterations):
        for lane in range(x.shape[0]):
            s = math.sin(x[lane])
            c = math.cos(x[lane])
            acc[lane] = s * s + c * c
            x[lane] = x[lane] + perturbation * c
    return acc


@njit(cache=True, nogil=True)
def _exp_loop(x, acc, iterations, perturbation):
    for _ in range(iterations):
        for lane in range(x.shape[0]):
            v = math.exp(x[lane])
            acc[lane] = v
            x[lane] = x[lane] - perturbation * v
    return acc


def _check(width: int, iterations: int, threads: int, lane_hint: int):
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    if lane_hint < 1 or width < 1 or width % lane_hint:
        raise ConfigError(f"vector width {width} is not a positive multiple of the lane hint {lane_hint}")


def _run_threads(threads: int, work_fn) -> tuple[float, list]:
    """Start ``threads`` workers on ``work_fn(i)``; time the parallel region only."""
    results: list = [None] * threads
    start = threading.Barrier(threads + 1)

    def target(i):
        start.wait()
        results[i] = work_fn(i)

    pool = [threading.Thread(target=target, args=(i,)) for i in range(threads)]
    for t in pool:
        t.start()
    t0 = time.perf_counter()
    start.wait()
    for t in pool:
        t.join()
    elapsed = time.perf_counter() - t0
    return max(elapsed, 1e-9), results


def _warm():
    # compile outside the timed region
    one = np.zeros(1)
    _fma_loop(one.copy(), 1, _A, _B)
    _sincos_loop(one.copy(), one.copy(), 1, 0.0)
    _exp_loop(one.copy(), one.copy(), 1, 0.0)


def flops_kernel(vector_width: int, iterations: int = DEFAULT_ITERATIONS, threads: int = 1, *,
                 lane_hint: int = 4, config_hash: str = "") -> BenchReport:
    """GFLOP/s of the multiply-add recurrence; work = threads * iterations * width * 2."""
    _check(vector_width, iterations, threads, lane_hint)
    _warm()
    inputs = [np.linspace(0.0, 1.0, vector_width) for _ in range(threads)]
    elapsed, outs = _run_threads(threads, lambda i: _fma_loop(inputs[i], iterations, _A, _B))
    work = threads * iterations * vector_width * FLOPS_PER_ELEMENT
    checksum = math.fsum(float(v) for out in outs for v in out)
    return BenchReport("flops", vector_width, threads, iterations, elapsed, work / elapsed / 1e9, checksum,
                       work, "GFLOP/s", config_hash)


def transcendental_kernel(kind: str, vector_width: int, iterations: int = DEFAULT_ITERATIONS, threads: int = 1, *,
                          lane_hint: int = 4, inputs: np.ndarray | None = None, perturbation: float = 1e-9,
                          config_hash: str = "") -> BenchReport:
    """M-evals/s of ``sin``+``cos`` pairs or ``exp``; evals = threads * iterations * width.

    The checksum is the sum of the last value computed per lane: ``sin^2 +
    cos^2`` for ``sincos`` and ``exp(x)`` for ``exp``.  With zero inputs and
    zero perturbation the ``exp`` checksum is exactly ``threads * width``.
    """
    if kind not in ("sincos", "exp"):
        raise ConfigError(f"transcendental kind must be 'sincos' or 'exp', got {kind!r}")
    _check(vector_width, iterations, threads, lane_hint)
    _warm()
    base = np.zeros(vector_width) if inputs is None else np.asarray(inputs, dtype=np.float64)
    if base.shape != (vector_width,):
        raise ConfigError(f"inputs must have shape ({vector_width},)")
    loop = _sincos_loop if kind == "sincos" else _exp_loop
    xs = [base.copy() for _ in range(threads)]
    accs = [np.zeros(vector_width) for _ in range(threads)]
    elapsed, outs = _run_threads(threads, lambda i: loop(xs[i], accs[i], iterations, perturbation))
    work = threads * iterations * vector_width
    checksum = math.fsum(float(v) for out in outs for v in out)
    return BenchReport(kind, vector_width, threads, iterations, elapsed, work / elapsed / 1e6, checksum,
                       work, "M-evals/s", config_hash)


def sweep(kernel: str, widths: Sequence[int], iterations: int, threads: int = 1, *, lane_hint: int = 4,
          config_hash: str = "") -> list[BenchReport]:
    """One report per width for ``flops``, ``sincos`` or ``exp``."""
    out = []
    for w in widths:
        if kernel == "flops":
            out.append(flops_kernel(w, iterations, threads, lane_hint=lane_hint, config_hash=config_hash))
        else:
            out.append(transcendental_kernel(kernel, w, iterations, threads, lane_hint=lane_hint,
                                             config_hash=config_hash))
    return out


def write_csv(reports: Sequence[BenchReport], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for r in reports:
            writer.writerow(r.row())
    return path


def format_csv(reports: Sequence[BenchReport]) -> str:
    lines = [",".join(CSV_FIELDS)]
    for r in reports:
        row = r.row()
        lines.append(",".join(str(row[k]) for k in CSV_FIELDS))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# steps per second


def measure_steps_per_second(config: RunConfig, duration: float = 100.0, *, threads: int | None = None,
                             dispatch: str = "blocks") -> BenchReport:
    """Steps/s of the configured run with I/O off, over at least ``duration`` seconds.

    ``rate`` is completed steps over wall time.  ``critical_path_rate`` uses
    the time the run would take if every worker had its own core: per wave,
    only the slowest block counts (see ``Stepper._map``).
    """
    from bulbsim.driver import run

    if not duration > 0:
        raise ConfigError(f"duration must be > 0, got {duration!r}")
    result = run(config, duration=duration, io_mode="off", threads=threads, dispatch=dispatch)
    steps = result.steps
    if steps < 3:
        raise InsufficientDurationError(f"only {steps} step(s) completed in {duration} s; need at least 3")
    elapsed = max(r.diagnostics.wall_time for r in result.ranks)
    critical = max(r.diagnostics.critical_path_time for r in result.ranks)
    workers = max(a.threads for a in result.plan.ranks)
    return BenchReport("steps", 0, workers, steps, elapsed, steps / elapsed, float(result.ranks[0].ensemble.r),
                       steps, "steps/s", config.hash, steps / max(critical, 1e-9))


@dataclass(frozen=True)
class SweepRow:
    label: str
    ranks: int
    max_local_theta: int
    threads: int
    predicted_waves: int
    steps_per_second: float


def rank_sweep(config: RunConfig, device_sets: dict, duration: float) -> list[SweepRow]:
    """Steps/s for several device lists, with the predicted wave count of each plan."""
    from bulbsim.driver import build_plan

    rows = []
    for label, overrides in device_sets.items():
        cfg = config.with_overrides(**overrides)
        plan: RankPlan = build_plan(cfg)
        report = measure_steps_per_second(cfg, duration)
        worst = max(plan.ranks, key=lambda a: (a.waves, a.theta_count))
        rows.append(SweepRow(label, len(plan), worst.theta_count, worst.threads, worst.waves, report.rate))
    return rows


def wave_cliff(config: RunConfig, workers: int, local_counts: Sequence[int], *, duration: float = 1.0,
               repeats: int = 3) -> dict[int, float]:
    """Median critical-path steps/s per worker for a single rank holding each local bin count.

    Bins are handed out one per worker per wave (chunk size 1), so a count
    just above ``workers`` needs a second, mostly idle wave.  Runs for the
    different counts are interleaved to spread machine noise evenly.  The
    critical-path rate is used because wall time on a machine with fewer
    cores than workers serializes the waves' blocks and hides the cliff.
    """
    rates: dict[int, list[float]] = {n: [] for n in local_counts}
    for _ in range(repeats):
        for n in local_counts:
            cfg = config.with_overrides(grid__n_theta=n, run__chunk_size=1, devices__cpu__count=1,
                                        devices__phi__count=0, devices__cpu__threads=workers)
            report = measure_steps_per_second(cfg, duration, dispatch="waves")
            rates[n].append(report.critical_path_rate / workers)
    return {n: statistics.median(v) for n, v in rates.items()}


def predicted_waves(local_counts: Sequence[int], workers: int) -> dict[int, int]:
    return {n: thread_iterations(n, workers) for n in local_counts}
