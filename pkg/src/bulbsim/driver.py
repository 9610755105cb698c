"""SPMD driver: one simulated rank per thread, each stepping its theta slice.

Every rank builds the same initial ensemble from the configuration, keeps
its contiguous theta range, and steps it with the shared exchange providing
the moment allreduce.  Snapshots are written by the owner (direct mode) or
forwarded to the paired CPU rank (staged mode).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from bulbsim.config import RunConfig
from bulbsim.errors import ConfigError
from bulbsim.grid import build_grid
from bulbsim.integrator import Diagnostics, Observer, Stepper, run_steps
from bulbsim.snapshot import encode_snapshot, receive_staged, write_direct, write_manifest, write_staged
from bulbsim.state import Ensemble, init_ensemble
from bulbsim.topology import Exchange, RankContext, RankPlan, make_plan, run_ranks

log = logging.getLogger(__name__)


@dataclass
class RankResult:
    rank: int
    ensemble: Ensemble
    diagnostics: Diagnostics
    files: list[Path] = field(default_factory=list)


@dataclass
class RunResult:
    plan: RankPlan
    ranks: list[RankResult]
    config_hash: str
    elapsed: float
    out_dir: Path | None

    @property
    def steps(self) -> int:
        return self.ranks[0].diagnostics.steps

    @property
    def files(self) -> list[Path]:
        return sorted((f for r in self.ranks for f in r.files), key=lambda p: p.name)

    @property
    def max_norm_drift(self) -> float:
        return max(r.diagnostics.max_norm_drift for r in self.ranks)


def build_plan(config: RunConfig, threads: int | None = None) -> RankPlan:
    plan = make_plan(config["grid.n_theta"], config.devices(), config["run.chunk_size"])
    if threads is not None:
        if threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {threads}")
        plan = replace(plan, ranks=tuple(replace(r, threads=threads) for r in plan.ranks))
    return plan


def _snapshot_observer(ctx: RankContext, mode: str, interval: int, out_dir: Path, files: list) -> Observer:
    plan = ctx.plan
    rank = ctx.rank
    staged_owners = [r for r in plan.accelerator_ranks() if plan.stager_for(r) == rank]

    def write(step: int, ens: Ensemble):
        if mode == "direct":
            files.append(write_direct(ens, step, out_dir, rank=rank))
        elif plan.stager_for(rank) != rank:
            write_staged(ens, step, plan.stager_for(rank), out_dir, rank=rank, exchange=ctx.exchange)
        else:
            files.append(write_direct(ens, step, out_dir, rank=rank))
            files.extend(receive_staged(ctx.exchange, rank, staged_owners, step, out_dir))

    return Observer(interval, write, name="snapshot")


def run(config: RunConfig, *, out_dir=None, threads: int | None = None, n_steps: int | None = None,
        duration: float | None = None, io_mode: str | None = None, timeout: float = 600.0,
        dispatch: str = "blocks") -> RunResult:
    """Run the configured simulation.

    ``n_steps`` defaults to ``run.n_steps``.  With ``duration`` the run stops
    after the first step that ends past that many wall-clock seconds (rank 0's
    clock decides for everyone); ``n_steps`` is then an upper bound.
    """
    mode = io_mode or config["io.mode"]
    if n_steps is None and duration is None:
        n_steps = config["run.n_steps"]
    if duration is not None and not duration > 0:
        raise ConfigError(f"duration must be > 0, got {duration!r}")
    out = None
    if mode != "off":
        out = Path(out_dir if out_dir is not None else config["io.out_dir"])
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"io.out_dir {out} cannot be created: {exc}") from exc
    plan = build_plan(config, threads)
    if mode == "staged" and plan.accelerator_ranks() and not plan.cpu_ranks():
        raise ConfigError("io.mode = staged needs at least one cpu rank")
    grid = build_grid(config.grid_config())
    spectra = config.spectra()
    physics = config.physics()
    step_cfg = config.step_config()
    chunk = config["run.chunk_size"]
    log_every = config["run.log_every"]
    multi = len(plan) > 1
    interval = config.snapshot_interval

    def rank_main(ctx: RankContext) -> RankResult:
        a = ctx.assignment
        ens = init_ensemble(grid, spectra).slice(a.theta_start, a.theta_count)
        files: list[Path] = []
        observers = [] if mode == "off" else [_snapshot_observer(ctx, mode, interval, out, files)]
        should_stop = None
        if duration is not None:
            t0 = time.perf_counter()

            def should_stop(step: int) -> bool:
                mine = time.perf_counter() - t0 >= duration if ctx.rank == 0 else None
                if not multi:
                    return mine
                return ctx.exchange.allreduce(ctx.rank, mine, lambda flags: bool(flags[0]))

        with Stepper(ens, physics, step_cfg, workers=a.threads, chunk_size=chunk,
                     exchange=ctx.exchange if multi else None, rank=ctx.rank, dispatch=dispatch) as stepper:
            diag = run_steps(stepper, n_steps, observers, log_every=log_every, should_stop=should_stop)
        return RankResult(ctx.rank, ens, diag, files)

    t0 = time.perf_counter()
    results = run_ranks(plan, rank_main, Exchange(len(plan), timeout=timeout))
    elapsed = time.perf_counter() - t0
    result = RunResult(plan, results, config.hash, elapsed, out)
    if out is not None:
        write_manifest(out, config.hash, result.files,
                       {"ranks": len(plan), "steps": result.steps, "io_mode": mode,
                        "final_r": repr(results[0].ensemble.r)})
        (out / "config.ini").write_text(config.canonical())
    log.info("run finished: %d steps on %d ranks in %.3f s", result.steps, len(plan), elapsed)
    return result


def final_ensemble_bytes(result: RunResult, step_index: int | None = None) -> list[bytes]:
    """Encoded final slice of every rank (what a snapshot at the end would hold)."""
    step = result.steps if step_index is None else step_index
    return [encode_snapshot(r.ensemble, step, owner_rank=r.rank) for r in result.ranks]

