"""Gragg modified-midpoint stepping of the coupled beam ensemble.

Every substep has two phases.  Phase 1 computes per-chunk moment partials of
the current substep state (read-only) and reduces them in fixed chunk order,
possibly across ranks.  Phase 2 evaluates ``d psi/dr = -i H_eff psi`` for
disjoint theta blocks.  Work inside a phase is dealt to worker threads in
chunk-aligned blocks, so results are bitwise independent of the worker count.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from bulbsim import kernels
from bulbsim.errors import BulbError, ConfigError, IntegrationError, SingularityError
from bulbsim.hamiltonian import (
    DEFAULT_CHUNK_SIZE,
    DEFAULT_COS_THETA_FLOOR,
    MomentSet,
    VacuumParams,
    check_weights,
    chunk_partials,
    dilution,
    fold_chunks,
    potential_packed,
    upper_pairs,
    vacuum_terms,
)
from bulbsim.state import Ensemble, renormalize
from bulbsim.topology import Exchange, WorkerTeam, chunk_blocks, make_contribution, worker_blocks

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepConfig:
    h: float = 0.005
    n_substeps: int = 8
    renormalize_every: int = 0
    cos_theta_floor: float = DEFAULT_COS_THETA_FLOOR

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigError(f"step.h must be > 0, got {self.h!r}")
        if self.n_substeps < 2 or self.n_substeps % 2:
            raise ConfigError(f"step.n_substeps must be even and >= 2, got {self.n_substeps!r}")
        if self.renormalize_every < 0:
            raise ConfigError("step.renormalize_every must be >= 0")


@dataclass(frozen=True)
class Physics:
    vacuum: VacuumParams = field(default_factory=VacuumParams)
    mu0: float = 1.0


class DerivativeSet(NamedTuple):
    re: np.ndarray
    im: np.ndarray


@dataclass
class Diagnostics:
    steps: int = 0
    max_norm_drift: float = 0.0
    wall_time: float = 0.0
    renormalizations: int = 0
    moment_evaluations: int = 0
    critical_path_time: float = 0.0  # wall time minus work that dedicated cores would overlap


class Observer:
    """Callback fired after every ``every``-th step with ``(step_index, ensemble)``."""

    def __init__(self, every: int, callback: Callable[[int, Ensemble], None], name: str = "observer"):
        if every < 1:
            raise ConfigError(f"observer interval must be >= 1, got {every}")
        self.every = every
        self.callback = callback
        self.name = name

    def __call__(self, step: int, ens: Ensemble):
        if step % self.every == 0:
            self.callback(step, ens)


def _pair_index(n: int) -> np.ndarray:
    pidx = np.zeros((n, n), dtype=np.int64)
    for k, (a, b) in enumerate(upper_pairs(n)):
        pidx[a, b] = pidx[b, a] = k
    return pidx


def rhs_block(grid, re: np.ndarray, im: np.ndarray, r: float, moments: MomentSet, physics: Physics,
              gsl: slice, cos_theta_floor: float = DEFAULT_COS_THETA_FLOOR,
              out: DerivativeSet | None = None) -> DerivativeSet:
    """``-i H_eff psi`` for amplitude arrays ``(2, T, P, n, E)`` of one theta block.

    ``out`` may supply (possibly strided) arrays to write into.
    """
    cos_t, _ = grid.local_angles(r, gsl)
    if cos_t.size and np.min(cos_t) <= cos_theta_floor:
        raise SingularityError(f"beam with cos(theta) = {np.min(cos_t)!r} at r = {r!r} "
                               f"is at or below the floor {cos_theta_floor!r}")
    h0 = vacuum_terms(physics.vacuum, grid.e_nodes, r, grid.n_flavors)
    vx, vy, vz = grid.directions(r, gsl)
    hnu = potential_packed(moments, vx, vy, vz, physics.mu0 * dilution(r, grid.radius_ns))
    if out is None:
        out = DerivativeSet(np.empty_like(re), np.empty_like(im))
    kernels.rhs(re, im, h0, hnu, np.ascontiguousarray(cos_t), _pair_index(re.shape[3]), out.re, out.im)
    return out


def derivative(ens: Ensemble, r: float, moments: MomentSet, physics: Physics,
               cos_theta_floor: float = DEFAULT_COS_THETA_FLOOR) -> DerivativeSet:
    """Right-hand side for the whole local ensemble at radius ``r``."""
    return rhs_block(ens.grid, ens.re, ens.im, r, moments, physics, ens.theta_slice, cos_theta_floor)


class Stepper:
    """Advances one (rank-local) ensemble slice.

    Without an exchange the slice must be the whole ensemble; with one, each
    moment evaluation is an allreduce among ranks.
    """

    def __init__(self, ens: Ensemble, physics: Physics, config: StepConfig = StepConfig(), *,
                 workers: int = 1, chunk_size: int = DEFAULT_CHUNK_SIZE, exchange: Exchange | None = None,
                 rank: int = 0, team: WorkerTeam | None = None, dispatch: str = "blocks"):
        self.ens = ens
        self.physics = physics
        self.config = config
        self.chunk_size = chunk_size
        self.exchange = exchange
        self.rank = rank
        if workers < 1:
            raise ConfigError(f"workers must be >= 1, got {workers}")
        if dispatch == "blocks":
            self.blocks = worker_blocks(ens.theta_offset, ens.n_theta_local, workers, chunk_size)
        elif dispatch == "waves":
            self.blocks = chunk_blocks(ens.theta_offset, ens.n_theta_local, chunk_size)
        else:
            raise ConfigError(f"dispatch must be 'blocks' or 'waves', got {dispatch!r}")
        self.wave_size = min(workers, max(1, len(self.blocks)))
        self._own_team = None
        if team is None and self.wave_size > 1:
            team = self._own_team = WorkerTeam(self.wave_size, name=f"rank{rank}-worker")
        self.team = team
        n = ens.grid.n_flavors
        check_weights(ens.weights)
        self._ia = np.array([a for a, _ in upper_pairs(n)], dtype=np.int64)
        self._ib = np.array([b for _, b in upper_pairs(n)], dtype=np.int64)
        self._pidx = _pair_index(n)
        self._h0 = None
        self._h0_varies = callable(physics.vacuum.matter_potential)
        self.overlap_time = 0.0
        self.moment_evaluations = 0
        self.last_moment_radius: float | None = None
        if exchange is None and (ens.theta_offset != 0 or ens.n_theta_local != ens.grid.n_theta):
            raise ConfigError("a partial ensemble slice needs an exchange to see the other ranks")

    def close(self):
        if self._own_team is not None:
            self._own_team.close()
            self._own_team = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _map(self, fn, items):
        """Run ``fn`` over blocks in waves of ``wave_size``.

        Each block's thread CPU time is recorded.  Per wave, the block times
        beyond the slowest one would overlap on dedicated cores;
        ``overlap_time`` accumulates them so a critical-path time can be
        reported on machines with fewer cores than workers.
        """
        def timed(x):
            t0 = time.thread_time()
            fn(x)
            return time.thread_time() - t0

        for i in range(0, len(items), self.wave_size):
            wave = items[i:i + self.wave_size]
            if self.team is None or len(wave) <= 1:
                costs = [timed(x) for x in wave]
            else:
                costs = self.team.map(timed, wave)
            self.overlap_time += sum(costs) - max(costs)

    def _geometry(self, r: float):
        """Local cos(theta) and directions at ``r``, checked against the floor."""
        ens = self.ens
        cos_t, vx, vy, vz = ens.grid.beam_geometry(r, ens.theta_slice)
        if cos_t.size and cos_t.min() <= self.config.cos_theta_floor:
            raise SingularityError(f"beam with cos(theta) = {cos_t.min()!r} at r = {r!r} "
                                   f"is at or below the floor {self.config.cos_theta_floor!r}")
        return cos_t, (vx, vy, vz)

    def moments(self, re: np.ndarray, im: np.ndarray, r: float, directions=None) -> MomentSet:
        ens = self.ens
        grid = ens.grid
        if directions is None:
            directions = grid.directions(r, ens.theta_slice)
        vx, vy, vz = directions
        n_pairs = self._ia.size
        b_hi = np.empty((ens.n_theta_local, 2, 4, n_pairs, 2))
        b_lo = np.empty_like(b_hi)

        def block_bins(block):
            lo, hi = block
            kernels.bin_moments(re[:, lo:hi], im[:, lo:hi], ens.weights[:, :, lo:hi], vx[lo:hi], vy[lo:hi],
                                vz[lo:hi], self._ia, self._ib, b_hi[lo:hi], b_lo[lo:hi])

        self._map(block_bins, self.blocks)
        self.moment_evaluations += 1
        self.last_moment_radius = r
        if self.exchange is None:
            _, c_hi, c_lo = chunk_partials(b_hi, b_lo, ens.theta_offset, self.chunk_size)
            return fold_chunks(c_hi, c_lo, r, grid.n_flavors)
        contribution = make_contribution(self.rank, r, grid.n_flavors, grid.n_theta, self.chunk_size,
                                         ens.theta_offset, b_hi, b_lo)
        return self.exchange.allreduce_moments(contribution, grid.n_theta, self.chunk_size)

    def f(self, re: np.ndarray, im: np.ndarray, r: float) -> DerivativeSet:
        ens = self.ens
        grid = ens.grid
        cos_t, (vx, vy, vz) = self._geometry(r)
        moments = self.moments(re, im, r, (vx, vy, vz))
        if self._h0 is None or self._h0_varies:
            self._h0 = vacuum_terms(self.physics.vacuum, grid.e_nodes, r, grid.n_flavors)
        h0 = self._h0
        hnu = potential_packed(moments, vx, vy, vz, self.physics.mu0 * dilution(r, grid.radius_ns))
        d_re = np.empty_like(re)
        d_im = np.empty_like(im)

        def block_rhs(block):
            lo, hi = block
            kernels.rhs(re[:, lo:hi], im[:, lo:hi], h0, hnu[lo:hi], cos_t[lo:hi], self._pidx,
                        d_re[:, lo:hi], d_im[:, lo:hi])

        self._map(block_rhs, self.blocks)
        return DerivativeSet(d_re, d_im)

    def step(self, step_index: int = 0) -> None:
        """One modified-midpoint step of size ``h`` with ``n_substeps`` substeps."""
        ens = self.ens
        n = self.config.n_substeps
        h = self.config.h
        hs = h / n
        r0 = ens.r
        z_prev_re, z_prev_im = ens.re, ens.im
        d = self.f(z_prev_re, z_prev_im, r0)
        z_re = z_prev_re + hs * d.re
        z_im = z_prev_im + hs * d.im
        for m in range(1, n):
            d = self.f(z_re, z_im, r0 + m * hs)
            z_next_re = z_prev_re + (2.0 * hs) * d.re
            z_next_im = z_prev_im + (2.0 * hs) * d.im
            z_prev_re, z_prev_im = z_re, z_im
            z_re, z_im = z_next_re, z_next_im
        r1 = r0 + h
        d = self.f(z_re, z_im, r1)
        new_re = 0.5 * (z_re + z_prev_re + hs * d.re)
        new_im = 0.5 * (z_im + z_prev_im + hs * d.im)
        if not (np.all(np.isfinite(new_re)) and np.all(np.isfinite(new_im))):
            raise IntegrationError(f"non-finite amplitude after step {step_index} (r = {r1!r})")
        ens.re[...] = new_re
        ens.im[...] = new_im
        ens.r = r1


def modified_midpoint_step(ens: Ensemble, config: StepConfig, physics: Physics, *, workers: int = 1,
                           chunk_size: int = DEFAULT_CHUNK_SIZE) -> Ensemble:
    """Advance a whole ensemble by one step in place and return it."""
    with Stepper(ens, physics, config, workers=workers, chunk_size=chunk_size) as stepper:
        stepper.step()
        if config.renormalize_every == 1:
            renormalize(ens)
    return ens


def steps_to(r_start: float, r_end: float, h: float) -> int:
    if r_end <= r_start:
        return 0
    return max(0, math.ceil((r_end - r_start) / h - 1e-9))


def run_steps(stepper: Stepper, n_steps: int | None, observers: Sequence[Observer] = (),
              first_step: int = 1, log_every: int = 0,
              should_stop: Callable[[int], bool] | None = None) -> Diagnostics:
    """Take ``n_steps`` steps, tracking norm drift and firing observers.

    Step indices passed to observers start at ``first_step``.  With
    ``should_stop``, stepping also ends once it returns true after a step;
    ``n_steps`` may then be ``None`` for no upper bound.
    """
    if n_steps is None and should_stop is None:
        raise ConfigError("run_steps needs n_steps or a stop condition")
    ens = stepper.ens
    cfg = stepper.config
    diag = Diagnostics()
    t0 = time.perf_counter()
    overlap0 = stepper.overlap_time
    k = first_step
    while n_steps is None or k < first_step + n_steps:
        stepper.step(k)
        norm = ens.norms()
        drift = float(np.max(np.abs(norm - 1.0))) if norm.size else 0.0
        diag.max_norm_drift = max(diag.max_norm_drift, drift)
        if cfg.renormalize_every and k % cfg.renormalize_every == 0:
            renormalize(ens)
            diag.renormalizations += 1
        diag.steps += 1
        for obs in observers:
            try:
                obs(k, ens)
            except BulbError:
                raise
            except Exception as exc:
                raise IntegrationError(f"observer {obs.name!r} failed at step {k} (r = {ens.r!r}): {exc}") from exc
        if log_every and k % log_every == 0:
            log.info("step=%d r=%.10g norm_drift=%.3e rank=%d", k, ens.r, drift, stepper.rank)
        if should_stop is not None and should_stop(k):
            break
        k += 1
    diag.wall_time = time.perf_counter() - t0
    diag.critical_path_time = max(diag.wall_time - (stepper.overlap_time - overlap0), 0.0)
    diag.moment_evaluations = stepper.moment_evaluations
    return diag


def evolve(ens: Ensemble, r_end: float, config: StepConfig, physics: Physics,
           observers: Sequence[Observer] = (), *, workers: int = 1,
           chunk_size: int = DEFAULT_CHUNK_SIZE, log_every: int = 0) -> tuple[Ensemble, Diagnostics]:
    """Step the whole ensemble in place until ``r >= r_end``."""
    n_steps = steps_to(ens.r, r_end, config.h)
    with Stepper(ens, physics, config, workers=workers, chunk_size=chunk_size) as stepper:
        diag = run_steps(stepper, n_steps, observers, log_every=log_every)
    return ens, diag
