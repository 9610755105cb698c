"""Vacuum Hamiltonian and the self-coupling potential of the neutrino gas.

The forward-scattering kernel ``1 - v.v'`` separates into a zeroth moment and
three first (direction-weighted) moments of the weighted density matrices,

    H_nu(v) = mu0 * (R/r)^2 * [M0 - vx*Mx - vy*My - vz*Mz],

so the potential seen by every beam comes from four accumulated matrices per
species instead of a pairwise sum over beams.  Antineutrinos enter the
moments as ``-w * conj(rho)``.

Moment accumulation has a fixed summation order: energy bins innermost, then
phi bins, then theta bins within a reduction chunk, then chunks in ascending
global index.  Chunk boundaries sit at global theta indices that are
multiples of ``chunk_size`` and do not depend on how theta bins are spread
across ranks or workers, which makes every reduction bitwise reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from bulbsim import kernels
from bulbsim.errors import ConfigError, DomainError, IntegrityError, SingularityError
from bulbsim.grid import local_angle
from bulbsim.hermitian import HermitianMatrix, hermitize
from bulbsim.state import ANTINEUTRINO, NEUTRINO, Ensemble

DEFAULT_CHUNK_SIZE = 8
DEFAULT_COS_THETA_FLOOR = 1e-6

MatterProfile = Union[float, Callable[[float], float]]


@dataclass(frozen=True)
class VacuumParams:
    delta_m2: float = 1.0
    theta_v: float = 0.15
    matter_potential: MatterProfile = 0.0

    def __post_init__(self):
        if not 0.0 <= self.theta_v <= math.pi / 2:
            raise ConfigError(f"theta_v must lie in [0, pi/2], got {self.theta_v!r}")

    def matter(self, r: float | None) -> float:
        lam = self.matter_potential
        if callable(lam):
            if r is None:
                raise ValueError("a radius is required to evaluate a matter profile")
            return float(lam(r))
        return float(lam)


def tabulated_profile(radii, values) -> Callable[[float], float]:
    """Piecewise-linear matter potential; constant beyond the table ends."""
    radii = np.asarray(radii, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if radii.ndim != 1 or radii.shape != values.shape or radii.size < 1:
        raise ConfigError("matter profile needs matching 1-d radius and value tables")
    if np.any(np.diff(radii) <= 0):
        raise ConfigError("matter profile radii must be strictly increasing")

    def profile(r: float) -> float:
        return float(np.interp(r, radii, values))

    return profile


def upper_pairs(n: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(n) for b in range(a, n)]


# --------------------------------------------------------------------------
# vacuum term


def vacuum_terms(params: VacuumParams, energies: np.ndarray, r: float | None = None,
                 n_flavors: int = 2) -> np.ndarray:
    """Real vacuum+matter Hamiltonians, shape ``(2, n, n, n_energy)``.

    Index 0 is the neutrino Hamiltonian, index 1 the antineutrino one
    (conjugated vacuum term, matter sign flipped).  The two-flavor vacuum
    term is real, so no imaginary part is returned.
    """
    if n_flavors != 2:
        raise ConfigError(f"vacuum Hamiltonian is implemented for 2 flavors only, got {n_flavors}")
    e = np.asarray(energies, dtype=np.float64)
    if np.any(e <= 0):
        raise DomainError("neutrino energy must be > 0")
    omega = params.delta_m2 / (4.0 * e)
    c2 = math.cos(2.0 * params.theta_v)
    s2 = math.sin(2.0 * params.theta_v)
    lam = params.matter(r)
    h = np.empty((2, 2, 2, e.size))
    h[:, 0, 0] = -c2 * omega
    h[:, 0, 1] = s2 * omega
    h[:, 1, 0] = s2 * omega
    h[:, 1, 1] = c2 * omega
    h[NEUTRINO, 0, 0] += lam
    h[ANTINEUTRINO, 0, 0] -= lam
    return h


def vacuum_hamiltonian(params: VacuumParams, energy: float, species: int = NEUTRINO,
                       r: float | None = None, n_flavors: int = 2) -> HermitianMatrix:
    if energy <= 0:
        raise DomainError(f"neutrino energy must be > 0, got {energy!r}")
    h = vacuum_terms(params, np.array([energy]), r, n_flavors)
    return HermitianMatrix(h[species, :, :, 0])


# --------------------------------------------------------------------------
# moments
#
# Moments travel in a packed layout: trailing axes ``(4, n_pairs, 2)`` hold
# [M0, Mx, My, Mz], the upper-triangle flavor pairs, and (real, imag).  All
# accumulation is done in double-double arithmetic (see ``kernels``): the
# potential is a difference of moments that can cancel strongly (neutrinos
# against antineutrinos, nearly parallel beams), and plain doubles would lose
# the agreement with a direct pairwise evaluation.


@dataclass(eq=False)
class MomentSet:
    """Accumulated moments at radius ``r``.

    ``hi``/``lo`` are the double-double parts in the packed layout with a
    leading species axis, shape ``(2, 4, n_pairs, 2)``.  The antineutrino
    slot already carries the ``-conj`` convention, so the total is the plain
    sum over species.
    """

    r: float
    hi: np.ndarray
    lo: np.ndarray
    n_flavors: int

    @classmethod
    def zeros(cls, r: float, n_flavors: int) -> "MomentSet":
        shape = (2, 4, len(upper_pairs(n_flavors)), 2)
        return cls(float(r), np.zeros(shape), np.zeros(shape), n_flavors)

    def __add__(self, other: "MomentSet") -> "MomentSet":
        if other.r != self.r:
            raise IntegrityError(f"cannot add moments at radii {self.r!r} and {other.r!r}")
        hi, lo = kernels.add_arrays(self.hi.ravel(), self.lo.ravel(), other.hi.ravel(), other.lo.ravel())
        return MomentSet(self.r, hi.reshape(self.hi.shape), lo.reshape(self.lo.shape), self.n_flavors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MomentSet):
            return NotImplemented
        return (self.r == other.r and np.array_equal(self.hi, other.hi)
                and np.array_equal(self.lo, other.lo))

    def _unpack(self, part: int) -> np.ndarray:
        n = self.n_flavors
        out = np.zeros((2, 4, n, n))
        for k, (a, b) in enumerate(upper_pairs(n)):
            out[:, :, a, b] = self.hi[:, :, k, part]
        return out

    @property
    def re(self) -> np.ndarray:
        """Full matrices ``(2, 4, n, n)``, rounded to double."""
        re, _ = hermitize(self._unpack(0), self._unpack(1))
        return re

    @property
    def im(self) -> np.ndarray:
        _, im = hermitize(self._unpack(0), self._unpack(1))
        return im

    def matrix(self, species: int, moment: int) -> HermitianMatrix:
        return HermitianMatrix(self.re[species, moment], self.im[species, moment])

    def is_zero(self) -> bool:
        return not (np.any(self.hi) or np.any(self.lo))


def check_weights(weights: np.ndarray) -> None:
    """Only two-flavor ensembles may carry emission in flavors other than 0.

    Every beam tracks the state of particles emitted in flavor 0.  For two
    flavors ``rho_1 = 1 - rho_0``, so ``sum_a w_a rho_a`` becomes
    ``(w_0 - w_1) rho_0 + w_1 * 1``; with more flavors the other states are
    not determined by the tracked one.
    """
    if weights.shape[1] != 2 and np.any(weights[:, 1:]):
        raise ConfigError("emission from flavors other than 0 needs n_flavors == 2")


def theta_bin_moments(ens: Ensemble, r: float, local: slice = slice(None)):
    """Per-theta-bin moments summed over energy, then phi.

    Returns double-double ``(hi, lo)`` of shape ``(T, 2, 4, n_pairs, 2)`` for
    the local theta bins selected by ``local``.
    """
    return bin_moments(ens.grid, ens.re, ens.im, ens.weights, ens.theta_offset, r, local)


def bin_moments(grid, re: np.ndarray, im: np.ndarray, weights: np.ndarray, theta_offset: int, r: float,
                local: slice = slice(None)):
    """Array-level form of :func:`theta_bin_moments` for intermediate states."""
    start, stop, _ = local.indices(re.shape[1])
    gsl = slice(theta_offset + start, theta_offset + stop)
    check_weights(weights)
    n = re.shape[3]
    pairs = upper_pairs(n)
    ia = np.array([a for a, _ in pairs], dtype=np.int64)
    ib = np.array([b for _, b in pairs], dtype=np.int64)
    vx, vy, vz = grid.directions(r, gsl)
    shape = (stop - start, 2, 4, len(pairs), 2)
    out_hi = np.empty(shape)
    out_lo = np.empty(shape)
    kernels.bin_moments(re[:, start:stop], im[:, start:stop], weights[:, :, start:stop],
                        vx, vy, vz, ia, ib, out_hi, out_lo)
    return out_hi, out_lo


def chunk_ids(global_start: int, count: int, chunk_size: int) -> np.ndarray:
    return (global_start + np.arange(count)) // chunk_size


def chunk_partials(bin_hi: np.ndarray, bin_lo: np.ndarray, global_start: int, chunk_size: int):
    """Sum per-bin moments within each global chunk in ascending theta order.

    Returns ``(chunk_indices, hi, lo)`` with one row per touched chunk.  A
    chunk only partly covered by the given bins yields the partial over the
    covered bins.  Zero padding is used to vectorize across chunks; adding
    +0.0 to an accumulator that starts at +0.0 is exact, so padding never
    changes a bit.
    """
    if chunk_size < 1:
        raise ConfigError("chunk_size must be >= 1")
    count = bin_hi.shape[0]
    if count == 0:
        return np.zeros(0, dtype=np.int64), bin_hi[:0], bin_lo[:0]
    first = global_start // chunk_size
    last = (global_start + count - 1) // chunk_size
    n_chunks = last - first + 1
    pad_front = global_start - first * chunk_size
    padded_shape = (n_chunks * chunk_size,) + bin_hi.shape[1:]
    p_hi = np.zeros(padded_shape)
    p_lo = np.zeros(padded_shape)
    p_hi[pad_front:pad_front + count] = bin_hi
    p_lo[pad_front:pad_front + count] = bin_lo
    tail = bin_hi.shape[1:]
    c_hi, c_lo = kernels.chunk_sums(p_hi.reshape(n_chunks, chunk_size, -1),
                                    p_lo.reshape(n_chunks, chunk_size, -1))
    return np.arange(first, last + 1), c_hi.reshape((n_chunks,) + tail), c_lo.reshape((n_chunks,) + tail)


def fold_chunks(c_hi: np.ndarray, c_lo: np.ndarray, r: float, n_flavors: int) -> MomentSet:
    """Left fold of chunk partials given in ascending chunk order."""
    hi, lo = seq_sum(c_hi, c_lo)
    return MomentSet(float(r), hi, lo, n_flavors)


def seq_sum(hi: np.ndarray, lo: np.ndarray):
    """Double-double left fold over the first axis."""
    tail = hi.shape[1:]
    k = hi.shape[0]
    s_hi, s_lo = kernels.seq_sum_rows(np.ascontiguousarray(hi).reshape(k, -1),
                                      np.ascontiguousarray(lo).reshape(k, -1))
    return s_hi.reshape(tail), s_lo.reshape(tail)


def accumulate_moments(ens: Ensemble, theta_range: tuple[int, int] | None = None, r: float | None = None,
                       chunk_size: int = DEFAULT_CHUNK_SIZE) -> MomentSet:
    """Moments over local theta bins ``[start, stop)`` of ``ens``.

    ``r`` defaults to (and must equal) ``ens.r``.
    """
    if r is None:
        r = ens.r
    elif r != ens.r:
        raise IntegrityError(f"moments requested at r={r!r} but ensemble is at r={ens.r!r}")
    start, stop = (0, ens.n_theta_local) if theta_range is None else theta_range
    if not 0 <= start <= stop <= ens.n_theta_local:
        raise IndexError(f"theta range [{start}, {stop}) outside [0, {ens.n_theta_local})")
    bin_hi, bin_lo = theta_bin_moments(ens, r, slice(start, stop))
    _, c_hi, c_lo = chunk_partials(bin_hi, bin_lo, ens.theta_offset + start, chunk_size)
    return fold_chunks(c_hi, c_lo, r, ens.grid.n_flavors)


# --------------------------------------------------------------------------
# potential


def dilution(r: float, radius_ns: float) -> float:
    return (radius_ns / r) ** 2


def potential_pairs(moments: MomentSet, vx, vy, vz, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Upper-triangle entries of ``scale * [M0 - v.M1]`` for arrays of directions.

    Output ``(re, im)`` arrays have shape ``vx.shape + (n_pairs,)``.
    """
    h = potential_packed(moments, vx, vy, vz, scale)
    return h[..., 0], h[..., 1]


def potential_packed(moments: MomentSet, vx, vy, vz, scale: float) -> np.ndarray:
    """Like :func:`potential_pairs` but packed as ``shape + (n_pairs, 2)``."""
    vx = np.asarray(vx, dtype=np.float64)
    shape = vx.shape
    flat = [np.ascontiguousarray(np.broadcast_to(np.asarray(v, dtype=np.float64), shape)).reshape(-1)
            if not (isinstance(v, np.ndarray) and v.shape == shape and v.flags.c_contiguous) else v.reshape(-1)
            for v in (vx, vy, vz)]
    n_pairs = moments.hi.shape[2]
    out = np.empty((flat[0].size, n_pairs, 2))
    kernels.potential(moments.hi, moments.lo, flat[0], flat[1], flat[2], float(scale), out)
    return out.reshape(shape + (n_pairs, 2))


def neutrino_potential(moments: MomentSet, beam_i: tuple[float, float], r: float, *, mu0: float,
                       radius_ns: float) -> HermitianMatrix:
    """Self-coupling potential felt by a neutrino on beam ``(u, phi)`` at ``r``."""
    if moments.r != r:
        raise IntegrityError(f"moments were accumulated at r={moments.r!r}, requested r={r!r}")
    cos_t, sin_t = local_angle(beam_i[0], r, radius_ns)
    phi = beam_i[1]
    vx, vy, vz = sin_t * math.cos(phi), sin_t * math.sin(phi), cos_t
    return potential_from_direction(moments, (vx, vy, vz), mu0 * dilution(r, radius_ns))


def potential_from_direction(moments: MomentSet, v: tuple[float, float, float], scale: float) -> HermitianMatrix:
    h_re, h_im = potential_pairs(moments, *v, scale)
    n = moments.n_flavors
    re = np.zeros((n, n))
    im = np.zeros((n, n))
    for k, (a, b) in enumerate(upper_pairs(n)):
        re[a, b] = h_re[k]
        im[a, b] = h_im[k]
    return HermitianMatrix(re, im)


def effective_hamiltonian(h0: HermitianMatrix, hnu: HermitianMatrix, cos_theta_i: float,
                          cos_theta_floor: float = DEFAULT_COS_THETA_FLOOR) -> HermitianMatrix:
    """Generator of radial evolution, ``(H0 + Hnu) / cos(theta)``."""
    if not cos_theta_i > cos_theta_floor:
        raise SingularityError(f"cos(theta) = {cos_theta_i!r} is at or below the floor {cos_theta_floor!r}")
    return (h0 + hnu) / cos_theta_i
