"""Flavor amplitudes of the beam ensemble in structure-of-arrays layout.

Amplitude arrays have shape ``(2, n_theta_local, n_phi, n_flavors, n_energy)``
with species on the first axis (0 neutrinos, 1 antineutrinos).  Real and
imaginary parts live in separate C-contiguous arrays, so the energy axis of a
fixed (species, beam, flavor component) is one contiguous run of doubles.

Every beam carries the amplitude of the particle emitted in flavor 0.  For two
flavors the state of a particle emitted in flavor 1 follows by unitarity
(``rho_1 = 1 - rho_0``), which is how the remaining emission weights enter the
neutrino potential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import mpmath
import numpy as np

from bulbsim.errors import ConfigError, IntegrityError
from bulbsim.grid import Grid
from bulbsim.hermitian import HermitianMatrix

NEUTRINO, ANTINEUTRINO = 0, 1
SPECIES = (NEUTRINO, ANTINEUTRINO)
TRACKED_FLAVOR = 0


@dataclass(frozen=True)
class SpectrumParams:
    luminosity: float = 1.0
    mean_energy: float = 10.0
    eta: float = 0.0

    def __post_init__(self):
        if not self.luminosity >= 0:
            raise ConfigError(f"luminosity must be >= 0, got {self.luminosity!r}")
        if not self.mean_energy > 0:
            raise ConfigError(f"mean energy must be > 0, got {self.mean_energy!r}")


def _default_entries():
    return {
        (NEUTRINO, 0): SpectrumParams(1.0, 10.0),
        (ANTINEUTRINO, 0): SpectrumParams(1.0, 15.0),
        (NEUTRINO, 1): SpectrumParams(1.0, 20.0),
        (ANTINEUTRINO, 1): SpectrumParams(1.0, 20.0),
    }


@dataclass(frozen=True)
class Spectra:
    """Emission parameters keyed by ``(species, initial_flavor)``.

    Missing keys mean zero luminosity.
    """

    entries: dict = field(default_factory=_default_entries)

    def get(self, species: int, flavor: int) -> SpectrumParams:
        return self.entries.get((species, flavor), SpectrumParams(0.0, 1.0))


def fermi_dirac_temperature(mean_energy: float, eta: float = 0.0) -> float:
    """Temperature whose pinched Fermi-Dirac number spectrum has the given mean.

    Uses the complete Fermi integrals ``F_k(eta)``; for ``eta = 0`` the ratio
    ``F_3 / F_2`` is 3.15137.
    """
    f2 = -mpmath.gamma(3) * mpmath.polylog(3, -mpmath.exp(eta))
    f3 = -mpmath.gamma(4) * mpmath.polylog(4, -mpmath.exp(eta))
    return float(mean_energy * f2 / f3)


def spectrum_shape(e: np.ndarray, mean_energy: float, eta: float = 0.0) -> np.ndarray:
    """Unnormalized number spectrum ``E^2 / (exp(E/T - eta) + 1)``."""
    t = fermi_dirac_temperature(mean_energy, eta)
    # exp overflow for E/T >> 1 just yields 0, which is the right limit
    with np.errstate(over="ignore"):
        return e * e / (np.exp(e / t - eta) + 1.0)


def normalized_spectrum(grid: Grid, params: SpectrumParams) -> np.ndarray:
    """Spectrum values scaled so that ``sum(f * dE) == 1`` on the energy grid."""
    f = spectrum_shape(grid.e_nodes, params.mean_energy, params.eta)
    total = float(np.sum(f * grid.e_weights))
    if total <= 0:
        raise ConfigError(f"spectrum with mean energy {params.mean_energy} vanishes on the energy grid")
    return f / total


@dataclass(eq=False)
class Ensemble:
    grid: Grid
    re: np.ndarray
    im: np.ndarray
    weights: np.ndarray  # (2, n_flavors, n_theta_local, n_phi, n_energy)
    r: float
    theta_offset: int = 0

    @property
    def n_theta_local(self) -> int:
        return self.re.shape[1]

    @property
    def theta_slice(self) -> slice:
        return slice(self.theta_offset, self.theta_offset + self.n_theta_local)

    def copy(self) -> "Ensemble":
        return Ensemble(self.grid, self.re.copy(), self.im.copy(), self.weights, self.r, self.theta_offset)

    def slice(self, theta_start: int, theta_count: int) -> "Ensemble":
        """Independent copy of local theta bins ``[theta_start, theta_start + count)``."""
        if theta_start < 0 or theta_count < 0 or theta_start + theta_count > self.n_theta_local:
            raise IndexError(f"theta range [{theta_start}, {theta_start + theta_count}) outside "
                             f"[0, {self.n_theta_local})")
        sl = slice(theta_start, theta_start + theta_count)
        return Ensemble(
            self.grid,
            np.ascontiguousarray(self.re[:, sl]),
            np.ascontiguousarray(self.im[:, sl]),
            np.ascontiguousarray(self.weights[:, :, sl]),
            self.r,
            self.theta_offset + theta_start,
        )

    def amplitudes(self) -> np.ndarray:
        """Complex view (a copy) with the same shape as ``re``."""
        return self.re + 1j * self.im

    def norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.re * self.re + self.im * self.im, axis=3))


def concatenate(parts: list[Ensemble]) -> Ensemble:
    """Join theta slices that tile a contiguous range, ordered by offset."""
    parts = sorted(parts, key=lambda e: e.theta_offset)
    for a, b in zip(parts, parts[1:]):
        if a.theta_offset + a.n_theta_local != b.theta_offset:
            raise IntegrityError("ensemble slices are not contiguous")
    return Ensemble(
        parts[0].grid,
        np.concatenate([p.re for p in parts], axis=1),
        np.concatenate([p.im for p in parts], axis=1),
        np.concatenate([p.weights for p in parts], axis=2),
        parts[0].r,
        parts[0].theta_offset,
    )


def emission_weights(grid: Grid, spectra: Spectra) -> np.ndarray:
    """Number-flux weights ``f(E) dE * du * dphi * L / <E>`` for every bin."""
    n = grid.n_flavors
    w = np.zeros((2, n, grid.n_theta, grid.n_phi, grid.n_energy))
    angular = grid.u_weights[:, None] * grid.phi_weights[None, :]
    for s in SPECIES:
        for a in range(n):
            params = spectra.get(s, a)
            if params.luminosity == 0:
                continue
            per_energy = normalized_spectrum(grid, params) * grid.e_weights
            scale = params.luminosity / params.mean_energy
            w[s, a] = (angular[:, :, None] * per_energy[None, None, :]) * scale
    return w


def init_ensemble(grid: Grid, spectra: Spectra | None = None, *, weights: np.ndarray | None = None) -> Ensemble:
    """Pure flavor-0 states on every beam at ``r = R``.

    ``weights`` overrides the spectrum-derived emission weights; it must have
    shape ``(2, n_flavors, n_theta, n_phi, n_energy)``.
    """
    if weights is None:
        weights = emission_weights(grid, spectra if spectra is not None else Spectra())
    else:
        weights = np.array(weights, dtype=np.float64)
        expected = (2, grid.n_flavors, grid.n_theta, grid.n_phi, grid.n_energy)
        if weights.shape != expected:
            raise ConfigError(f"weights must have shape {expected}, got {weights.shape}")
        if np.any(weights < 0):
            raise ConfigError("emission weights must be nonnegative")
    shape = (2, grid.n_theta, grid.n_phi, grid.n_flavors, grid.n_energy)
    re = np.zeros(shape)
    im = np.zeros(shape)
    re[:, :, :, TRACKED_FLAVOR, :] = 1.0
    return Ensemble(grid, re, im, weights, grid.radius_ns, 0)


def _check_index(ens: Ensemble, species: int, beam: tuple[int, int], energy_index: int) -> None:
    t, p = beam
    if species not in SPECIES:
        raise IndexError(f"species {species} out of range")
    if not (0 <= t < ens.n_theta_local and 0 <= p < ens.grid.n_phi):
        raise IndexError(f"beam {beam} out of range")
    if not 0 <= energy_index < ens.grid.n_energy:
        raise IndexError(f"energy index {energy_index} out of range")


def density_matrix(ens: Ensemble, species: int, beam: tuple[int, int], energy_index: int) -> HermitianMatrix:
    """Outer product ``psi psi^dagger`` of one amplitude vector."""
    _check_index(ens, species, beam, energy_index)
    t, p = beam
    pr = ens.re[species, t, p, :, energy_index]
    pi = ens.im[species, t, p, :, energy_index]
    # (pr_a + i pi_a)(pr_b - i pi_b)
    re = np.outer(pr, pr) + np.outer(pi, pi)
    im = np.outer(pi, pr) - np.outer(pr, pi)
    return HermitianMatrix(re, im)


def survival_probability(ens: Ensemble, species: int, beam: tuple[int, int], energy_index: int,
                         flavor: int) -> float:
    _check_index(ens, species, beam, energy_index)
    if not 0 <= flavor < ens.grid.n_flavors:
        raise IndexError(f"flavor {flavor} out of range")
    t, p = beam
    a = ens.re[species, t, p, flavor, energy_index]
    b = ens.im[species, t, p, flavor, energy_index]
    return float(a * a + b * b)


def renormalize(ens: Ensemble) -> float:
    """Rescale every amplitude vector to unit norm in place.

    Returns the largest ``|norm - 1|`` seen before rescaling.  Vectors whose
    norm is exactly 1.0 are left untouched.
    """
    norm = ens.norms()
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise IntegrityError("zero-norm or non-finite amplitude vector in ensemble")
    deviation = float(np.max(np.abs(norm - 1.0))) if norm.size else 0.0
    if deviation == 0.0:
        return 0.0
    scale = np.where(norm == 1.0, 1.0, norm)[:, :, :, None, :]
    np.divide(ens.re, scale, out=ens.re)
    np.divide(ens.im, scale, out=ens.im)
    return deviation


def random_ensemble(grid: Grid, rng: np.random.Generator, *, r: float | None = None) -> Ensemble:
    """Normalized random amplitudes and random nonnegative weights (test fixture)."""
    shape = (2, grid.n_theta, grid.n_phi, grid.n_flavors, grid.n_energy)
    z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    z /= np.sqrt(np.sum(np.abs(z) ** 2, axis=3, keepdims=True))
    w = rng.uniform(0.0, 1.0, (2, grid.n_flavors, grid.n_theta, grid.n_phi, grid.n_energy))
    return Ensemble(grid, np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag), w,
                    grid.radius_ns if r is None else float(r), 0)


def total_weight(ens: Ensemble, species: int, flavor: int) -> float:
    return math.fsum(ens.weights[species, flavor].ravel())
