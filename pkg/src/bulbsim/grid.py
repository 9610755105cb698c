"""Angular and energy discretization of the extended bulb model.

Beams are labeled by ``u = sin^2(theta_0)``, the emission angle at the
neutrinosphere.  A beam emitted at ``u`` crosses radius ``r`` at the local
polar angle given by ``sin(theta) = (R / r) * sqrt(u)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from bulbsim.errors import ConfigError, DomainError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class GridConfig:
    n_theta: int = 10000
    n_phi: int = 10
    n_energy: int = 100
    n_flavors: int = 2
    radius: float = 10.0
    e_min: float = 1.0
    e_max: float = 50.0


@dataclass(frozen=True, eq=False)
class Grid:
    """Immutable bin layout.  Arrays are read-only so the grid can be shared."""

    n_theta: int
    n_phi: int
    n_energy: int
    n_flavors: int
    radius_ns: float
    e_min: float
    e_max: float
    u_nodes: np.ndarray
    phi_nodes: np.ndarray
    e_nodes: np.ndarray
    u_weights: np.ndarray
    phi_weights: np.ndarray
    e_weights: np.ndarray
    cos_phi: np.ndarray = field(init=False, repr=False)
    sin_phi: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("u_nodes", "phi_nodes", "e_nodes", "u_weights", "phi_weights", "e_weights"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        cos_phi = np.cos(self.phi_nodes)
        sin_phi = np.sin(self.phi_nodes)
        cos_phi.setflags(write=False)
        sin_phi.setflags(write=False)
        object.__setattr__(self, "cos_phi", cos_phi)
        object.__setattr__(self, "sin_phi", sin_phi)
        _check_grid(self)

    @classmethod
    def from_nodes(cls, u_nodes, phi_nodes, e_nodes, *, radius: float, n_flavors: int = 2,
                   u_weights=None, phi_weights=None, e_weights=None) -> "Grid":
        """Grid with explicit nodes, e.g. a single radial beam at ``u = 0``.

        Missing weights default to ``1/n_theta``, ``2*pi/n_phi`` and ``1`` per
        energy node.
        """
        u = np.atleast_1d(np.asarray(u_nodes, dtype=np.float64))
        p = np.atleast_1d(np.asarray(phi_nodes, dtype=np.float64))
        e = np.atleast_1d(np.asarray(e_nodes, dtype=np.float64))
        if u_weights is None:
            u_weights = np.full(u.size, 1.0 / u.size)
        if phi_weights is None:
            phi_weights = np.full(p.size, TWO_PI / p.size)
        if e_weights is None:
            e_weights = np.ones(e.size)
        e_weights = np.asarray(e_weights, dtype=np.float64)
        # nominal range: half a bin beyond the outer nodes, kept positive
        e_min = max(float(e[0] - 0.5 * e_weights[0]), 0.5 * float(e[0]))
        e_max = float(e[-1] + 0.5 * e_weights[-1])
        return cls(
            n_theta=u.size, n_phi=p.size, n_energy=e.size, n_flavors=int(n_flavors),
            radius_ns=float(radius), e_min=e_min, e_max=e_max,
            u_nodes=u, phi_nodes=p, e_nodes=e,
            u_weights=np.asarray(u_weights, dtype=np.float64),
            phi_weights=np.asarray(phi_weights, dtype=np.float64),
            e_weights=e_weights,
        )

    def local_angles(self, r: float, theta_slice: slice = slice(None)) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized :func:`local_angle` over the ``theta_slice`` bins."""
        u = self.u_nodes[theta_slice]
        if r < self.radius_ns:
            raise DomainError(f"radius {r!r} is inside the neutrinosphere (R={self.radius_ns!r})")
        ratio = self.radius_ns / r
        sin_t = ratio * np.sqrt(u)
        cos_t = np.sqrt(1.0 - (ratio * ratio) * u)
        return cos_t, sin_t

    def directions(self, r: float, theta_slice: slice = slice(None)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cartesian unit vectors of every (theta, phi) beam at radius ``r``.

        Local frame: z is radial, phi is measured about the radial axis.
        Each returned array has shape ``(n_theta_selected, n_phi)``.
        """
        return self.beam_geometry(r, theta_slice)[1:]

    def beam_geometry(self, r: float, theta_slice: slice = slice(None)):
        """``(cos_theta, vx, vy, vz)``: :meth:`local_angles` and :meth:`directions` in one pass."""
        cos_t, sin_t = self.local_angles(r, theta_slice)
        vx = sin_t[:, None] * self.cos_phi[None, :]
        vy = sin_t[:, None] * self.sin_phi[None, :]
        vz = np.repeat(cos_t[:, None], self.n_phi, axis=1)
        return cos_t, vx, vy, vz


def _check_grid(g: Grid) -> None:
    if g.n_theta < 1 or g.n_phi < 1 or g.n_energy < 1:
        raise ConfigError("grid counts must be >= 1")
    if g.n_flavors < 2:
        raise ConfigError(f"n_flavors must be >= 2, got {g.n_flavors}")
    if not g.radius_ns > 0:
        raise ConfigError(f"radius must be > 0, got {g.radius_ns}")
    if not 0 < g.e_min < g.e_max:
        raise ConfigError(f"energy range must satisfy 0 < e_min < e_max, got ({g.e_min}, {g.e_max})")
    for name, n in (("u", g.n_theta), ("phi", g.n_phi), ("e", g.n_energy)):
        nodes = getattr(g, f"{name}_nodes")
        weights = getattr(g, f"{name}_weights")
        if nodes.shape != (n,) or weights.shape != (n,):
            raise ConfigError(f"{name} nodes/weights must have length {n}")
        if n > 1 and not np.all(np.diff(nodes) > 0):
            raise ConfigError(f"{name}_nodes must be strictly increasing")
        if not np.all(weights > 0):
            raise ConfigError(f"{name}_weights must be positive")
    if g.u_nodes[0] < 0 or g.u_nodes[-1] > 1:
        raise ConfigError("u_nodes must lie in [0, 1]")
    if g.phi_nodes[0] < 0 or g.phi_nodes[-1] >= TWO_PI:
        raise ConfigError("phi_nodes must lie in [0, 2*pi)")


def check_grid_config(config: GridConfig) -> None:
    """Raise :class:`ConfigError` naming the first invalid ``grid.*`` field."""
    for name in ("n_theta", "n_phi", "n_energy"):
        value = getattr(config, name)
        if not isinstance(value, (int, np.integer)) or value < 1:
            raise ConfigError(f"grid.{name} must be an integer >= 1, got {value!r}")
    if config.n_flavors < 2:
        raise ConfigError(f"grid.n_flavors must be >= 2, got {config.n_flavors!r}")
    if not config.radius > 0:
        raise ConfigError(f"grid.radius must be > 0, got {config.radius!r}")
    if not 0 < config.e_min < config.e_max:
        raise ConfigError(f"grid.e_min/grid.e_max must satisfy 0 < e_min < e_max, "
                          f"got ({config.e_min!r}, {config.e_max!r})")


def build_grid(config: GridConfig) -> Grid:
    """Uniform midpoint bins in u, phi and E; weights are the bin widths."""
    check_grid_config(config)
    du = 1.0 / config.n_theta
    dphi = TWO_PI / config.n_phi
    de = (config.e_max - config.e_min) / config.n_energy
    mid_t = np.arange(config.n_theta) + 0.5
    mid_p = np.arange(config.n_phi) + 0.5
    mid_e = np.arange(config.n_energy) + 0.5
    return Grid(
        n_theta=config.n_theta, n_phi=config.n_phi, n_energy=config.n_energy,
        n_flavors=config.n_flavors, radius_ns=float(config.radius),
        e_min=float(config.e_min), e_max=float(config.e_max),
        u_nodes=mid_t * du,
        phi_nodes=mid_p * dphi,
        e_nodes=config.e_min + mid_e * de,
        u_weights=np.full(config.n_theta, du),
        phi_weights=np.full(config.n_phi, dphi),
        e_weights=np.full(config.n_energy, de),
    )


def local_angle(u: float, r: float, radius_ns: float) -> tuple[float, float]:
    """Return ``(cos_theta, sin_theta)`` at radius ``r`` for emission variable ``u``."""
    if r < radius_ns:
        raise DomainError(f"radius {r!r} is inside the neutrinosphere (R={radius_ns!r})")
    if not 0.0 <= u <= 1.0:
        raise DomainError(f"u = sin^2(theta_0) must lie in [0, 1], got {u!r}")
    ratio = radius_ns / r
    return math.sqrt(1.0 - ratio * ratio * u), ratio * math.sqrt(u)


def angle_factor(beam_i: tuple[float, float], beam_j: tuple[float, float], r: float,
                 radius_ns: float) -> float:
    """``1 - v_i . v_j`` for beams given as ``(u, phi)`` pairs.

    Evaluated as half the squared chord ``|v_i - v_j|^2 / 2`` so that the
    result is exactly symmetric, exactly zero for identical beams and free of
    cancellation for nearly parallel beams at large radius.
    """
    ci, si = local_angle(beam_i[0], r, radius_ns)
    cj, sj = local_angle(beam_j[0], r, radius_ns)
    ratio2 = (radius_ns / r) ** 2
    # ci - cj without cancellation: (cj^2 - ci^2) / (ci + cj)
    denom = ci + cj
    dz = ratio2 * (beam_j[0] - beam_i[0]) / denom if denom > 0 else 0.0
    dx = si * math.cos(beam_i[1]) - sj * math.cos(beam_j[1])
    dy = si * math.sin(beam_i[1]) - sj * math.sin(beam_j[1])
    return 0.5 * (dx * dx + dy * dy + dz * dz)
