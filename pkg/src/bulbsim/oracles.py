"""Reference computations behind ``bulbsim validate``.

These are slow, direct evaluations used to check the fast paths: the closed
form two-flavor vacuum oscillation, an exact rational pairwise sum for the
neutrino potential, and a thread/rank determinism comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from bulbsim.grid import Grid, GridConfig, build_grid
from bulbsim.hamiltonian import VacuumParams, accumulate_moments, dilution, potential_pairs, upper_pairs
from bulbsim.integrator import Physics, StepConfig, Stepper, run_steps
from bulbsim.state import Ensemble, init_ensemble, random_ensemble, survival_probability


def vacuum_survival(theta_v: float, delta_m2: float, energy: float, length: float) -> float:
    """``1 - sin^2(2 theta_v) sin^2(delta_m2 L / 4E)``."""
    return 1.0 - math.sin(2 * theta_v) ** 2 * math.sin(delta_m2 * length / (4 * energy)) ** 2


def vacuum_amplitudes(theta_v: float, delta_m2: float, energy: float, length: float) -> np.ndarray:
    """Exact ``exp(-i H0 L) (1, 0)`` for the two-flavor vacuum Hamiltonian."""
    omega = delta_m2 / (4 * energy)
    c, s = math.cos(2 * theta_v), math.sin(2 * theta_v)
    h = omega * np.array([[-c, s], [s, c]])
    w, v = np.linalg.eigh(h)
    u = v @ np.diag(np.exp(-1j * w * length)) @ v.conj().T
    return u @ np.array([1.0, 0.0])


def radial_beam_grid(energy: float = 1.0, radius: float = 10.0) -> Grid:
    """One radial beam (u = 0) at a single energy."""
    return Grid.from_nodes([0.0], [math.pi], [energy], radius=radius)


def evolve_vacuum(theta_v: float, delta_m2: float, energy: float, length: float, n_steps: int,
                  n_substeps: int = 8) -> Ensemble:
    """Integrate a single radial neutrino over ``length`` with ``n_steps`` equal steps."""
    grid = radial_beam_grid(energy)
    ens = init_ensemble(grid, weights=np.zeros((2, 2, 1, 1, 1)))
    cfg = StepConfig(h=length / n_steps, n_substeps=n_substeps)
    physics = Physics(VacuumParams(delta_m2, theta_v, 0.0), mu0=0.0)
    with Stepper(ens, physics, cfg) as stepper:
        run_steps(stepper, n_steps)
    return ens


def exact_potential(ens: Ensemble, r: float, mu0: float) -> list:
    """Pairwise ``mu0 (R/r)^2 sum_j (1 - v_i.v_j) C_j`` in exact rationals.

    ``C_j`` is the weighted density term of beam ``j`` (antineutrinos with the
    ``-(w conj(rho) + w_1 1)`` convention, flavor-1 emission by unitarity).
    Directions are the grid's floating-point unit vectors, taken exactly.
    Returns, per (theta, phi) beam, a dict ``(a, b) -> (re, im)`` of exactly
    rounded doubles.
    """
    grid = ens.grid
    n = grid.n_flavors
    vx, vy, vz = grid.directions(r)
    terms = []
    for s in range(2):
        for j in range(ens.n_theta_local):
            for q in range(grid.n_phi):
                cr = {p: Fraction(0) for p in upper_pairs(n)}
                ci = {p: Fraction(0) for p in upper_pairs(n)}
                for k in range(grid.n_energy):
                    pr = [Fraction(float(ens.re[s, j, q, a, k])) for a in range(n)]
                    pi = [Fraction(float(ens.im[s, j, q, a, k])) for a in range(n)]
                    w0 = Fraction(float(ens.weights[s, 0, j, q, k]))
                    w1 = Fraction(float(ens.weights[s, 1, j, q, k])) if n == 2 else Fraction(0)
                    for a, b in upper_pairs(n):
                        rr = pr[a] * pr[b] + pi[a] * pi[b]
                        ri = pi[a] * pr[b] - pr[a] * pi[b]
                        re_term = w0 * rr + w1 * ((1 if a == b else 0) - rr)
                        im_term = w0 * ri - w1 * ri
                        cr[a, b] += -re_term if s == 1 else re_term
                        ci[a, b] += im_term
                v = (Fraction(float(vx[j, q])), Fraction(float(vy[j, q])), Fraction(float(vz[j, q])))
                terms.append((v, cr, ci))
    scale = Fraction(mu0 * dilution(r, grid.radius_ns))
    out = []
    for i in range(ens.n_theta_local):
        for p in range(grid.n_phi):
            vi = (Fraction(float(vx[i, p])), Fraction(float(vy[i, p])), Fraction(float(vz[i, p])))
            entry = {}
            for ab in upper_pairs(n):
                er = ei = Fraction(0)
                for vj, cr, ci in terms:
                    kern = 1 - (vi[0] * vj[0] + vi[1] * vj[1] + vi[2] * vj[2])
                    er += kern * cr[ab]
                    ei += kern * ci[ab]
                entry[ab] = (float(er * scale), float(ei * scale))
            out.append(entry)
    return out


def ulp_distance(got: float, exact: float) -> float:
    if got == exact:
        return 0.0
    if exact == 0.0:
        return math.inf
    return abs(got - exact) / math.ulp(abs(exact))


def potential_ulp_error(ens: Ensemble, r: float, mu0: float = 1.0) -> float:
    """Worst per-entry ulp distance of the moment path from :func:`exact_potential`."""
    grid = ens.grid
    moments = accumulate_moments(ens, r=r)
    vx, vy, vz = grid.directions(r)
    h_re, h_im = potential_pairs(moments, vx, vy, vz, mu0 * dilution(r, grid.radius_ns))
    exact = exact_potential(ens, r, mu0)
    worst = 0.0
    for idx, entry in enumerate(exact):
        i, p = divmod(idx, grid.n_phi)
        for k, ab in enumerate(upper_pairs(grid.n_flavors)):
            worst = max(worst, ulp_distance(float(h_re[i, p, k]), entry[ab][0]),
                        ulp_distance(float(h_im[i, p, k]), entry[ab][1]))
    return worst


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def run_validation(trials: int = 10) -> list[Check]:
    """Vacuum analytic check, brute-force potential check, determinism check."""
    from bulbsim.config import make_config
    from bulbsim.driver import run
    from bulbsim.state import concatenate

    checks = []
    ens = evolve_vacuum(0.15, 1.0, 1.0, 2 * math.pi, 125)
    p = survival_probability(ens, 0, (0, 0), 0, 0)
    want = vacuum_survival(0.15, 1.0, 1.0, 2 * math.pi)
    checks.append(Check("vacuum", abs(p - want) <= 1e-8, f"P = {p:.12f}, analytic {want:.12f}"))

    grid = build_grid(GridConfig(n_theta=4, n_phi=2, n_energy=3))
    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng(t)
        r = grid.radius_ns * (1 + rng.uniform(0, 2))
        worst = max(worst, potential_ulp_error(random_ensemble(grid, rng, r=r), r))
    checks.append(Check("potential", worst <= 4, f"worst entry error {worst:g} ulp over {trials} ensembles"))

    base = {"grid.n_theta": 32, "grid.n_phi": 2, "grid.n_energy": 4, "run.n_steps": 20}
    states = []
    for extra in ({"devices.cpu.threads": 1}, {"devices.cpu.threads": 4},
                  {"devices.cpu.count": 2, "devices.phi.count": 2, "devices.cpu.threads": 2, "devices.phi.threads": 3}):
        result = run(make_config({**base, **extra}), io_mode="off")
        e = concatenate([rr.ensemble for rr in result.ranks])
        states.append((e.re, e.im))
    same = all(np.array_equal(states[0][0], s[0]) and np.array_equal(states[0][1], s[1]) for s in states)
    checks.append(Check("determinism", same, "1 rank x 1 thread, 1 x 4, 4 ranks mixed: "
                        + ("bitwise identical" if same else "states differ")))
    return checks
