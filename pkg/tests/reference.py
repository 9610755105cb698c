"""Independent reference implementations used as test oracles.

Nothing here imports the package's numerical paths: the potential is summed
pairwise over beams with complex matrices (or exact rationals), and the
reference integrator is a plain classical Runge-Kutta loop.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
from numba import njit


def beam_vectors(u_nodes, phi_nodes, radius, r):
    """Unit vectors ``(T, P, 3)`` from the bulb geometry, written out directly."""
    u = np.asarray(u_nodes, dtype=np.float64)
    phi = np.asarray(phi_nodes, dtype=np.float64)
    s = (radius / r) * np.sqrt(u)
    c = np.sqrt(1.0 - (radius / r) ** 2 * u)
    v = np.empty((u.size, phi.size, 3))
    v[..., 0] = s[:, None] * np.cos(phi)[None, :]
    v[..., 1] = s[:, None] * np.sin(phi)[None, :]
    v[..., 2] = c[:, None]
    return v, c


def density_terms(psi, weights):
    """Weighted density matrices per beam, summed over energy.

    ``psi`` is complex ``(2, T, P, 2, E)``, ``weights`` is ``(2, 2, T, P, E)``.
    A particle emitted in flavor 1 has density ``1 - rho`` (two flavors).
    Antineutrinos contribute ``-conj``.  Returns ``(2, T, P, 2, 2)``.
    """
    w0, w1 = weights[:, 0], weights[:, 1]
    wd = w0 - w1
    terms = np.empty(psi.shape[:3] + (2, 2), dtype=np.complex128)
    for a in range(2):
        for b in range(2):
            rho = psi[:, :, :, a] * psi[:, :, :, b].conj()
            terms[..., a, b] = (wd * rho + (w1 if a == b else 0.0)).sum(axis=-1)
    terms[1] = -terms[1].conj()
    return terms


def pairwise_potential(psi, weights, u_nodes, phi_nodes, radius, r, mu0):
    """``mu0 (R/r)^2 sum_j (1 - v_i.v_j) C_j`` for every beam i, shape ``(T, P, 2, 2)``."""
    v, _ = beam_vectors(u_nodes, phi_nodes, radius, r)
    flat_v = v.reshape(-1, 3)
    c = density_terms(psi, weights).sum(axis=0).reshape(-1, 2, 2)
    kernel = 1.0 - flat_v @ flat_v.T
    h = np.einsum("ij,jab->iab", kernel, c) * (mu0 * (radius / r) ** 2)
    return h.reshape(v.shape[:2] + (2, 2))


def vacuum_matrix(delta_m2, theta_v, energies):
    omega = delta_m2 / (4.0 * np.asarray(energies, dtype=np.float64))
    c, s = math.cos(2 * theta_v), math.sin(2 * theta_v)
    h = np.empty((omega.size, 2, 2))
    h[:, 0, 0] = -c * omega
    h[:, 0, 1] = h[:, 1, 0] = s * omega
    h[:, 1, 1] = c * omega
    return h


class DenseSystem:
    """``d psi/dr = -i H_eff psi`` with the potential summed pairwise."""

    def __init__(self, u_nodes, phi_nodes, energies, weights, radius, delta_m2, theta_v, mu0):
        self.u = np.asarray(u_nodes, dtype=np.float64)
        self.phi = np.asarray(phi_nodes, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.radius = radius
        self.mu0 = mu0
        # (E, 2, 2) -> (1, 1, E, 2, 2) for broadcasting over beams
        self.h0 = vacuum_matrix(delta_m2, theta_v, energies)[None, None]
        self._geometry = {}

    def geometry(self, r):
        """Pair kernel, potential scale and 1/cos per beam; RK4 revisits each radius."""
        if r not in self._geometry:
            if len(self._geometry) > 4:
                self._geometry.clear()
            v, cos_t = beam_vectors(self.u, self.phi, self.radius, r)
            flat = v.reshape(-1, 3)
            kernel = (1.0 - flat @ flat.T) * (self.mu0 * (self.radius / r) ** 2)
            self._geometry[r] = (kernel, 1.0 / cos_t[:, None, None, None, None])
        return self._geometry[r]

    def __call__(self, r, psi):
        kernel, inv_cos = self.geometry(r)
        n_t, n_p = psi.shape[1:3]
        c = density_terms(psi, self.weights).sum(axis=0).reshape(-1, 4)
        hnu = (kernel @ c).reshape(n_t, n_p, 1, 2, 2)
        out = np.empty_like(psi)
        for s, sign in ((0, 1.0), (1, -1.0)):
            # neutrinos: H0 + Hnu; antineutrinos: conj(H0) - conj(Hnu)
            hnu_s = hnu if s == 0 else hnu.conj()
            h = (self.h0 + sign * hnu_s) * inv_cos
            x = psi[s]
            # (T, P, E, a, b) times (T, P, b, E)
            out[s, :, :, 0] = -1j * (h[..., 0, 0] * x[:, :, 0] + h[..., 0, 1] * x[:, :, 1])
            out[s, :, :, 1] = -1j * (h[..., 1, 0] * x[:, :, 0] + h[..., 1, 1] * x[:, :, 1])
        return out


def rk4(f, psi, r0, r1, n_steps):
    h = (r1 - r0) / n_steps
    r = r0
    for k in range(n_steps):
        r = r0 + k * h
        k1 = f(r, psi)
        k2 = f(r + 0.5 * h, psi + 0.5 * h * k1)
        k3 = f(r + 0.5 * h, psi + 0.5 * h * k2)
        k4 = f(r + h, psi + h * k3)
        psi = psi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return psi


# --------------------------------------------------------------------------
# exact rational moments


def exact_moments(re, im, weights, vx, vy, vz):
    """Exact ``[M0, Mx, My, Mz]`` per species as Fractions, dict ``(s, m, a, b) -> (re, im)``.

    Upper triangle only; same unitarity and antineutrino conventions as
    :func:`density_terms`.
    """
    out = {}
    n_theta, n_phi, n, n_e = re.shape[1:]
    for s in range(2):
        acc = {(m, a, b): [Fraction(0), Fraction(0)] for m in range(4) for a in range(n) for b in range(a, n)}
        for t in range(n_theta):
            for p in range(n_phi):
                dirs = (Fraction(1), Fraction(float(vx[t, p])), Fraction(float(vy[t, p])), Fraction(float(vz[t, p])))
                for k in range(n_e):
                    pr = [Fraction(float(re[s, t, p, a, k])) for a in range(n)]
                    pi = [Fraction(float(im[s, t, p, a, k])) for a in range(n)]
                    w0 = Fraction(float(weights[s, 0, t, p, k]))
                    w1 = Fraction(float(weights[s, 1, t, p, k]))
                    for a in range(n):
                        for b in range(a, n):
                            rr = pr[a] * pr[b] + pi[a] * pi[b]
                            ri = pi[a] * pr[b] - pr[a] * pi[b]
                            cr = w0 * rr + w1 * ((1 if a == b else 0) - rr)
                            ci = (w0 - w1) * ri
                            if s == 1:
                                cr = -cr
                            for m in range(4):
                                acc[m, a, b][0] += dirs[m] * cr
                                acc[m, a, b][1] += dirs[m] * ci
        for (m, a, b), (xr, xi) in acc.items():
            out[s, m, a, b] = (xr, xi)
    return out


def exact_pairwise_potential(re, im, weights, vx, vy, vz, scale):
    """Exact ``scale * sum_j (1 - v_i.v_j) C_j`` as Fractions, keyed ``(t, p, a, b) -> (re, im)``.

    Sums over beam pairs directly (no moment factorization); ``scale`` is
    taken as the exact value of the given double.
    """
    n_theta, n_phi, n, n_e = re.shape[1:]
    beams = [(t, p) for t in range(n_theta) for p in range(n_phi)]
    vec = {b: tuple(Fraction(float(v[b])) for v in (vx, vy, vz)) for b in beams}
    dens = {}
    for t, p in beams:
        c = {}
        for a in range(n):
            for b in range(a, n):
                c[a, b] = [Fraction(0), Fraction(0)]
        for s in range(2):
            for k in range(n_e):
                pr = [Fraction(float(re[s, t, p, a, k])) for a in range(n)]
                pi = [Fraction(float(im[s, t, p, a, k])) for a in range(n)]
                w0 = Fraction(float(weights[s, 0, t, p, k]))
                w1 = Fraction(float(weights[s, 1, t, p, k]))
                for (a, b), acc in c.items():
                    rr = pr[a] * pr[b] + pi[a] * pi[b]
                    ri = pi[a] * pr[b] - pr[a] * pi[b]
                    cr = w0 * rr + w1 * ((1 if a == b else 0) - rr)
                    acc[0] += -cr if s == 1 else cr
                    acc[1] += (w0 - w1) * ri
        dens[t, p] = c
    scale = Fraction(float(scale))
    out = {}
    for i in beams:
        for ab in dens[i]:
            er = ei = Fraction(0)
            for j in beams:
                kern = 1 - sum(x * y for x, y in zip(vec[i], vec[j]))
                er += kern * dens[j][ab][0]
                ei += kern * dens[j][ab][1]
            out[i + ab] = (er * scale, ei * scale)
    return out


# --------------------------------------------------------------------------
# compiled reference integration
#
# The same system as DenseSystem + rk4, written as explicit loops so long
# reference runs stay fast.  Checked against the numpy version in the tests.


@njit(cache=True)
def _dense_rhs(r, psi, u, phi, h0, weights, radius, mu0, out):
    n_t, n_p, n_e = psi.shape[1], psi.shape[2], psi.shape[4]
    n_b = n_t * n_p
    vec = np.empty((n_b, 3))
    inv_cos = np.empty(n_t)
    dens = np.zeros((n_b, 2, 2), dtype=np.complex128)
    for t in range(n_t):
        st = (radius / r) * math.sqrt(u[t])
        ct = math.sqrt(1.0 - (radius / r) ** 2 * u[t])
        inv_cos[t] = 1.0 / ct
        for p in range(n_p):
            i = t * n_p + p
            vec[i, 0] = st * math.cos(phi[p])
            vec[i, 1] = st * math.sin(phi[p])
            vec[i, 2] = ct
            for s in range(2):
                for e in range(n_e):
                    w0 = weights[s, 0, t, p, e]
                    w1 = weights[s, 1, t, p, e]
                    for a in range(2):
                        for b in range(2):
                            rho = psi[s, t, p, a, e] * psi[s, t, p, b, e].conjugate()
                            c = (w0 - w1) * rho + (w1 if a == b else 0.0)
                            dens[i, a, b] += c if s == 0 else -c.conjugate()
    scale = mu0 * (radius / r) ** 2
    for t in range(n_t):
        for p in range(n_p):
            i = t * n_p + p
            hnu = np.zeros((2, 2), dtype=np.complex128)
            for j in range(n_b):
                kern = 1.0 - (vec[i, 0] * vec[j, 0] + vec[i, 1] * vec[j, 1] + vec[i, 2] * vec[j, 2])
                hnu += kern * dens[j]
            hnu *= scale
            for s in range(2):
                for e in range(n_e):
                    for a in range(2):
                        acc = 0.0j
                        for b in range(2):
                            hab = hnu[a, b] if s == 0 else -hnu[a, b].conjugate()
                            acc += (h0[e, a, b] + hab) * inv_cos[t] * psi[s, t, p, b, e]
                        out[s, t, p, a, e] = -1j * acc


@njit(cache=True)
def _dense_rk4(psi, r0, r1, n_steps, u, phi, h0, weights, radius, mu0):
    h = (r1 - r0) / n_steps
    k1 = np.empty_like(psi)
    k2 = np.empty_like(psi)
    k3 = np.empty_like(psi)
    k4 = np.empty_like(psi)
    for k in range(n_steps):
        r = r0 + k * h
        _dense_rhs(r, psi, u, phi, h0, weights, radius, mu0, k1)
        _dense_rhs(r + 0.5 * h, psi + 0.5 * h * k1, u, phi, h0, weights, radius, mu0, k2)
        _dense_rhs(r + 0.5 * h, psi + 0.5 * h * k2, u, phi, h0, weights, radius, mu0, k3)
        _dense_rhs(r + h, psi + h * k3, u, phi, h0, weights, radius, mu0, k4)
        psi = psi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return psi


def dense_rk4(system: DenseSystem, psi, r0, r1, n_steps):
    """``rk4(system, ...)`` compiled; ``system`` supplies the parameters."""
    return _dense_rk4(np.ascontiguousarray(psi, dtype=np.complex128), float(r0), float(r1), int(n_steps),
                      system.u, system.phi, np.ascontiguousarray(system.h0[0, 0]), system.weights,
                      float(system.radius), float(system.mu0))
