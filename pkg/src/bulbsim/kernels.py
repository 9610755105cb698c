"""Compiled inner loops for moment accumulation, the potential and the RHS.

The loops are written out explicitly so the floating-point order is plain to
see: nothing here is reassociated (numba compiles without fast-math, so no
FMA contraction or reduction reordering).  Functions release the GIL, which
lets worker threads run them concurrently.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_SPLITTER = 134217729.0

_jit = dict(cache=True, nogil=True)


@njit(inline="always", **_jit)
def two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


@njit(inline="always", **_jit)
def quick_two_sum(a, b):
    s = a + b
    return s, b - (s - a)


@njit(inline="always", **_jit)
def two_prod(a, b):
    p = a * b
    c = _SPLITTER * a
    ah = c - (c - a)
    al = a - ah
    c = _SPLITTER * b
    bh = c - (c - b)
    bl = b - bh
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


@njit(inline="always", **_jit)
def split(a):
    c = _SPLITTER * a
    ah = c - (c - a)
    return ah, a - ah


@njit(inline="always", **_jit)
def two_prod_split(a, ah, al, b, bh, bl):
    """``two_prod`` with both factors already split."""
    p = a * b
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


@njit(inline="always", **_jit)
def dd_add(ah, al, bh, bl):
    s, e = two_sum(ah, bh)
    t, f = two_sum(al, bl)
    e = e + t
    s, e = quick_two_sum(s, e)
    e = e + f
    return quick_two_sum(s, e)


@njit(inline="always", **_jit)
def dd_mul_d(ah, al, b):
    p, e = two_prod(ah, b)
    e = e + al * b
    return quick_two_sum(p, e)


@njit(inline="always", **_jit)
def dd_mul(ah, al, bh, bl):
    p, e = two_prod(ah, bh)
    e = e + (ah * bl + al * bh)
    return quick_two_sum(p, e)


@njit(**_jit)
def seq_sum_rows(hi, lo):
    """Double-double sum of the rows of ``(K, M)`` arrays, row 0 first."""
    k_rows, m = hi.shape
    out_hi = np.zeros(m)
    out_lo = np.zeros(m)
    for j in range(m):
        ah = 0.0
        al = 0.0
        for k in range(k_rows):
            ah, al = dd_add(ah, al, hi[k, j], lo[k, j])
        out_hi[j] = ah
        out_lo[j] = al
    return out_hi, out_lo


@njit(**_jit)
def bin_moments(re, im, w, vx, vy, vz, ia, ib, out_hi, out_lo):
    """Per-theta-bin moments.

    re, im   : (2, T, P, n, E) amplitudes
    w        : (2, n_flavors, T, P, E) emission weights
    vx,vy,vz : (T, P) beam directions
    ia, ib   : upper-triangle pair indices
    out_*    : (T, 2, 4, n_pairs, 2) double-double result

    For each bin: energy sum per beam, then phi sum, both ascending.
    """
    n_species, n_t, n_p, n, n_e = re.shape
    n_fl = w.shape[1]
    n_pairs = ia.shape[0]
    acc_hi = np.zeros((4, n_pairs, 2))
    acc_lo = np.zeros((4, n_pairs, 2))
    beam_hi = np.zeros((n_pairs, 2))
    beam_lo = np.zeros((n_pairs, 2))
    # amplitudes of one (beam, energy) with their Dekker splits
    pr = np.empty((n, 3))
    pi = np.empty((n, 3))
    for t in range(n_t):
        for s in range(n_species):
            acc_hi[:] = 0.0
            acc_lo[:] = 0.0
            for p in range(n_p):
                beam_hi[:] = 0.0
                beam_lo[:] = 0.0
                for e in range(n_e):
                    if n_fl == 2:
                        wr_h, wr_l = two_sum(w[s, 0, t, p, e], -w[s, 1, t, p, e])
                        w_id = w[s, 1, t, p, e]
                    else:
                        wr_h = w[s, 0, t, p, e]
                        wr_l = 0.0
                        w_id = 0.0
                    for a in range(n):
                        x = re[s, t, p, a, e]
                        pr[a, 0] = x
                        pr[a, 1], pr[a, 2] = split(x)
                        x = im[s, t, p, a, e]
                        pi[a, 0] = x
                        pi[a, 1], pi[a, 2] = split(x)
                    for k in range(n_pairs):
                        a = ia[k]
                        b = ib[k]
                        # Re(psi_a conj psi_b) = pra*prb + pia*pib
                        x1h, x1l = two_prod_split(pr[a, 0], pr[a, 1], pr[a, 2], pr[b, 0], pr[b, 1], pr[b, 2])
                        x2h, x2l = two_prod_split(pi[a, 0], pi[a, 1], pi[a, 2], pi[b, 0], pi[b, 1], pi[b, 2])
                        xh, xl = dd_add(x1h, x1l, x2h, x2l)
                        tr_h, tr_l = dd_mul(xh, xl, wr_h, wr_l)
                        if a == b:
                            tr_h, tr_l = dd_add(tr_h, tr_l, w_id, 0.0)
                        if s == 1:
                            # antineutrinos: -(w conj(rho) + w_id 1)
                            tr_h = -tr_h
                            tr_l = -tr_l
                        beam_hi[k, 0], beam_lo[k, 0] = dd_add(beam_hi[k, 0], beam_lo[k, 0], tr_h, tr_l)
                        if a != b:
                            # Im(psi_a conj psi_b) = pia*prb - pra*pib; zero on the diagonal
                            y1h, y1l = two_prod_split(pi[a, 0], pi[a, 1], pi[a, 2], pr[b, 0], pr[b, 1], pr[b, 2])
                            y2h, y2l = two_prod_split(pr[a, 0], pr[a, 1], pr[a, 2], pi[b, 0], pi[b, 1], pi[b, 2])
                            yh, yl = dd_add(y1h, y1l, -y2h, -y2l)
                            ti_h, ti_l = dd_mul(yh, yl, wr_h, wr_l)
                            beam_hi[k, 1], beam_lo[k, 1] = dd_add(beam_hi[k, 1], beam_lo[k, 1], ti_h, ti_l)
                v1 = vx[t, p]
                v2 = vy[t, p]
                v3 = vz[t, p]
                for k in range(n_pairs):
                    for c in range(2):
                        bh = beam_hi[k, c]
                        bl = beam_lo[k, c]
                        acc_hi[0, k, c], acc_lo[0, k, c] = dd_add(acc_hi[0, k, c], acc_lo[0, k, c], bh, bl)
                        mh, ml = dd_mul_d(bh, bl, v1)
                        acc_hi[1, k, c], acc_lo[1, k, c] = dd_add(acc_hi[1, k, c], acc_lo[1, k, c], mh, ml)
                        mh, ml = dd_mul_d(bh, bl, v2)
                        acc_hi[2, k, c], acc_lo[2, k, c] = dd_add(acc_hi[2, k, c], acc_lo[2, k, c], mh, ml)
                        mh, ml = dd_mul_d(bh, bl, v3)
                        acc_hi[3, k, c], acc_lo[3, k, c] = dd_add(acc_hi[3, k, c], acc_lo[3, k, c], mh, ml)
            out_hi[t, s] = acc_hi
            out_lo[t, s] = acc_lo


@njit(**_jit)
def potential(m_hi, m_lo, vx, vy, vz, scale, out):
    """``scale * [M0 - v.M1]`` summed over species, rounded to double.

    m_*      : (2, 4, n_pairs, 2) moments
    vx,vy,vz : flat direction arrays (B,)
    out      : (B, n_pairs, 2)
    """
    n_pairs = m_hi.shape[2]
    for k in range(n_pairs):
        for c in range(2):
            t0h, t0l = dd_add(m_hi[0, 0, k, c], m_lo[0, 0, k, c], m_hi[1, 0, k, c], m_lo[1, 0, k, c])
            t1h, t1l = dd_add(m_hi[0, 1, k, c], m_lo[0, 1, k, c], m_hi[1, 1, k, c], m_lo[1, 1, k, c])
            t2h, t2l = dd_add(m_hi[0, 2, k, c], m_lo[0, 2, k, c], m_hi[1, 2, k, c], m_lo[1, 2, k, c])
            t3h, t3l = dd_add(m_hi[0, 3, k, c], m_lo[0, 3, k, c], m_hi[1, 3, k, c], m_lo[1, 3, k, c])
            for i in range(vx.shape[0]):
                dh, dl = dd_mul_d(t1h, t1l, vx[i])
                xh, xl = dd_mul_d(t2h, t2l, vy[i])
                dh, dl = dd_add(dh, dl, xh, xl)
                xh, xl = dd_mul_d(t3h, t3l, vz[i])
                dh, dl = dd_add(dh, dl, xh, xl)
                hh, hl = dd_add(t0h, t0l, -dh, -dl)
                hh, hl = dd_mul_d(hh, hl, scale)
                out[i, k, c] = hh + hl


@njit(**_jit)
def rhs(re, im, h0, hnu, cos_t, pidx, d_re, d_im):
    """``d psi / dr = -i H_eff psi`` for one theta block.

    re, im : (2, T, P, n, E) amplitudes
    h0     : (2, n, n, E) real vacuum+matter Hamiltonians per species
    hnu    : (T, P, n_pairs, 2) neutrino potential (neutrino sign)
    cos_t  : (T,) local cos(theta)
    pidx   : (n, n) upper-triangle pair index
    """
    n_species, n_t, n_p, n, n_e = re.shape
    hr = np.empty((n, n))
    hi = np.empty((n, n))
    for s in range(n_species):
        sign = 1.0 if s == 0 else -1.0
        for t in range(n_t):
            c = cos_t[t]
            for p in range(n_p):
                for e in range(n_e):
                    for a in range(n):
                        for b in range(a, n):
                            k = pidx[a, b]
                            # antineutrinos feel -conj(H_nu): real part flips
                            hr[a, b] = (h0[s, a, b, e] + sign * hnu[t, p, k, 0]) / c
                            hi[a, b] = hnu[t, p, k, 1] / c
                            if a == b:
                                hi[a, b] = 0.0
                            else:
                                hr[b, a] = hr[a, b]
                                hi[b, a] = -hi[a, b]
                    for a in range(n):
                        acc_r = 0.0
                        acc_i = 0.0
                        for b in range(n):
                            pr = re[s, t, p, b, e]
                            pi = im[s, t, p, b, e]
                            acc_r += hr[a, b] * pi + hi[a, b] * pr
                            acc_i += hi[a, b] * pi - hr[a, b] * pr
                        d_re[s, t, p, a, e] = acc_r
                        d_im[s, t, p, a, e] = acc_i


@njit(**_jit)
def add_arrays(ah, al, bh, bl):
    """Elementwise double-double sum of two flat arrays."""
    out_h = np.empty_like(ah)
    out_l = np.empty_like(al)
    for i in range(ah.shape[0]):
        out_h[i], out_l[i] = dd_add(ah[i], al[i], bh[i], bl[i])
    return out_h, out_l


@njit(**_jit)
def chunk_sums(hi, lo):
    """Double-double sums over axis 1 of ``(C, K, M)`` arrays."""
    n_c, n_k, m = hi.shape
    out_hi = np.zeros((n_c, m))
    out_lo = np.zeros((n_c, m))
    for c in range(n_c):
        for j in range(m):
            ah = 0.0
            al = 0.0
            for k in range(n_k):
                ah, al = dd_add(ah, al, hi[c, k, j], lo[c, k, j])
            out_hi[c, j] = ah
            out_lo[c, j] = al
    return out_hi, out_lo
