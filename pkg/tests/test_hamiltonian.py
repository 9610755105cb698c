import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from reference import exact_moments, pairwise_potential

from bulbsim.errors import ConfigError, DomainError, IntegrityError, SingularityError
from bulbsim.grid import Grid, GridConfig, build_grid
from bulbsim.hamiltonian import (
    MomentSet,
    VacuumParams,
    accumulate_moments,
    check_weights,
    dilution,
    effective_hamiltonian,
    neutrino_potential,
    potential_pairs,
    tabulated_profile,
    theta_bin_moments,
    upper_pairs,
    vacuum_hamiltonian,
)
from bulbsim.hermitian import HermitianMatrix
from bulbsim.oracles import potential_ulp_error
from bulbsim.state import ANTINEUTRINO, NEUTRINO, init_ensemble, random_ensemble
from bulbsim.topology import exchange_moments, make_contribution

seeds = st.integers(0, 2 ** 32 - 1)


# vacuum term

def test_maximal_mixing():
    h = vacuum_hamiltonian(VacuumParams(1.0, math.pi / 4), 1.0).to_complex()
    np.testing.assert_allclose(h, 0.25 * np.array([[0, 1], [1, 0]]), atol=1e-16)


def test_no_mixing():
    h = vacuum_hamiltonian(VacuumParams(1.0, 0.0), 1.0).to_complex()
    assert h.tolist() == [[-0.25, 0], [0, 0.25]]


def test_vacuum_example_values():
    # 0.125 * cos(0.3) and 0.125 * sin(0.3), evaluated independently and frozen
    h = vacuum_hamiltonian(VacuumParams(2.5, 0.15), 5.0).to_complex()
    assert h[0, 0].real == pytest.approx(-0.11941706114070075, rel=1e-15)
    assert h[1, 1].real == pytest.approx(0.11941706114070075, rel=1e-15)
    assert h[0, 1].real == pytest.approx(0.03694002583266744, rel=1e-15)
    assert h[0, 1] == h[1, 0]


def test_antineutrino_vacuum_term_flips_the_matter_sign():
    params = VacuumParams(1.0, 0.15, 0.7)
    nu = vacuum_hamiltonian(params, 2.0, NEUTRINO).to_complex()
    nubar = vacuum_hamiltonian(params, 2.0, ANTINEUTRINO).to_complex()
    bare = vacuum_hamiltonian(VacuumParams(1.0, 0.15), 2.0).to_complex()
    assert nu[0, 0] == bare[0, 0] + 0.7
    assert nubar[0, 0] == bare[0, 0] - 0.7
    assert np.array_equal(nubar[0, 1], np.conj(bare[0, 1]))


def test_tabulated_matter_profile():
    params = VacuumParams(1.0, 0.15, tabulated_profile([10.0, 20.0], [2.0, 4.0]))
    assert params.matter(15.0) == 3.0 and params.matter(50.0) == 4.0
    with pytest.raises(ConfigError):
        tabulated_profile([2.0, 1.0], [0.0, 0.0])


def test_vacuum_errors():
    with pytest.raises(DomainError):
        vacuum_hamiltonian(VacuumParams(), 0.0)
    with pytest.raises(ConfigError):
        vacuum_hamiltonian(VacuumParams(), 1.0, n_flavors=3)
    with pytest.raises(ConfigError):
        VacuumParams(theta_v=2.0)


# moments

@pytest.fixture
def small():
    return build_grid(GridConfig(n_theta=6, n_phi=2, n_energy=3))


def test_zero_weights_give_zero_moments(small):
    ens = init_ensemble(small, weights=np.zeros((2, 2, 6, 2, 3)))
    assert accumulate_moments(ens).is_zero()


def test_single_beam_single_energy():
    g = Grid.from_nodes([0.36], [0.5], [1.0], radius=10.0)
    w = np.zeros((2, 2, 1, 1, 1))
    w[NEUTRINO, 0] = 0.75
    ens = init_ensemble(g, weights=w)
    m = accumulate_moments(ens)
    (vx, vy, vz) = (d[0, 0] for d in g.directions(10.0))
    assert m.matrix(NEUTRINO, 0).to_complex().tolist() == [[0.75, 0], [0, 0]]
    for k, c in enumerate((vx, vy, vz), start=1):
        assert m.matrix(NEUTRINO, k).to_complex().tolist() == [[0.75 * c, 0], [0, 0]]
    assert np.all(m.re[ANTINEUTRINO] == 0)


@given(seeds)
@settings(max_examples=25)
def test_moments_match_the_exact_sum_to_the_last_bit(seed):
    g = build_grid(GridConfig(n_theta=2, n_phi=2, n_energy=3))
    rng = np.random.default_rng(seed)
    r = g.radius_ns * (1 + rng.uniform(0, 2))
    ens = random_ensemble(g, rng, r=r)
    m = accumulate_moments(ens)
    exact = exact_moments(ens.re, ens.im, ens.weights, *g.directions(r))
    for k, (a, b) in enumerate(upper_pairs(2)):
        for s in range(2):
            for mom in range(4):
                xr, xi = exact[s, mom, a, b]
                assert m.hi[s, mom, k, 0] == float(xr)
                assert m.hi[s, mom, k, 1] == float(xi)


@given(seeds, st.integers(1, 4))
@settings(max_examples=30)
def test_moments_are_additive_over_chunks(seed, chunk):
    g = build_grid(GridConfig(n_theta=17, n_phi=2, n_energy=3))
    ens = random_ensemble(g, np.random.default_rng(seed))
    whole = accumulate_moments(ens, chunk_size=chunk)
    # a left fold: prefix of whole chunks plus the next chunk
    split = (17 // chunk - 1) * chunk
    if split > 0:
        head = accumulate_moments(ens, (0, split), chunk_size=chunk)
        tail = accumulate_moments(ens, (split, split + chunk), chunk_size=chunk)
        rest = accumulate_moments(ens, (0, split + chunk), chunk_size=chunk)
        assert head + tail == rest
    # any cut, rebuilt in chunk order by the exchange
    cut = int(np.random.default_rng(seed).integers(0, 18))
    parts = []
    for rank, (lo, hi) in enumerate(((0, cut), (cut, 17))):
        b_hi, b_lo = theta_bin_moments(ens, ens.r, slice(lo, hi))
        parts.append(make_contribution(rank, ens.r, 2, 17, chunk, lo, b_hi, b_lo))
    assert exchange_moments(parts, 17, chunk) == whole


def test_moment_errors(small):
    ens = init_ensemble(small)
    with pytest.raises(IndexError):
        accumulate_moments(ens, (2, 7))
    with pytest.raises(IntegrityError):
        accumulate_moments(ens, r=ens.r + 1)
    with pytest.raises(IntegrityError):
        MomentSet.zeros(10.0, 2) + MomentSet.zeros(11.0, 2)


def test_three_flavor_emission_is_rejected():
    w = np.zeros((2, 3, 1, 1, 1))
    check_weights(w)
    w[0, 2] = 1.0
    with pytest.raises(ConfigError):
        check_weights(w)


# potential

def test_zero_moments_give_zero_potential():
    h = neutrino_potential(MomentSet.zeros(12.0, 2), (0.4, 1.0), 12.0, mu0=3.0, radius_ns=10.0)
    assert h == HermitianMatrix.zeros(2)


def test_a_beam_does_not_feel_itself():
    g = Grid.from_nodes([0.49], [1.3], [1.0], radius=10.0)
    ens = random_ensemble(g, np.random.default_rng(0), r=15.0)
    ens.weights[ANTINEUTRINO] = 0.0
    h = neutrino_potential(accumulate_moments(ens), (0.49, 1.3), 15.0, mu0=1.0, radius_ns=10.0).to_complex()
    assert np.max(np.abs(h)) <= 1e-16


def test_two_beams_match_the_pairwise_sum():
    g = Grid.from_nodes([0.2, 0.8], [0.7], [1.0], radius=10.0)
    w = np.zeros((2, 2, 2, 1, 1))
    w[NEUTRINO, 0, :, 0, 0] = [0.3, 0.5]
    w[ANTINEUTRINO, 0, :, 0, 0] = [0.2, 0.1]
    ens = init_ensemble(g, weights=w)
    s = 1 / math.sqrt(2)
    ens.re[:, 0, 0, :, 0] = [[s, 0.0], [0.6, 0.0]]
    ens.im[:, 0, 0, :, 0] = [[0.0, s], [0.0, 0.8]]
    ens.r = 13.0
    m = accumulate_moments(ens)
    ref = pairwise_potential(ens.amplitudes(), ens.weights, g.u_nodes, g.phi_nodes, 10.0, 13.0, 2.0)
    for i, u in enumerate(g.u_nodes):
        h = neutrino_potential(m, (u, 0.7), 13.0, mu0=2.0, radius_ns=10.0).to_complex()
        np.testing.assert_allclose(h, ref[i, 0], rtol=0, atol=1e-16)


@given(seeds)
@settings(max_examples=15)
def test_potential_within_four_ulp_of_exact(seed):
    g = build_grid(GridConfig(n_theta=3, n_phi=2, n_energy=2))
    rng = np.random.default_rng(seed)
    r = g.radius_ns * (1 + rng.uniform(0, 3))
    assert potential_ulp_error(random_ensemble(g, rng, r=r), r, mu0=1.0) <= 4


@given(seeds)
@settings(max_examples=20)
def test_potential_is_hermitian(seed):
    g = build_grid(GridConfig(n_theta=4, n_phi=2, n_energy=2))
    rng = np.random.default_rng(seed)
    ens = random_ensemble(g, rng, r=14.0)
    m = accumulate_moments(ens)
    for u in g.u_nodes:
        h = neutrino_potential(m, (u, 2.0), 14.0, mu0=1.0, radius_ns=10.0).to_complex()
        assert np.array_equal(h, h.conj().T)


def test_potential_radius_must_match():
    with pytest.raises(IntegrityError):
        neutrino_potential(MomentSet.zeros(12.0, 2), (0.4, 1.0), 13.0, mu0=1.0, radius_ns=10.0)


def test_potential_arrays_match_single_beam_calls(small):
    ens = random_ensemble(small, np.random.default_rng(5), r=11.0)
    m = accumulate_moments(ens)
    h_re, h_im = potential_pairs(m, *small.directions(11.0), 1.5 * dilution(11.0, 10.0))
    one = neutrino_potential(m, (small.u_nodes[4], small.phi_nodes[1]), 11.0, mu0=1.5, radius_ns=10.0)
    assert h_re[4, 1, 1] == one.re[0, 1] and h_im[4, 1, 1] == one.im[0, 1]


# effective hamiltonian

def test_effective_hamiltonian_projection():
    h0 = HermitianMatrix(np.array([[1.0, 2.0], [2.0, -1.0]]))
    hnu = HermitianMatrix(np.array([[0.5, 0.0], [0.0, 0.25]]), np.array([[0.0, 1.0], [0.0, 0.0]]))
    assert effective_hamiltonian(h0, hnu, 1.0) == h0 + hnu
    assert effective_hamiltonian(h0, hnu, 0.5) == (h0 + hnu) * 2.0
    with pytest.raises(SingularityError):
        effective_hamiltonian(h0, hnu, 1e-7)


def test_standard_grid_largest_projection_is_finite():
    g = build_grid(GridConfig())
    cos_t, _ = g.local_angles(g.radius_ns)
    # u_max = 1 - 1/20000, so cos = sqrt(1/20000)
    assert 1 / cos_t.min() == pytest.approx(math.sqrt(20000), rel=1e-9)
    assert cos_t.min() > 1e-6
