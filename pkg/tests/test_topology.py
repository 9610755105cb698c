import threading
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bulbsim.errors import ConfigError, ExchangeError, IntegrityError, StagingError
from bulbsim.grid import GridConfig, build_grid
from bulbsim.hamiltonian import MomentSet, accumulate_moments, theta_bin_moments
from bulbsim.state import random_ensemble
from bulbsim.topology import (
    CPU_KIND,
    DeviceSpec,
    Exchange,
    WorkerTeam,
    apportion,
    chunk_blocks,
    equal_plan,
    exchange_moments,
    make_contribution,
    make_plan,
    run_ranks,
    thread_iterations,
    worker_blocks,
)


def hetero(acc_weight):
    # 14 nodes, each with 2 cpu ranks and 2 accelerator ranks
    return [DeviceSpec("cpu", 28, 1, 16), DeviceSpec("phi", 28, acc_weight, 244)]


# pinned partition counts

def test_forty_equal_ranks_get_250_each():
    assert equal_plan(10000, 40).counts() == [250] * 40


def test_forty_four_equal_ranks_get_227_or_228():
    counts = equal_plan(10000, 44).counts()
    assert set(counts) == {227, 228} and sum(counts) == 10000
    assert Counter(counts) == {228: 12, 227: 32}


def test_three_to_one_load_gives_267_or_268_per_accelerator():
    plan = make_plan(10000, hetero(3))
    assert set(plan.counts("phi")) <= {267, 268}
    assert sum(plan.counts()) == 10000


def test_two_to_one_load_gives_238_per_accelerator():
    plan = make_plan(10000, hetero(2))
    assert plan.counts("phi") == [238] * 28
    assert sum(plan.counts()) == 10000


def test_largest_remainder_misses_the_two_to_one_pin():
    # the alternative rule: ideal share 10000 * 2/84 = 238.1 rounds up for some accelerators
    counts = apportion(10000, [1] * 28 + [2] * 28, method="hamilton")
    assert set(counts[28:]) == {238, 239}


def test_thread_iteration_pins():
    assert thread_iterations(250, 244) == 2
    assert thread_iterations(227, 244) == 1
    assert thread_iterations(0, 244) == 0
    assert thread_iterations(244, 244) == 1 and thread_iterations(245, 244) == 2


# plan properties

plan_inputs = st.tuples(st.integers(1, 6), st.integers(0, 6), st.integers(1, 5)).flatmap(
    lambda t: st.tuples(st.just(t), st.integers(max(1, t[0] + t[1]), 3000)))


@given(plan_inputs)
def test_plan_covers_the_range_contiguously(args):
    (n_cpu, n_acc, weight), n_theta = args
    plan = make_plan(n_theta, [DeviceSpec("cpu", n_cpu, 1), DeviceSpec("phi", n_acc, weight)])
    assert sum(plan.counts()) == n_theta
    assert plan.ranks[0].theta_start == 0
    for a, b in zip(plan.ranks, plan.ranks[1:]):
        assert a.theta_stop == b.theta_start
    assert plan.ranks[-1].theta_stop == n_theta
    assert all(c >= 1 for c in plan.counts())
    assert [r.kind for r in plan.ranks] == ["cpu"] * n_cpu + ["phi"] * n_acc


def one_at_a_time(n, weights):
    """Smallest-divisors rule handing out every item individually."""
    counts = [1] * len(weights)
    for _ in range(n - len(weights)):
        best = max(range(len(weights)), key=lambda i: (Fraction(weights[i]) / counts[i], -i))
        counts[best] += 1
    return counts


@given(st.lists(st.sampled_from([1, 2, 3, 5, 7, 12]), min_size=1, max_size=10), st.integers(0, 300))
def test_adams_matches_item_by_item_allocation(weights, extra):
    n = len(weights) + extra
    assert apportion(n, weights) == one_at_a_time(n, weights)


@given(st.integers(1, 64), st.integers(0, 5000))
def test_equal_weights_differ_by_at_most_one(ranks, extra):
    counts = equal_plan(ranks + extra, ranks).counts()
    assert max(counts) - min(counts) <= 1


@given(st.integers(1, 8), st.integers(1, 8), st.integers(20, 3000), st.integers(1, 6), st.integers(1, 3))
def test_raising_accelerator_weight_never_lowers_its_share(n_cpu, n_acc, n_theta, w, dw):
    if n_theta < n_cpu + n_acc:
        return
    low = make_plan(n_theta, [DeviceSpec("cpu", n_cpu, 1), DeviceSpec("phi", n_acc, w)]).counts("phi")
    high = make_plan(n_theta, [DeviceSpec("cpu", n_cpu, 1), DeviceSpec("phi", n_acc, w + dw)]).counts("phi")
    assert all(h >= l for h, l in zip(high, low))


def test_plan_errors():
    with pytest.raises(ConfigError):
        make_plan(100, [DeviceSpec("cpu", 0)])
    with pytest.raises(ConfigError):
        equal_plan(3, 4)
    with pytest.raises(ConfigError):
        DeviceSpec("cpu", 1, weight=0)
    with pytest.raises(ConfigError):
        DeviceSpec("cpu", 1, threads=0)


def test_plan_table_lists_every_rank():
    table = equal_plan(10000, 40, threads=244).table()
    lines = table.splitlines()
    assert len(lines) == 41 and "theta_count" in lines[0] and "waves" in lines[0]
    assert lines[1].split() == ["0", "cpu", "0", "250", "2"]


def test_accelerators_stage_through_cpu_ranks_round_robin():
    plan = make_plan(100, [DeviceSpec("cpu", 2), DeviceSpec("phi", 3, 3)])
    assert [plan.stager_for(r) for r in range(5)] == [0, 1, 0, 1, 0]
    lonely = make_plan(100, [DeviceSpec("phi", 2, 3)])
    assert lonely.stager_for(0) is None


# worker dispatch

@given(st.integers(0, 200), st.integers(0, 100), st.integers(1, 20), st.integers(1, 9))
def test_worker_blocks_are_chunk_aligned_and_cover(offset, count, workers, chunk):
    blocks = worker_blocks(offset, count, workers, chunk)
    assert len(blocks) <= workers
    covered = [i for lo, hi in blocks for i in range(lo, hi)]
    assert covered == list(range(count))
    for lo, hi in blocks[1:]:
        assert (offset + lo) % chunk == 0
    waves = chunk_blocks(offset, count, chunk)
    assert [i for lo, hi in waves for i in range(lo, hi)] == list(range(count))
    assert all((offset + lo) // chunk == (offset + hi - 1) // chunk for lo, hi in waves)


def test_worker_team_maps_in_order_and_propagates_errors():
    with WorkerTeam(4) as team:
        names = team.map(lambda x: (x, threading.current_thread().name), [0, 1, 2, 3])
        assert [x for x, _ in names] == [0, 1, 2, 3]
        assert len({n for _, n in names}) == 4

        def boom(x):
            if x == 2:
                raise ValueError("bad block")
            return x

        with pytest.raises(ValueError, match="bad block"):
            team.map(boom, [0, 1, 2])
        assert team.map(lambda x: x * x, [1, 2]) == [1, 4]


# moment exchange

def _contributions(ens, bounds, chunk):
    out = []
    for rank, (lo, hi) in enumerate(zip(bounds, bounds[1:])):
        b_hi, b_lo = theta_bin_moments(ens, ens.r, slice(lo, hi))
        out.append(make_contribution(rank, ens.r, 2, ens.n_theta_local, chunk, lo, b_hi, b_lo))
    return out


@pytest.fixture
def ens():
    g = build_grid(GridConfig(n_theta=30, n_phi=2, n_energy=3))
    return random_ensemble(g, np.random.default_rng(4), r=12.5)


def test_one_rank_exchange_is_the_identity(ens):
    assert exchange_moments(_contributions(ens, [0, 30], 8), 30, 8) == accumulate_moments(ens)


def test_zero_moments_stay_zero(ens):
    ens.weights[...] = 0.0
    assert exchange_moments(_contributions(ens, [0, 7, 15, 22, 30], 8), 30, 8).is_zero()


@given(st.lists(st.integers(1, 29), min_size=3, max_size=3, unique=True), st.integers(1, 8))
@settings(max_examples=40)
def test_four_ranks_match_the_serial_reduction_bitwise(cuts, chunk):
    g = build_grid(GridConfig(n_theta=30, n_phi=2, n_energy=3))
    e = random_ensemble(g, np.random.default_rng(sum(cuts)), r=12.5)
    bounds = [0] + sorted(cuts) + [30]
    contributions = _contributions(e, bounds, chunk)
    serial = accumulate_moments(e, chunk_size=chunk)
    assert exchange_moments(contributions, 30, chunk) == serial
    assert exchange_moments(contributions[::-1], 30, chunk) == serial


def test_missing_rank_is_detected(ens):
    parts = _contributions(ens, [0, 10, 20, 30], 8)
    with pytest.raises(ExchangeError):
        exchange_moments(parts[:2], 30, 8)


def test_radius_mismatch_is_detected(ens):
    parts = _contributions(ens, [0, 16, 30], 8)
    parts[1].r += 1e-9
    with pytest.raises(IntegrityError):
        exchange_moments(parts, 30, 8)


def test_allreduce_over_threads(ens):
    parts = _contributions(ens, [0, 5, 13, 30], 8)
    ex = Exchange(3, timeout=10)
    plan = equal_plan(30, 3)
    got = run_ranks(plan, lambda ctx: ex.allreduce_moments(parts[ctx.rank], 30, 8), ex)
    assert all(m is got[0] for m in got)
    assert got[0] == accumulate_moments(ens)


def test_absent_rank_times_out():
    ex = Exchange(2, timeout=0.2)
    with pytest.raises(ExchangeError, match="timeout"):
        ex.allreduce(0, 1, sum)


def test_failing_rank_aborts_the_others():
    plan = equal_plan(10, 3)

    def body(ctx):
        if ctx.rank == 1:
            raise RuntimeError("rank 1 crashed")
        return ctx.exchange.allreduce(ctx.rank, ctx.rank, sum)

    with pytest.raises(RuntimeError, match="rank 1 crashed"):
        run_ranks(plan, body, Exchange(3, timeout=30))


def test_reducer_errors_reach_every_rank():
    plan = equal_plan(10, 2)

    def body(ctx):
        with pytest.raises(ZeroDivisionError):
            ctx.exchange.allreduce(ctx.rank, 0, lambda xs: 1 / sum(xs))
        return ctx.exchange.allreduce(ctx.rank, 1, sum)

    assert run_ranks(plan, body, Exchange(2, timeout=10)) == [2, 2]


def test_point_to_point_messages():
    ex = Exchange(3, timeout=1)
    ex.send(2, 0, "b", "second")
    ex.send(1, 0, "a", "first")
    assert ex.recv(0, src=1) == (1, "a", "first")
    assert ex.recv(0, tag="b") == (2, "b", "second")
    ex.mark_dead(1)
    with pytest.raises(StagingError):
        ex.send(0, 1, "x", b"")
    with pytest.raises(ExchangeError):
        ex.recv(2, timeout=0.05)


def test_cpu_kind_constant():
    assert CPU_KIND == "cpu" and not DeviceSpec("cpu", 1).is_accelerator and DeviceSpec("phi", 1).is_accelerator
    assert MomentSet.zeros(1.0, 2).is_zero()
