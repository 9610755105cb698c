"""Rank partitioning, worker waves and the deterministic moment exchange.

Ranks are simulated in-process.  Each rank runs in its own thread with a
private ensemble slice and talks to the others only through an
:class:`Exchange` (allreduce of moments, point-to-point byte messages).
"""

from __future__ import annotations

import heapq
import math
import queue
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np


from bulbsim.errors import ConfigError, ExchangeError, IntegrityError, StagingError
from bulbsim.hamiltonian import DEFAULT_CHUNK_SIZE, MomentSet, chunk_partials, seq_sum, upper_pairs

CPU_KIND = "cpu"


@dataclass(frozen=True)
class DeviceSpec:
    kind: str
    count: int
    weight: float | Fraction | int = 1
    threads: int = 1

    def __post_init__(self):
        if self.count < 0:
            raise ConfigError(f"device count must be >= 0, got {self.count}")
        if not self.weight > 0:
            raise ConfigError(f"device weight must be > 0, got {self.weight}")
        if self.threads < 1:
            raise ConfigError(f"device threads must be >= 1, got {self.threads}")

    @property
    def is_accelerator(self) -> bool:
        return self.kind != CPU_KIND


@dataclass(frozen=True)
class RankAssignment:
    rank_id: int
    kind: str
    theta_start: int
    theta_count: int
    weight: Fraction
    threads: int

    @property
    def theta_stop(self) -> int:
        return self.theta_start + self.theta_count

    @property
    def waves(self) -> int:
        return thread_iterations(self.theta_count, self.threads)


@dataclass(frozen=True)
class RankPlan:
    ranks: tuple[RankAssignment, ...]
    total_theta: int
    chunk_size: int = DEFAULT_CHUNK_SIZE

    def __len__(self) -> int:
        return len(self.ranks)

    def counts(self, kind: str | None = None) -> list[int]:
        return [r.theta_count for r in self.ranks if kind is None or r.kind == kind]

    def cpu_ranks(self) -> list[int]:
        return [r.rank_id for r in self.ranks if r.kind == CPU_KIND]

    def accelerator_ranks(self) -> list[int]:
        return [r.rank_id for r in self.ranks if r.kind != CPU_KIND]

    def stager_for(self, rank_id: int) -> int | None:
        """CPU partner that writes snapshots for accelerator rank ``rank_id``.

        Accelerator ranks are paired with CPU ranks round-robin in rank order.
        CPU ranks stage for themselves.
        """
        rank = self.ranks[rank_id]
        if rank.kind == CPU_KIND:
            return rank_id
        cpus = self.cpu_ranks()
        if not cpus:
            return None
        return cpus[self.accelerator_ranks().index(rank_id) % len(cpus)]

    def table(self) -> str:
        rows = [f"{'rank':>5} {'kind':>6} {'theta_start':>11} {'theta_count':>11} {'waves':>5}"]
        for r in self.ranks:
            rows.append(f"{r.rank_id:>5} {r.kind:>6} {r.theta_start:>11} {r.theta_count:>11} {r.waves:>5}")
        return "\n".join(rows)


def _as_fraction(w) -> Fraction:
    if isinstance(w, Fraction):
        return w
    if isinstance(w, int):
        return Fraction(w)
    return Fraction(str(w))


def apportion(n: int, weights: Sequence, method: str = "adams") -> list[int]:
    """Split ``n`` items among parties with the given positive weights.

    ``"adams"`` is the smallest-divisors method: every party first gets one
    item, then each further item goes to the party with the largest
    ``weight / current_count``.  It never pushes a heavy party above its
    ideal share while lighter parties are rounded down, so accelerator ranks
    stay at or below their quota and CPU ranks absorb rounding.
    ``"hamilton"`` is floor-then-largest-remainder.  Ties go to the lower
    index in both methods.
    """
    ws = [_as_fraction(w) for w in weights]
    k = len(ws)
    if k == 0:
        raise ConfigError("cannot apportion among zero ranks")
    if any(w <= 0 for w in ws):
        raise ConfigError("rank weights must be positive")
    if n < k:
        raise ConfigError(f"n_theta={n} is smaller than the rank count {k}")
    if method == "hamilton":
        total = sum(ws)
        quotas = [n * w / total for w in ws]
        counts = [math.floor(q) for q in quotas]
        order = sorted(range(k), key=lambda i: (-(quotas[i] - counts[i]), i))
        for i in order[: n - sum(counts)]:
            counts[i] += 1
        return counts
    if method != "adams":
        raise ConfigError(f"unknown apportionment method {method!r}")
    # Head start: the final divisor is at most total / (n - k), so every item
    # whose priority exceeds that bound is awarded anyway (at most n of them).
    total = sum(ws)
    counts = [max(1, math.ceil(w * (n - k) / total)) for w in ws]
    heap = [(-(w / c), i) for i, (w, c) in enumerate(zip(ws, counts))]
    heapq.heapify(heap)
    for _ in range(n - sum(counts)):
        _, i = heapq.heappop(heap)
        counts[i] += 1
        heapq.heappush(heap, (-(ws[i] / counts[i]), i))
    return counts


def make_plan(n_theta: int, devices: Sequence[DeviceSpec], chunk_size: int = DEFAULT_CHUNK_SIZE,
              method: str = "adams") -> RankPlan:
    """Assign contiguous theta ranges to ranks in device-list order."""
    if chunk_size < 1:
        raise ConfigError("chunk_size must be >= 1")
    kinds = []
    for dev in devices:
        kinds.extend([dev] * dev.count)
    if not kinds:
        raise ConfigError("the device list defines zero ranks")
    counts = apportion(n_theta, [d.weight for d in kinds], method)
    ranks = []
    start = 0
    for rank_id, (dev, count) in enumerate(zip(kinds, counts)):
        ranks.append(RankAssignment(rank_id, dev.kind, start, count, _as_fraction(dev.weight), dev.threads))
        start += count
    return RankPlan(tuple(ranks), n_theta, chunk_size)


def equal_plan(n_theta: int, n_ranks: int, threads: int = 1, chunk_size: int = DEFAULT_CHUNK_SIZE) -> RankPlan:
    return make_plan(n_theta, [DeviceSpec(CPU_KIND, n_ranks, 1, threads)], chunk_size)


def thread_iterations(local_theta_count: int, threads: int) -> int:
    """Number of sequential waves a pool of ``threads`` needs for the local bins."""
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    return -(-local_theta_count // threads)


def worker_blocks(theta_offset: int, count: int, workers: int, chunk_size: int) -> list[tuple[int, int]]:
    """Split local bins into at most ``workers`` contiguous, chunk-aligned blocks.

    Returns local ``(start, stop)`` pairs.  Chunks are dealt out as evenly as
    possible; a worker never splits a chunk.
    """
    if count == 0:
        return []
    first = theta_offset // chunk_size
    last = (theta_offset + count - 1) // chunk_size
    n_chunks = last - first + 1
    workers = max(1, min(workers, n_chunks))
    per, extra = divmod(n_chunks, workers)
    blocks = []
    c = first
    for w in range(workers):
        take = per + (1 if w < extra else 0)
        lo = max(c * chunk_size, theta_offset) - theta_offset
        hi = min((c + take) * chunk_size, theta_offset + count) - theta_offset
        blocks.append((lo, hi))
        c += take
    return blocks


class WorkerTeam:
    """Persistent worker threads of one rank.

    ``map`` hands item ``i`` to worker ``i``, runs item 0 on the calling
    thread and returns once every item is done (one wave with a barrier).
    Hand-off uses bare locks, which is much cheaper than a futures pool for
    the two short phases of every substep.
    """

    def __init__(self, workers: int, name: str = "worker"):
        if workers < 1:
            raise ConfigError(f"threads must be >= 1, got {workers}")
        self.workers = workers
        self._fn = None
        self._items: Sequence = ()
        self._results: list = [None] * workers
        self._errors: list = [None] * workers
        self._start = [threading.Lock() for _ in range(workers)]
        self._done = [threading.Lock() for _ in range(workers)]
        for lock in self._start + self._done:
            lock.acquire()
        self._closed = False
        self._threads = [threading.Thread(target=self._loop, args=(i,), name=f"{name}-{i}", daemon=True)
                         for i in range(1, workers)]
        for t in self._threads:
            t.start()

    def _loop(self, i: int):
        while True:
            self._start[i].acquire()
            if self._closed:
                return
            try:
                self._results[i] = self._fn(self._items[i])
            except BaseException as exc:
                self._errors[i] = exc
            self._done[i].release()

    def map(self, fn: Callable, items: Sequence) -> list:
        if self._closed:
            raise RuntimeError("worker team is closed")
        k = len(items)
        if k > self.workers:
            raise ValueError(f"{k} items for {self.workers} workers")
        if k == 0:
            return []
        self._fn, self._items = fn, items
        for i in range(1, k):
            self._start[i].release()
        first_error = None
        try:
            self._results[0] = fn(items[0])
        except BaseException as exc:
            first_error = exc
        for i in range(1, k):
            self._done[i].acquire()
        errors = [first_error] + self._errors[1:k]
        self._errors = [None] * self.workers
        results = self._results[:k]
        self._fn, self._items = None, ()
        for exc in errors:
            if exc is not None:
                raise exc
        return results

    def close(self):
        if self._closed:
            return
        self._closed = True
        for i in range(1, self.workers):
            self._start[i].release()
        for t in self._threads:
            t.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def chunk_blocks(theta_offset: int, count: int, chunk_size: int) -> list[tuple[int, int]]:
    """One local ``(start, stop)`` block per global chunk touched by the local bins."""
    if count == 0:
        return []
    first = theta_offset // chunk_size
    last = (theta_offset + count - 1) // chunk_size
    return [(max(c * chunk_size, theta_offset) - theta_offset,
             min((c + 1) * chunk_size, theta_offset + count) - theta_offset) for c in range(first, last + 1)]


# --------------------------------------------------------------------------
# moment reduction


@dataclass
class RankContribution:
    """One rank's share of a moment reduction.

    ``chunk_ids``/``hi``/``lo`` hold the chunk partials over the rank's bins.
    For chunks the rank covers only partly, the per-bin moments are kept in
    ``fragments`` so the reducer can rebuild the full chunk sum in theta order.
    """

    rank: int
    r: float
    n_flavors: int
    chunk_ids: np.ndarray
    hi: np.ndarray
    lo: np.ndarray
    fragments: dict = field(default_factory=dict)  # chunk -> (theta_start, bins_hi, bins_lo)


def make_contribution(rank: int, r: float, n_flavors: int, n_theta: int, chunk_size: int,
                      theta_offset: int, bin_hi: np.ndarray, bin_lo: np.ndarray) -> RankContribution:
    ids, c_hi, c_lo = chunk_partials(bin_hi, bin_lo, theta_offset, chunk_size)
    fragments = {}
    count = bin_hi.shape[0]
    for k, c in enumerate(ids):
        lo_g = max(c * chunk_size, theta_offset)
        hi_g = min((c + 1) * chunk_size, theta_offset + count)
        full_lo, full_hi = c * chunk_size, min((c + 1) * chunk_size, n_theta)
        if (lo_g, hi_g) != (full_lo, full_hi):
            sl = slice(lo_g - theta_offset, hi_g - theta_offset)
            fragments[int(c)] = (lo_g, bin_hi[sl], bin_lo[sl])
    return RankContribution(rank, float(r), n_flavors, ids, c_hi, c_lo, fragments)


def exchange_moments(contributions: Sequence[RankContribution], n_theta: int | None = None,
                     chunk_size: int = DEFAULT_CHUNK_SIZE) -> MomentSet:
    """Global moments from per-rank contributions, summed in chunk order.

    The result does not depend on how bins were spread across ranks: whole
    chunks come from whichever rank holds them, and chunks split across ranks
    are rebuilt from their per-bin moments in ascending theta order.
    """
    if not contributions:
        raise ExchangeError("no rank contributions to reduce")
    r = contributions[0].r
    n_flavors = contributions[0].n_flavors
    for c in contributions:
        if c.r != r:
            raise IntegrityError(f"rank {c.rank} contributed moments at r={c.r!r}, expected r={r!r}")
    whole: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    pieces: dict[int, list] = {}
    for c in contributions:
        for k, cid in enumerate(c.chunk_ids):
            cid = int(cid)
            if cid in c.fragments:
                pieces.setdefault(cid, []).append(c.fragments[cid])
            else:
                if cid in whole:
                    raise IntegrityError(f"chunk {cid} contributed twice")
                whole[cid] = (c.hi[k], c.lo[k])
    for cid, frags in pieces.items():
        if cid in whole:
            raise IntegrityError(f"chunk {cid} contributed both whole and in fragments")
        frags.sort(key=lambda f: f[0])
        expect = frags[0][0]
        for start, b_hi, _ in frags:
            if start != expect:
                raise ExchangeError(f"chunk {cid} is missing theta bins starting at {expect}")
            expect = start + b_hi.shape[0]
        if cid * chunk_size != frags[0][0] or (n_theta is not None and expect != min((cid + 1) * chunk_size, n_theta)):
            raise ExchangeError(f"chunk {cid} is incomplete")
        b_hi = np.concatenate([f[1] for f in frags])
        b_lo = np.concatenate([f[2] for f in frags])
        whole[cid] = seq_sum(b_hi, b_lo)
    ids = sorted(whole)
    if n_theta is not None:
        expected = list(range(-(-n_theta // chunk_size)))
        if ids != expected:
            missing = sorted(set(expected) - set(ids))
            raise ExchangeError(f"missing contributions for chunks {missing[:8]}")
    if not ids:
        return MomentSet.zeros(r, n_flavors)
    c_hi = np.stack([whole[i][0] for i in ids])
    c_lo = np.stack([whole[i][1] for i in ids])
    hi, lo = seq_sum(c_hi, c_lo)
    return MomentSet(r, hi, lo, n_flavors)


# --------------------------------------------------------------------------
# in-process transport


class Exchange:
    """Collective and point-to-point messaging among simulated ranks.

    Collectives have barrier semantics: every rank must call them the same
    number of times.  A rank that fails to arrive within ``timeout`` seconds
    breaks the barrier and every participant raises :class:`ExchangeError`.
    """

    def __init__(self, n_ranks: int, timeout: float = 60.0):
        if n_ranks < 1:
            raise ConfigError("an exchange needs at least one rank")
        self.n_ranks = n_ranks
        self.timeout = timeout
        self._cond = threading.Condition()
        self._slots: list = [None] * n_ranks
        self._arrived = 0
        self._generation = 0
        self._broken = False
        self._result = None
        self._error: BaseException | None = None
        self._mailboxes = [queue.Queue() for _ in range(n_ranks)]
        self._alive = set(range(n_ranks))
        self._lock = threading.Lock()

    def abort(self):
        """Break pending and future collectives, e.g. when a rank fails."""
        with self._cond:
            self._broken = True
            self._cond.notify_all()

    def allreduce(self, rank: int, value, reducer: Callable[[list], object]):
        """Every rank gets ``reducer([value_0, ..., value_{n-1}])`` (same object).

        The last rank to arrive runs the reducer; the result cannot depend on
        which rank that is because the reducer sees the values in rank order.
        """
        with self._cond:
            if self._broken:
                raise ExchangeError("the exchange was aborted")
            generation = self._generation
            self._slots[rank] = value
            self._arrived += 1
            if self._arrived == self.n_ranks:
                try:
                    self._result = reducer(list(self._slots))
                    self._error = None
                except BaseException as exc:  # re-raised on every rank below
                    self._error = exc
                self._slots = [None] * self.n_ranks
                self._arrived = 0
                self._generation += 1
                self._cond.notify_all()
            elif not self._cond.wait_for(lambda: self._generation != generation or self._broken, self.timeout):
                self._broken = True
                self._cond.notify_all()
                raise ExchangeError("a rank did not reach the exchange (timeout)")
            if self._generation == generation:
                raise ExchangeError("a rank did not reach the exchange (aborted)")
            if self._error is not None:
                raise self._error
            return self._result

    def allreduce_moments(self, contribution: RankContribution, n_theta: int, chunk_size: int) -> MomentSet:
        return self.allreduce(contribution.rank, contribution,
                              lambda cs: exchange_moments(cs, n_theta, chunk_size))

    def barrier(self, rank: int):
        self.allreduce(rank, None, lambda _: None)

    # point-to-point

    def mark_dead(self, rank: int):
        with self._lock:
            self._alive.discard(rank)

    def is_alive(self, rank: int) -> bool:
        with self._lock:
            return rank in self._alive

    def send(self, src: int, dst: int, tag: str, payload):
        if not 0 <= dst < self.n_ranks or not self.is_alive(dst):
            raise StagingError(f"rank {dst} is not available to receive from rank {src}")
        self._mailboxes[dst].put((src, tag, payload))

    def recv(self, dst: int, src: int | None = None, tag: str | None = None, timeout: float | None = None):
        """Next message for ``dst`` matching ``src``/``tag``; others are requeued."""
        box = self._mailboxes[dst]
        held = []
        try:
            while True:
                try:
                    msg = box.get(timeout=self.timeout if timeout is None else timeout)
                except queue.Empty as exc:
                    raise ExchangeError(f"rank {dst} timed out waiting for a message from {src}") from exc
                if (src is None or msg[0] == src) and (tag is None or msg[1] == tag):
                    return msg
                held.append(msg)
        finally:
            for msg in held:
                box.put(msg)


@dataclass
class RankContext:
    rank: int
    assignment: RankAssignment
    plan: RankPlan
    exchange: Exchange


def run_ranks(plan: RankPlan, fn: Callable[[RankContext], object], exchange: Exchange | None = None,
              timeout: float = 600.0) -> list:
    """Run ``fn`` once per rank, each in its own thread; return results by rank.

    The first failure aborts pending collectives and is re-raised.
    """
    exchange = exchange or Exchange(len(plan), timeout=timeout)
    results: list = [None] * len(plan)
    errors: list = [None] * len(plan)

    def target(i: int):
        try:
            results[i] = fn(RankContext(i, plan.ranks[i], plan, exchange))
        except BaseException as exc:
            errors[i] = exc
            exchange.abort()

    if len(plan) == 1:
        target(0)
    else:
        threads = [threading.Thread(target=target, args=(i,), name=f"rank-{i}") for i in range(len(plan))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    primary = [e for e in errors if e is not None and not isinstance(e, ExchangeError)]
    failures = primary or [e for e in errors if e is not None]
    if failures:
        raise failures[0]
    return results


def pair_count(n_flavors: int) -> int:
    return len(upper_pairs(n_flavors))
