"""Monte-Carlo simulation of DS-CSMA/CA and of conventional CSMA/CA.

Time is measured in backoff slots. A transmission attempt happens when a
counter reaches zero at the start of a slot; every other counter is frozen
while the channel is busy and resumes afterwards (the DIFS is part of the
busy time). A counter redrawn as zero therefore transmits in the first
slot after the busy period.

Randomness: each TCPair (or station, for the baseline) owns a PCG64 stream
spawned from ``numpy.random.SeedSequence(seed)``. Windows are powers of
two, so a draw on ``[0, W)`` is the top ``log2 W`` bits of one 64-bit
output. Refusals use one extra spawned stream.
"""

from __future__ import annotations

import heapq
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Sequence

import numpy as np

from .core import (
    FrameTimings,
    PartnerMap,
    ProtocolParams,
    baseline_channel_times,
    channel_times,
    refusal_time,
)
from .errors import ValidationError

Z95 = 1.959963984540054
MIN_HORIZON = 10_000
_BUF = 1024


@dataclass
class SimStats:
    mode: str
    n_units: int
    w0: int
    m_stages: int
    seed: int
    slots_elapsed: int = 0          # idle backoff slots
    virtual_slots: int = 0          # idle slots plus one per transmission event
    busy_time_success: int = 0
    busy_time_collision: int = 0
    busy_time_refusal: int = 0
    successes: int = 0
    collisions: int = 0
    refusals: int = 0
    attempts: int = 0
    collision_attempts: int = 0
    slot: int = 50
    payload: int = 8184
    collision_prob_hat: float = 0.0
    throughput_hat: float = 0.0
    attempt_rate_hat: float = 0.0
    ci95: tuple[float, float] = (0.0, 0.0)
    stderr: tuple[float, float] = (0.0, 0.0)
    reps: tuple = field(default=(), repr=False)

    @property
    def total_time(self) -> int:
        return (self.slots_elapsed * self.slot + self.busy_time_success
                + self.busy_time_collision + self.busy_time_refusal)

    def finalize(self) -> "SimStats":
        self.collision_prob_hat = self.collision_attempts / self.attempts if self.attempts else 0.0
        tt = self.total_time
        self.throughput_hat = self.successes * self.payload / tt if tt else 0.0
        denom = self.n_units * self.virtual_slots
        self.attempt_rate_hat = self.attempts / denom if denom else 0.0
        return self


class _Streams:
    """Buffered per-unit 64-bit generators."""

    def __init__(self, seed: int, n: int):
        children = np.random.SeedSequence(seed).spawn(n + 1)
        self.gens = [np.random.PCG64(c) for c in children]
        self.bufs: list[list[int]] = [[] for _ in range(n + 1)]

    def raw(self, k: int) -> int:
        b = self.bufs[k]
        if not b:
            b.extend(self.gens[k].random_raw(_BUF).tolist()[::-1])
        return b.pop()

    def uniform(self, k: int) -> float:
        # 53-bit float in [0, 1)
        return (self.raw(k) >> 11) * (1.0 / 9007199254740992.0)


def _run(mode: str, unit_of: Sequence[int], partner: Sequence[int], n_units: int,
         w0: int, m_stages: int, horizon: int, seed: int, ts: int, tc: int,
         timings: FrameTimings, refuse_prob: float = 0.0) -> SimStats:
    if horizon < MIN_HORIZON:
        raise ValidationError(f"horizon must be at least {MIN_HORIZON} slots")
    if not 0.0 <= refuse_prob <= 1.0:
        raise ValidationError("refuse_prob must lie in [0, 1]")
    n_counters = len(unit_of)
    top = m_stages - 1
    k0 = w0.bit_length() - 1
    shifts = [64 - (k0 + s) for s in range(m_stages)]
    streams = _Streams(seed, n_units)
    raw = streams.raw
    refuse_stream = n_units
    tr = refusal_time(timings)

    # Heap entries are (expiry, counter, version). Redrawing a counter that
    # is not at zero (the partner after a success) leaves a stale entry
    # behind, recognised by its outdated version.
    stage = [0] * n_counters
    version = [0] * n_counters
    heap = [(raw(unit_of[c]) >> shifts[0], c, 0) for c in range(n_counters)]
    heapq.heapify(heap)
    push, pop = heapq.heappush, heapq.heappop

    def redraw(c, e, st):
        stage[c] = st
        v = version[c] + 1
        version[c] = v
        push(heap, (e + (raw(unit_of[c]) >> shifts[st]), c, v))

    warm = min(horizon // 20, 100_000)
    stats = SimStats(mode=mode, n_units=n_units, w0=w0, m_stages=m_stages, seed=seed,
                     slot=timings.slot, payload=timings.payload)
    vs = 0              # virtual slots since start, warm-up included
    last = 0
    idle = succ = coll = refu = att = catt = meas_vs = 0
    while meas_vs < horizon:
        e, c, v = heap[0]
        if version[c] != v:
            pop(heap)
            continue
        zeros = []
        while heap and heap[0][0] == e:
            _, c, v = pop(heap)
            if version[c] == v:
                zeros.append(c)
        gap = e - last
        measuring = vs >= warm
        vs += gap + 1
        last = e
        k = len(zeros)
        if k == 1:
            c = zeros[0]
            q = partner[c]
            refused = (refuse_prob > 0.0 and q >= 0
                       and streams.uniform(refuse_stream) < refuse_prob)
            if refused:
                # partner declines: it resets, the initiator backs off as after a failure
                redraw(c, e, stage[c] + 1 if stage[c] < top else top)
                redraw(q, e, 0)
            else:
                redraw(c, e, 0)
                if q >= 0:
                    redraw(q, e, 0)
            if measuring:
                idle += gap
                att += 1
                meas_vs += gap + 1
                if refused:
                    refu += 1
                else:
                    succ += 1
        else:
            for c in zeros:
                redraw(c, e, stage[c] + 1 if stage[c] < top else top)
            if measuring:
                idle += gap
                coll += 1
                att += k
                catt += k
                meas_vs += gap + 1

    stats.slots_elapsed = idle
    stats.virtual_slots = meas_vs
    stats.successes = succ
    stats.collisions = coll
    stats.refusals = refu
    stats.attempts = att
    stats.collision_attempts = catt
    stats.busy_time_success = succ * ts
    stats.busy_time_collision = coll * tc
    stats.busy_time_refusal = refu * tr
    return stats.finalize()


def simulate_pairs(params: ProtocolParams, timings: FrameTimings, horizon_slots: int,
                   seed: int) -> SimStats:
    """Independent TCPairs, two counters each, sharing one channel."""
    N = params.n_pairs
    unit_of = [c >> 1 for c in range(2 * N)]
    partner = [c ^ 1 for c in range(2 * N)]
    ts, tc = channel_times(timings)
    return _run("pairs", unit_of, partner, N, params.w0, params.m_stages,
                horizon_slots, seed, ts, tc, timings)


def simulate_stations(pmap: PartnerMap, params: ProtocolParams, timings: FrameTimings,
                      horizon: int, seed: int, refuse_prob: float = 0.0) -> SimStats:
    """Counters laid out by a partner map.

    Station ``i`` holds one counter per partner. Pair ``k`` is the k-th
    partnership in row-major order and owns counters ``2k`` (lower
    station id) and ``2k + 1``; it also owns the k-th random stream, so
    with ``refuse_prob = 0`` this reproduces :func:`simulate_pairs` for
    the same number of pairs. A station can take part in only one
    exchange at a time, which on a single shared channel holds
    automatically: any slot with two or more zero counters, including two
    on the same station, is a collision.
    """
    edges = pmap.edges()
    if not edges:
        raise ValidationError("partner map has no TCPairs")
    N = len(edges)
    unit_of = [c >> 1 for c in range(2 * N)]
    partner = [c ^ 1 for c in range(2 * N)]
    ts, tc = channel_times(timings)
    return _run("stations", unit_of, partner, N, params.w0, params.m_stages,
                horizon, seed, ts, tc, timings, refuse_prob=refuse_prob)


def simulate_baseline(n_stations: int, w0: int, m_stages: int, timings: FrameTimings,
                      horizon: int, seed: int) -> SimStats:
    """Conventional CSMA/CA: one counter per station, RTS/CTS exchange."""
    ProtocolParams(w0, m_stages, n_stations)
    ts, tc = baseline_channel_times(timings)
    return _run("baseline", list(range(n_stations)), [-1] * n_stations, n_stations,
                w0, m_stages, horizon, seed, ts, tc, timings)


def thread_cap() -> int:
    raw = os.environ.get("DSCSMA_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValidationError(f"DSCSMA_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def aggregate(runs: Sequence[SimStats]) -> SimStats:
    """Sum the counters and average the per-replication estimates."""
    if not runs:
        raise ValidationError("nothing to aggregate")
    first = runs[0]
    agg = SimStats(mode=first.mode, n_units=first.n_units, w0=first.w0,
                   m_stages=first.m_stages, seed=first.seed, slot=first.slot,
                   payload=first.payload)
    for name in ("slots_elapsed", "virtual_slots", "busy_time_success", "busy_time_collision",
                 "busy_time_refusal", "successes", "collisions", "refusals", "attempts",
                 "collision_attempts"):
        setattr(agg, name, sum(getattr(r, name) for r in runs))
    n = len(runs)
    ps = np.array([r.collision_prob_hat for r in runs])
    cs = np.array([r.throughput_hat for r in runs])
    agg.collision_prob_hat = float(math.fsum(ps) / n)
    agg.throughput_hat = float(math.fsum(cs) / n)
    agg.attempt_rate_hat = float(math.fsum(r.attempt_rate_hat for r in runs) / n)
    if n >= 2:
        se = (float(ps.std(ddof=1) / math.sqrt(n)), float(cs.std(ddof=1) / math.sqrt(n)))
    else:
        se = (0.0, 0.0)
    agg.stderr = se
    agg.ci95 = (Z95 * se[0], Z95 * se[1])
    agg.reps = tuple(runs)
    return agg


def replicate(sim_fn: Callable[[int], SimStats], n_reps: int, base_seed: int,
              workers: int | None = None) -> SimStats:
    """Run ``sim_fn(base_seed + r)`` for r < n_reps and aggregate.

    With more than one worker the runs go to a process pool, so
    ``sim_fn`` must be picklable (a ``functools.partial`` of a module
    function is). Results are combined in replication order either way.
    """
    if n_reps < 2:
        raise ValidationError("n_reps must be at least 2")
    seeds = [base_seed + r for r in range(n_reps)]
    workers = thread_cap() if workers is None else max(1, workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, n_reps)) as ex:
            runs = list(ex.map(sim_fn, seeds))
    else:
        runs = [sim_fn(s) for s in seeds]
    return aggregate(runs)


def pairs_fn(params: ProtocolParams, timings: FrameTimings, horizon: int):
    return partial(_pairs_entry, params, timings, horizon)


def _pairs_entry(params, timings, horizon, seed):
    return simulate_pairs(params, timings, horizon, seed)


def stations_fn(pmap: PartnerMap, params: ProtocolParams, timings: FrameTimings,
                horizon: int, refuse_prob: float = 0.0):
    return partial(_stations_entry, pmap, params, timings, horizon, refuse_prob)


def _stations_entry(pmap, params, timings, horizon, refuse_prob, seed):
    return simulate_stations(pmap, params, timings, horizon, seed, refuse_prob)


def baseline_fn(n_stations: int, w0: int, m_stages: int, timings: FrameTimings, horizon: int):
    return partial(_baseline_entry, n_stations, w0, m_stages, timings, horizon)


def _baseline_entry(n_stations, w0, m_stages, timings, horizon, seed):
    return simulate_baseline(n_stations, w0, m_stages, timings, horizon, seed)

