"""Choice of the initial window, of the number of TCPairs and of the partner map."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import analytic
from .core import FrameTimings, ProtocolParams, channel_times, validate_partner_map
from .errors import (
    EmptyFrontier,
    InfeasibleTarget,
    NonPositiveDiscriminant,
    NoPositiveRoot,
    TooLarge,
    ValidationError,
)

log = logging.getLogger(__name__)

FRONTIER_CAP = 10_000
BRUTE_FORCE_EDGES = 22
SEARCH_EXPONENTS = range(1, 15)   # direct search over 2 .. 2**14


# --- throughput evaluators -----------------------------------------------------

@lru_cache(maxsize=4096)
def full_throughput(w0: int, n_pairs: int, m_stages: int, timings: FrameTimings) -> float:
    """Throughput at the self-consistent collision probability."""
    params = ProtocolParams(w0, m_stages, n_pairs)
    return analytic.ds_throughput(params, timings)[2]


def uniform_throughput(w0: int, n_pairs: int, m_stages: int, timings: FrameTimings) -> float:
    """Throughput with the attempt rate of a window that never grows.

    This is the attempt rate behind the relaxed closed forms; it ignores
    both the stage ladder and N.
    """
    return analytic.throughput(analytic.uniform_eta(w0), n_pairs, timings)


EVALUATORS = {"full": full_throughput, "uniform": uniform_throughput}


def _evaluator(name: str):
    try:
        return EVALUATORS[name]
    except KeyError:
        raise ValidationError(f"unknown evaluator {name!r}; choose from {sorted(EVALUATORS)}") from None


# --- initial window ---------------------------------------------------------

@dataclass
class WindowChoice:
    relaxed: float
    candidates: tuple[int, ...]
    chosen: int
    c_values: dict
    evaluator: str = "uniform"
    fallback: bool = False
    c_values_full: dict = field(default_factory=dict)


def gamma_of(timings: FrameTimings) -> float:
    _, tc = channel_times(timings)
    return math.sqrt(tc / timings.slot)


def relaxed_w0(n_pairs: float, gamma: float) -> float:
    """Real-valued window whose uniform-window attempt rate is sqrt(2)/(N gamma)."""
    x = n_pairs * gamma
    rad = 9 / 8 * x * x - 21 * math.sqrt(2) / 8 * x + 1 / 16
    if rad < 0:
        raise NonPositiveDiscriminant(f"radicand {rad:.4g} < 0 for N*gamma = {x:.4g}")
    return 3 / (2 * math.sqrt(2)) * x - 3 / 4 + math.sqrt(rad)


def _power_neighbours(x: float) -> tuple[int, int]:
    if x <= 2:
        return 2, 4
    lo = 1 << int(math.floor(math.log2(x)))
    return lo, lo * 2


def optimal_w0(n_pairs: int, timings: FrameTimings, m_stages: int = 4,
               evaluator: str = "uniform", with_full: bool = False) -> WindowChoice:
    """Pick W0 from the two powers of two around the relaxed optimum.

    The default evaluator ranks the candidates with the uniform-window
    attempt rate, the same model that produces the relaxed optimum.
    ``evaluator="full"`` ranks them with the fixed-point model instead.
    ``with_full`` also records fixed-point throughput for reporting.
    """
    if n_pairs < 2:
        raise ValidationError("n_pairs must be at least 2")
    timings.check_busy_order()
    ev = _evaluator(evaluator)
    try:
        relaxed = relaxed_w0(n_pairs, gamma_of(timings))
        cands = _power_neighbours(relaxed)
        fallback = False
    except NonPositiveDiscriminant as exc:
        log.info("relaxed window unavailable (%s); searching powers of two", exc)
        relaxed = float("nan")
        cands = tuple(1 << k for k in SEARCH_EXPONENTS)
        fallback = True
    c_values = {w: ev(w, n_pairs, m_stages, timings) for w in cands}
    chosen = max(cands, key=lambda w: (c_values[w], -w))
    full = {}
    if with_full:
        full = {w: full_throughput(w, n_pairs, m_stages, timings) for w in cands}
    return WindowChoice(relaxed=relaxed, candidates=tuple(cands), chosen=chosen,
                        c_values=c_values, evaluator=evaluator, fallback=fallback,
                        c_values_full=full)


# --- number of TCPairs ---------------------------------------------------------

@dataclass
class PairCountChoice:
    relaxed: float
    candidates: tuple[int, int]
    candidate_choice: int
    chosen: int
    c_values: dict
    closed_form: float
    printed_form: float
    eta: float


def pair_count_quadratic(eta: float, tc_over_tau: float) -> tuple[float, float, float]:
    """Coefficients ``(a, b, c)`` of ``a N^2 + b N + c = 0`` for the relaxed optimum."""
    a = (tc_over_tau - 1.0) * eta * eta / 2
    b = eta + eta * eta / 2
    return a, b, -1.0


def relaxed_n(eta: float, tc_over_tau: float) -> float:
    a, b, c = pair_count_quadratic(eta, tc_over_tau)
    if a == 0:
        if b <= 0:
            raise NoPositiveRoot("degenerate quadratic")
        return -c / b
    disc = b * b - 4 * a * c
    if disc < 0:
        raise NoPositiveRoot(f"negative discriminant {disc}")
    # Stable form of (-b + sqrt(disc)) / (2a) when a is tiny.
    root = 2 * (-c) / (b + math.sqrt(disc))
    if root <= 0:
        raise NoPositiveRoot(f"root {root} is not positive")
    return root


def closed_form_n(eta: float, tc_over_tau: float, literal: bool = False) -> float:
    """Square-root form of the same root.

    With ``literal=True`` the radicand uses ``2 T_c / eta`` (in slot
    units) in place of ``2 T_c / tau``; this variant does not solve the
    quadratic and is kept only for comparison.
    """
    g = tc_over_tau
    inner = 2 * g / eta if literal else 2 * g
    rad = eta * eta / 4 + eta + inner - 1
    return (math.sqrt(rad) - (1 + eta / 2)) / ((g - 1) * eta)


def optimal_n(w0: int, timings: FrameTimings, m_stages: int = 4, refine: bool = True,
              max_steps: int = 10_000) -> PairCountChoice:
    """Pick N around the relaxed optimum, ranked by the fixed-point model.

    The better of the two integer neighbours is returned as
    ``candidate_choice``. With ``refine`` the search then walks uphill
    one step at a time until neither neighbour is better, so ``chosen``
    is a local maximum of the fixed-point throughput in N.
    """
    if w0 < 2:
        raise ValidationError("w0 must be at least 2")
    timings.check_busy_order()
    _, tc = channel_times(timings)
    g = tc / timings.slot
    eta = analytic.uniform_eta(w0)
    root = relaxed_n(eta, g)
    lo = max(1, int(math.floor(root)))
    hi = lo + 1
    c_values: dict[int, float] = {}

    def C(n):
        if n not in c_values:
            c_values[n] = full_throughput(w0, n, m_stages, timings)
        return c_values[n]

    first = max((lo, hi), key=lambda n: (C(n), -n))
    chosen = first
    if refine:
        for _ in range(max_steps):
            up = C(chosen + 1)
            down = C(chosen - 1) if chosen > 1 else -math.inf
            here = C(chosen)
            if here >= up and here >= down:
                break
            chosen = chosen + 1 if up >= down else chosen - 1
    return PairCountChoice(relaxed=root, candidates=(lo, hi), candidate_choice=first,
                           chosen=chosen, c_values=dict(sorted(c_values.items())),
                           closed_form=closed_form_n(eta, g),
                           printed_form=closed_form_n(eta, g, literal=True), eta=eta)


# --- partner map --------------------------------------------------------------

def degrees(B: np.ndarray) -> np.ndarray:
    return np.asarray(B).sum(axis=1)


def q_value(B: np.ndarray) -> int:
    d = degrees(B)
    return int((d * d).sum())


def degree_variance(B: np.ndarray) -> float:
    return float(np.var(degrees(B)))


@dataclass
class MapSearchState:
    current_set: list
    removed_pairs: int
    q_value: int
    history: list = field(default_factory=list)
    truncated: bool = False

    def summary(self) -> dict:
        first = self.current_set[0]
        return {
            "Q": self.q_value,
            "variance": degree_variance(first),
            "v": self.removed_pairs,
            "frontier_size": len(self.current_set),
            "truncated": self.truncated,
        }


def _check_target(S: np.ndarray, target_n: int) -> int:
    total = int(S.sum())
    if target_n < 0 or target_n % 2 or target_n > total:
        raise InfeasibleTarget(f"target {target_n} must be even and within [0, {total}]")
    return total


def greedy_partner_map(S, target_n: int, first_only: bool = False,
                       frontier_cap: int = FRONTIER_CAP) -> MapSearchState:
    """Remove highest-degree-sum edges until ``target_n`` entries remain.

    Every matrix in the frontier keeps all edges whose endpoint degree
    sum ties for the maximum over the whole frontier; the frontier is
    deduplicated and kept in canonical (byte) order.
    """
    S = validate_partner_map(S).matrix.astype(np.int8)
    total = _check_target(S, target_n)
    steps = (total - target_n) // 2
    frontier = [S.copy()]
    q = q_value(S)
    history = []
    truncated = False
    for v in range(steps):
        best = -1
        moves = []
        for B in frontier:
            deg = degrees(B)
            iu, ju = np.nonzero(np.triu(B, 1))
            if iu.size == 0:
                continue
            score = deg[iu] + deg[ju]
            top = int(score.max())
            if top > best:
                best, moves = top, []
            if top == best:
                moves.extend((B, int(a), int(b)) for a, b, s in zip(iu, ju, score) if s == top)
        if not moves:
            raise EmptyFrontier("no edges left to remove")
        if first_only:
            moves = [min(moves, key=lambda t: (t[0].tobytes(), t[1], t[2]))]
        seen = {}
        for B, a, b in moves:
            nb = B.copy()
            nb[a, b] = nb[b, a] = 0
            key = nb.tobytes()
            if key not in seen:
                seen[key] = nb
        new_q = q - 2 * best + 2
        keys = sorted(seen)
        if len(keys) > frontier_cap:
            log.warning("frontier of %d matrices truncated to %d", len(keys), frontier_cap)
            keys = keys[:frontier_cap]
            truncated = True
        frontier = [seen[k] for k in keys]
        for B in frontier:
            assert q_value(B) == new_q, "degree-sum bookkeeping broke"
        history.append({"v": v + 1, "g": best, "Q": new_q, "frontier": len(frontier)})
        q = new_q
    return MapSearchState(current_set=frontier, removed_pairs=steps, q_value=q,
                          history=history, truncated=truncated)


def brute_force_partner_map(S, target_n: int) -> tuple[int, list]:
    """Exhaustive minimum of Q over sub-maps with ``target_n`` entries."""
    S = validate_partner_map(S).matrix.astype(np.int8)
    _check_target(S, target_n)
    n = S.shape[0]
    iu, ju = np.nonzero(np.triu(S, 1))
    n_edges = iu.size
    if n_edges > BRUTE_FORCE_EDGES:
        raise TooLarge(f"{n_edges} edges exceed the enumeration bound {BRUTE_FORCE_EDGES}")
    k = target_n // 2
    inc = np.zeros((n_edges, n), dtype=np.int64)
    inc[np.arange(n_edges), iu] = 1
    inc[np.arange(n_edges), ju] = 1
    combos = np.array(list(itertools.combinations(range(n_edges), k)), dtype=np.int64)
    combos = combos.reshape(-1, k) if k else np.zeros((1, 0), dtype=np.int64)
    deg = inc[combos].sum(axis=1) if k else np.zeros((1, n), dtype=np.int64)
    qs = (deg * deg).sum(axis=1)
    q_min = int(qs.min())
    witnesses = []
    for row in combos[qs == q_min]:
        B = np.zeros((n, n), dtype=np.int8)
        B[iu[row], ju[row]] = 1
        B[ju[row], iu[row]] = 1
        witnesses.append(B)
    return q_min, witnesses
