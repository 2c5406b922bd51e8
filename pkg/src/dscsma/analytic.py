"""Closed-form stationary solution, its p-derivative, the fixed point and throughput.

The chain is split into blocks ``(m, n)`` of backoff-stage pairs. Inside a
block the interior states only feed the two boundary lines ``r`` (first
counter zero) and ``d`` (second counter zero) and the corner ``eps``, so
each block reduces to prefix sums over the probability mass injected into
it by collisions in lower stages. The capped stage ``M - 1`` also feeds
itself; those blocks need a small linear solve, done here in O(W).

Blocks are swept in stage order with ``eps_{0,0} = 1`` and rescaled at
the end. The derivative is linear in the same unknowns, so the same sweep
is reused with the derivative of each injection as the source.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .core import FrameTimings, ProtocolParams, baseline_channel_times, channel_times
from .errors import (
    DegenerateEta,
    InvalidProbability,
    NoConvergence,
    NoSignChange,
    SingularSystem,
    ValidationError,
)

P_MAX = 1.0 - 1e-12


# --- block primitives ------------------------------------------------------

def _prefix(v: np.ndarray) -> np.ndarray:
    out = np.zeros(len(v) + 1)
    np.cumsum(v, out=out[1:])
    return out


def _inject(wm: int, wn: int, R: np.ndarray, D: np.ndarray, kappa: float):
    """Boundary lines of a block fed by injections ``R``, ``D`` and ``kappa``.

    ``R[j-1]`` is the density entering every state ``(x, j-1)`` when a
    first counter is redrawn on ``W_m``; ``D`` is the mirror image and
    ``kappa`` is a uniform density over the whole block.
    """
    Rc = _prefix(R)
    Dc = _prefix(D)
    j = np.arange(1, wn)
    i = np.arange(1, wm)
    r = (Rc[np.minimum(j + wm, wn - 1)] - Rc[j]
         + Dc[np.minimum(wm - 1, wn - j)] + kappa * np.minimum(wm, wn - j))
    d = (Rc[np.minimum(wm - i, wn - 1)] + Dc[np.minimum(wm - 1, i + wn)] - Dc[i]
         + kappa * np.minimum(wm - i, wn))
    e = Rc[min(wm, wn - 1)] + Dc[min(wm - 1, wn)] + kappa * min(wm, wn)
    return r, d, float(e)


def _weight(t: np.ndarray, w: int) -> np.ndarray:
    # Number of states on the diagonals fed by a line of length t into a window w.
    t = np.asarray(t, dtype=float)
    return np.where(t <= w, t * (t + 1) / 2 + (w - t) * t, w * (w + 1) / 2)


def _mass(wm: int, wn: int, R: np.ndarray, D: np.ndarray, kappa: float) -> float:
    return float(R @ _weight(np.arange(1, wn), wm)
                 + D @ _weight(np.arange(1, wm), wn)
                 + kappa * _weight(np.arange(1, wn + 1), wm).sum())


def _suffix_solve(g: np.ndarray, c: float) -> np.ndarray:
    """Solve ``x_j = c * sum_{k > j} x_k + g_j``.

    With ``q = 1 + c`` the suffix sums obey ``S_j = q^-j sum_{k>=j} g_k q^k``.
    Here ``c <= 1/W_m`` and the line has fewer than ``W_m`` entries, so
    ``q**n`` stays below e.
    """
    if len(g) == 0:
        return g.copy()
    pw = (1.0 + c) ** np.arange(len(g))
    S = np.cumsum((g * pw)[::-1])[::-1] / pw
    return c * np.append(S[1:], 0.0) + g


def _mirror_solve(f: np.ndarray, c: float) -> np.ndarray:
    """Solve ``x_j = c * (sum_{i>j} x_i + sum_{i<=W-j} x_i) + f_j`` for j = 1..W-1.

    This is the top-stage diagonal block, where both counters feed back
    into their own block. Pairing ``j`` with ``W - j`` turns it into a
    scalar total plus a running sum.
    """
    W = len(f) + 1
    H = W // 2
    denom = 1.0 - c * (W - 1)
    if denom <= 0:
        raise SingularSystem("top-stage block is singular")
    T = f.sum() / denom
    x = np.empty(W - 1)
    k = np.arange(1, H + 1)
    s = 2 * c * T + f[k - 1] + f[W - k - 1]
    if H > 1:
        tail = np.cumsum(s[: H - 1][::-1])[::-1]
        mid = np.append(tail[1:], 0.0) + s[H - 1] / 2
        jj = np.arange(1, H)
        a = (2 * c * mid + c * s[: H - 1] + f[jj - 1] - f[W - jj - 1]) / (1 + c)
        x[jj - 1] = (s[: H - 1] + a) / 2
        x[W - jj - 1] = (s[: H - 1] - a) / 2
    x[H - 1] = s[H - 1] / 2
    return x


@dataclass
class _Block:
    r: np.ndarray
    d: np.ndarray
    e: float
    mass: float
    R: np.ndarray   # full injections, including any self-feedback
    D: np.ndarray
    kappa: float


def _sweep(windows: tuple[int, ...], p: float, base: dict | None = None) -> dict:
    """Unnormalised blocks with ``eps_{0,0} = 1``, or their p-derivative.

    With ``base`` given, the returned blocks hold d/dp of the blocks in
    ``base`` (``eps_{0,0}`` held fixed).
    """
    M = len(windows)
    top = M - 1
    out: dict[tuple[int, int], _Block] = {}

    def rline(src, m, n):
        return src[(m, n)].r if m >= n else src[(n, m)].d

    def dline(src, m, n):
        return src[(m, n)].d if m >= n else src[(n, m)].r

    def corner(src, m, n):
        return src[(max(m, n), min(m, n))].e

    def preds(s):
        return ([s - 1] if s >= 1 else []) + ([s] if s == top else [])

    deriv = base is not None
    for m in range(M):
        for n in range(m + 1):
            wm, wn = windows[m], windows[n]
            cm, cn = p / wm, p / wn
            R = np.zeros(wn - 1)
            D = np.zeros(wm - 1)
            if m >= 1:
                R += cm * rline(out, m - 1, n)
                if deriv:
                    R += rline(base, m - 1, n) / wm
            if n >= 1:
                D += cn * dline(out, m, n - 1)
                if deriv:
                    D += dline(base, m, n - 1) / wn
            kappa = sum(corner(out, a, b) for a in preds(m) for b in preds(n)
                        if (a, b) != (m, n)) / (wm * wn)
            if m == 0 and n == 0:
                kappa = 0.0 if deriv else 1.0 / wm

            if m == top and n == top:
                W, c = wm, cm
                if deriv:
                    x0 = base[(m, n)].r
                    R = R + x0 / W
                    D = D + x0 / W
                g, _, e0 = _inject(W, W, R, D, kappa)
                w = (W - np.arange(1, W)) / W ** 2
                xa = _mirror_solve(g, c)
                xb = _mirror_solve(w, c)
                den = 1.0 - 1.0 / W - 2 * c * xb.sum()
                if den <= 0:
                    raise SingularSystem("corner equation of the top block is singular")
                e = (e0 + 2 * c * xa.sum()) / den
                x = xa + e * xb
                Rf, Df, kf = R + c * x, D + c * x, kappa + e / W ** 2
                out[(m, n)] = _Block(x, x.copy(), e, _mass(W, W, Rf, Df, kf), Rf, Df, kf)
            elif m == top:
                if deriv:
                    R = R + base[(m, n)].r / wm
                g, _, _ = _inject(wm, wn, R, D, kappa)
                x = _suffix_solve(g, cm)
                Rf = R + cm * x
                _, dd, e = _inject(wm, wn, Rf, D, kappa)
                out[(m, n)] = _Block(x, dd, e, _mass(wm, wn, Rf, D, kappa), Rf, D, kappa)
            else:
                rr, dd, e = _inject(wm, wn, R, D, kappa)
                if m == n:
                    # R and D coincide on the diagonal; keep the mirror symmetry exact
                    dd = rr.copy()
                out[(m, n)] = _Block(rr, dd, e, _mass(wm, wn, R, D, kappa), R, D, kappa)
    return out


def _total_mass(blocks: dict) -> float:
    return sum(b.mass * (1 if m == n else 2) for (m, n), b in blocks.items())


# --- public types --------------------------------------------------------

@dataclass
class StateSummary:
    """Stationary boundary quantities for one collision probability ``p``.

    ``r[m][n]`` has length ``W_n - 1`` and holds P(m, n, 0, j) for
    j = 1..W_n-1; ``d[m][n]`` holds P(m, n, i, 0) for i = 1..W_m-1.
    """

    eps: np.ndarray
    r: list
    d: list
    pmn: np.ndarray
    eta: float
    p: float
    windows: tuple[int, ...]
    norm: float
    _blocks: dict = field(repr=False, default_factory=dict)

    @property
    def m_stages(self) -> int:
        return len(self.windows)

    def block_states(self, m: int, n: int) -> np.ndarray:
        """Full ``W_m x W_n`` array of P(m, n, i, j) rebuilt from the injections."""
        if m >= n:
            b = self._blocks[(m, n)]
            wm, wn = self.windows[m], self.windows[n]
            src = np.full((wm, wn), b.kappa)
            src[:, : wn - 1] += b.R[None, :]
            src[: wm - 1, :] += b.D[:, None]
            P = np.zeros((wm + 1, wn + 1))
            for i in range(wm - 1, -1, -1):
                P[i, :wn] = src[i] + P[i + 1, 1 : wn + 1]
            return P[:wm, :wn] / self.norm
        return self.block_states(n, m).T


@dataclass
class DerivativeSummary:
    deps: np.ndarray
    dr: list
    dd: list
    dpmn: np.ndarray
    deta: float


@dataclass
class TransitionMatrices:
    """0/1 operators mapping a block's injections to its boundary lines.

    ``r = a_rr @ R + a_dr @ D + kappa * u_r`` and
    ``d = a_rd @ R + a_dd @ D + kappa * u_d``, where ``u`` lists
    ``min(W_n, W_m - i)`` for i = 0..W_m-1 and ``u_d = u[1:]``.
    """

    a_rr: np.ndarray
    a_dr: np.ndarray
    a_rd: np.ndarray
    a_dd: np.ndarray
    u: np.ndarray
    u_r: np.ndarray

    @property
    def u_d(self) -> np.ndarray:
        return self.u[1:]


def transition_matrices(wm: int, wn: int) -> TransitionMatrices:
    j = np.arange(1, wn)[:, None]
    i = np.arange(1, wm)[:, None]
    jc = np.arange(1, wn)[None, :]
    ic = np.arange(1, wm)[None, :]
    a_rr = ((jc > j) & (jc <= np.minimum(j + wm, wn - 1))).astype(np.int8)
    a_dr = (ic <= np.minimum(wm - 1, wn - j)).astype(np.int8)
    a_rd = (jc <= np.minimum(wm - i, wn - 1)).astype(np.int8)
    a_dd = ((ic > i) & (ic <= np.minimum(wm - 1, i + wn))).astype(np.int8)
    u = np.minimum(wn, wm - np.arange(wm))
    u_r = np.minimum(wm, wn - np.arange(1, wn))
    return TransitionMatrices(a_rr, a_dr, a_rd, a_dd, u, u_r)


# --- solves --------------------------------------------------------------

def _check_p(p: float) -> float:
    p = float(p)
    if not (0.0 <= p < 1.0):
        raise InvalidProbability(f"p must lie in [0, 1), got {p}")
    return p


def _tables(blocks: dict, M: int, attr_r: str, attr_d: str, scale):
    r = [[None] * M for _ in range(M)]
    d = [[None] * M for _ in range(M)]
    for (m, n), b in blocks.items():
        r[m][n] = scale(getattr(b, attr_r))
        d[m][n] = scale(getattr(b, attr_d))
        if m != n:
            r[n][m] = d[m][n]
            d[n][m] = r[m][n]
    return r, d


def _summary_from_blocks(blocks: dict, windows, p) -> StateSummary:
    M = len(windows)
    tot = _total_mass(blocks)
    if not np.isfinite(tot) or tot <= 0:
        raise SingularSystem(f"normalising mass is {tot}")
    eps = np.zeros((M, M))
    pmn = np.zeros((M, M))
    for (m, n), b in blocks.items():
        eps[m, n] = eps[n, m] = b.e / tot
        pmn[m, n] = pmn[n, m] = b.mass / tot
    r, d = _tables(blocks, M, "r", "d", lambda v: v / tot)
    eta = sum((r[m][n].sum() + d[m][n].sum()) for m in range(M) for n in range(M))
    return StateSummary(eps=eps, r=r, d=d, pmn=pmn, eta=float(eta), p=p,
                        windows=tuple(windows), norm=tot, _blocks=blocks)


def solve_summary(params: ProtocolParams, p: float) -> StateSummary:
    p = _check_p(p)
    windows = params.windows
    return _summary_from_blocks(_sweep(windows, p), windows, p)


def eta(summary: StateSummary) -> float:
    return summary.eta


def solve_derivatives(params: ProtocolParams, p: float, summary: StateSummary | None = None) -> DerivativeSummary:
    """d/dp of every summary quantity.

    The unnormalised system has ``eps_{0,0}`` fixed at 1, so its
    derivative has ``d eps_{0,0} = 0``; the quotient rule on the
    normalising mass then restores the zero-sum condition.
    """
    p = _check_p(p)
    if summary is None or summary.p != p or summary.windows != params.windows:
        summary = solve_summary(params, p)
    base = summary._blocks
    dblocks = _sweep(params.windows, p, base=base)
    M = params.m_stages
    tot = summary.norm
    dtot = _total_mass(dblocks)

    def quot(v, dv):
        return (dv * tot - v * dtot) / tot ** 2

    deps = np.zeros((M, M))
    dpmn = np.zeros((M, M))
    dr = [[None] * M for _ in range(M)]
    dd = [[None] * M for _ in range(M)]
    for (m, n), b in base.items():
        db = dblocks[(m, n)]
        deps[m, n] = deps[n, m] = quot(b.e, db.e)
        dpmn[m, n] = dpmn[n, m] = quot(b.mass, db.mass)
        dr[m][n] = quot(b.r, db.r)
        dd[m][n] = quot(b.d, db.d)
        if m != n:
            dr[n][m] = dd[m][n]
            dd[n][m] = dr[m][n]
    deta = sum(dr[m][n].sum() + dd[m][n].sum() for m in range(M) for n in range(M))
    return DerivativeSummary(deps=deps, dr=dr, dd=dd, dpmn=dpmn, deta=float(deta))


def eta_at(params: ProtocolParams, p: float) -> float:
    return solve_summary(params, p).eta


def uniform_eta(w0: float) -> float:
    """Attempt rate of a pair whose window never grows, at p = 0."""
    w = float(w0)
    return (w - 1) / (w * w / 3 + w / 2 + 1 / 6)


# --- fixed point ------------------------------------------------------------

def fixed_point_residual(params: ProtocolParams, p: float) -> float:
    """``(1 - eta(p))**(N-1) + p - 1``; zero at the self-consistent p."""
    return (1.0 - eta_at(params, p)) ** (params.n_pairs - 1) + p - 1.0


def bisect_collision_prob(params: ProtocolParams, n_pairs: int | None = None, tol: float = 1e-14) -> float:
    """Bracketing root of ``1 - (1 - eta(p))**(N-1) - p`` on ``[0, 1)``."""
    if n_pairs is not None:
        params = params.with_pairs(n_pairs)
    N = params.n_pairs
    if N == 1:
        return 0.0

    def f(p):
        return 1.0 - (1.0 - eta_at(params, p)) ** (N - 1) - p

    lo, hi = 0.0, P_MAX
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return 0.0
    if not (flo > 0 and fhi < 0):
        raise NoSignChange(f"f(0)={flo:.3e}, f(1-)={fhi:.3e}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fm = f(mid)
        if fm == 0.0:
            return mid
        if fm > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def newton_collision_prob(params: ProtocolParams, timings_unused=None, tol: float = 1e-13,
                          max_iter: int = 60, p0: float = 0.5) -> float:
    """Newton iteration for the self-consistent collision probability.

    Works on ``g(p) = (1 - eta)**(N-1) + p - 1`` whose slope
    ``1 - (N-1) (1-eta)**(N-2) eta'`` is at least one because eta falls
    with p. Steps leaving (0, 1) are halved; after three rejected
    halvings the remaining bracket is handed to bisection.
    """
    N = params.n_pairs
    if N == 1:
        return 0.0
    lo_clamp, hi_clamp = 1e-12, P_MAX
    p = min(max(p0, lo_clamp), hi_clamp)
    lo, hi = 0.0, P_MAX
    for _ in range(max_iter):
        s = solve_summary(params, p)
        e = s.eta
        g = (1.0 - e) ** (N - 1) + p - 1.0
        if g > 0:
            hi = min(hi, p)
        elif g < 0:
            lo = max(lo, p)
        if abs(g) < tol:
            return p
        de = solve_derivatives(params, p, s).deta
        slope = 1.0 - (N - 1) * (1.0 - e) ** (N - 2) * de
        if not np.isfinite(slope) or slope == 0:
            break
        step = -g / slope
        rejected = 0
        cand = p + step
        while not (0.0 < cand < 1.0):
            rejected += 1
            if rejected > 3:
                break
            step *= 0.5
            cand = p + step
        if rejected > 3:
            return bisect_collision_prob(params)
        p = min(max(cand, lo_clamp), hi_clamp)
    raise NoConvergence(f"Newton did not reach |g| < {tol} in {max_iter} steps")


def collision_prob(params: ProtocolParams) -> float:
    """Newton with bisection as the fallback."""
    try:
        return newton_collision_prob(params)
    except NoConvergence:
        return bisect_collision_prob(params)


def solve_fixed_point(params: ProtocolParams) -> tuple[float, StateSummary]:
    p = collision_prob(params)
    return p, solve_summary(params, p)


# --- throughput ------------------------------------------------------------

def _throughput_full(eta_: float, N: int, payload: float, ts: float, tc: float, slot: float) -> float:
    idle = (1.0 - eta_) ** N
    succ = N * eta_ * (1.0 - eta_) ** (N - 1)
    den = ts * succ + tc * (1.0 - succ - idle) + slot * idle
    if den <= 0:
        raise DegenerateEta("empty throughput denominator")
    return payload * succ / den


def _check_eta(eta_, N):
    if not 0.0 <= eta_ <= 1.0:
        raise ValidationError(f"eta must lie in [0, 1], got {eta_}")
    if int(N) != N or N < 1:
        raise ValidationError(f"N must be a positive integer, got {N}")


def throughput(eta_: float, N: int, timings: FrameTimings) -> float:
    """Payload symbols delivered per symbol of channel time.

    Uses the expectation ratio directly, which stays finite (zero) at
    ``eta = 0``.
    """
    _check_eta(eta_, N)
    ts, tc = channel_times(timings)
    return _throughput_full(eta_, N, timings.payload, ts, tc, timings.slot)


def overhead_ratio(eta_: float, N: int, timings: FrameTimings) -> float:
    """``L_o``: success probability over the mean slot cost in units of tau."""
    _, tc = channel_times(timings)
    g = tc / timings.slot
    idle = (1.0 - eta_) ** N
    return N * eta_ * (1.0 - eta_) ** (N - 1) / (g - idle * (g - 1.0))


def throughput_simplified(eta_: float, N: int, timings: FrameTimings) -> float:
    """Same quantity through ``L_p / (T_s + tau / L_o - T_c)``."""
    _check_eta(eta_, N)
    if eta_ in (0.0, 1.0) and not (N == 1 and eta_ == 1.0):
        raise DegenerateEta("L_o vanishes at eta in {0, 1}")
    ts, tc = channel_times(timings)
    return timings.payload / (ts + timings.slot / overhead_ratio(eta_, N, timings) - tc)


def ds_throughput(params: ProtocolParams, timings: FrameTimings) -> tuple[float, float, float]:
    """``(p, eta, C)`` at the fixed point."""
    p, s = solve_fixed_point(params)
    return p, s.eta, throughput(s.eta, params.n_pairs, timings)


# --- conventional CSMA/CA comparator -----------------------------------------

def baseline_attempt_prob(p: float, w0: int, m_stages: int) -> float:
    """Per-slot attempt probability of one binary-exponential-backoff station.

    Windows run ``w0 .. 2**(M-1) w0``; the last stage repeats.
    """
    top = m_stages - 1
    b = np.array([p ** i for i in range(top)] + [p ** top / (1.0 - p)])
    w = np.array([w0 << i for i in range(m_stages)], dtype=float)
    b0 = 1.0 / np.sum(b * (w + 1) / 2)
    return float(b0 / (1.0 - p))


def baseline_collision_prob(n_stations: int, w0: int, m_stages: int) -> float:
    if n_stations == 1:
        return 0.0

    def h(p):
        return 1.0 - (1.0 - baseline_attempt_prob(p, w0, m_stages)) ** (n_stations - 1) - p

    try:
        return float(optimize.brentq(h, 0.0, P_MAX, xtol=1e-15, maxiter=500))
    except (ValueError, RuntimeError) as exc:
        raise NoConvergence(f"baseline fixed point failed: {exc}") from exc


def baseline_csma_throughput(n_stations: int, w0: int, m_stages: int, timings: FrameTimings) -> float:
    p = baseline_collision_prob(n_stations, w0, m_stages)
    tau = baseline_attempt_prob(p, w0, m_stages)
    ts, tc = baseline_channel_times(timings)
    return _throughput_full(tau, n_stations, timings.payload, ts, tc, timings.slot)
