"""Explicit Markov chain over ``(m, n, i, j)`` for a fixed collision probability.

This is the brute-force reference used to check the closed-form engine in
:mod:`dscsma.analytic`. It only scales to small windows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse

from .core import ProtocolParams
from .errors import InvalidProbability, SolverFailure, ValidationError

DENSE_LIMIT = 5000


@dataclass(frozen=True)
class ChainState:
    m: int
    n: int
    i: int
    j: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.m, self.n, self.i, self.j)


@dataclass
class Chain:
    windows: tuple[int, ...]
    p: float
    states: list[tuple[int, int, int, int]]
    index: dict
    matrix: sparse.csr_matrix


class StationaryDistribution:
    """Stationary probabilities keyed by ``(m, n, i, j)`` tuples."""

    def __init__(self, states, probs: np.ndarray):
        self.states = list(states) if states is not None else None
        self.probs = np.asarray(probs, dtype=float)
        self._index = None if states is None else {s: k for k, s in enumerate(self.states)}

    def __getitem__(self, state) -> float:
        if isinstance(state, ChainState):
            state = state.as_tuple()
        if self._index is None:
            return float(self.probs[state])
        k = self._index.get(tuple(state))
        return 0.0 if k is None else float(self.probs[k])

    def items(self):
        return zip(self.states, self.probs)

    def block_mass(self, m: int, n: int) -> float:
        return float(sum(v for (a, b, _, _), v in self.items() if a == m and b == n))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["m", "n", "i", "j", "prob"])
            for (m, n, i, j), v in self.items():
                w.writerow([m, n, i, j, repr(float(v))])


def _windows_of(params) -> tuple[int, ...]:
    # A bare window list allows the single-stage oracle-only mode.
    if isinstance(params, ProtocolParams):
        return params.windows
    win = tuple(int(w) for w in params)
    if not win or any(w < 1 for w in win):
        raise ValidationError(f"bad window ladder {params!r}")
    return win


def build_chain(params: ProtocolParams | Sequence[int], p: float) -> Chain:
    """Assemble the row-stochastic transition matrix.

    ``params`` may be a :class:`ProtocolParams` or an explicit window
    ladder such as ``[2]``; the latter is how the M = 1 hand-checkable
    chain is built.
    """
    if not 0.0 <= p <= 1.0 or not np.isfinite(p):
        raise InvalidProbability(f"p must lie in [0, 1], got {p}")
    win = _windows_of(params)
    M = len(win)
    w0 = win[0]
    states = [(m, n, i, j) for m in range(M) for n in range(M)
              for i in range(win[m]) for j in range(win[n])]
    index = {s: k for k, s in enumerate(states)}
    up = lambda s: min(s + 1, M - 1)

    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []

    def add(k, target, v):
        if v != 0.0:
            rows.append(k)
            cols.append(index[target])
            vals.append(v)

    for k, (m, n, i, j) in enumerate(states):
        if i >= 1 and j >= 1:
            add(k, (m, n, i - 1, j - 1), 1.0)
        elif i == 0 and j == 0:
            a, b = up(m), up(n)
            v = 1.0 / (win[a] * win[b])
            for x in range(win[a]):
                for y in range(win[b]):
                    add(k, (a, b, x, y), v)
        else:
            v = (1.0 - p) / (w0 * w0)
            for x in range(w0):
                for y in range(w0):
                    add(k, (0, 0, x, y), v)
            if i == 0:
                a = up(m)
                for x in range(win[a]):
                    add(k, (a, n, x, j - 1), p / win[a])
            else:
                b = up(n)
                for y in range(win[b]):
                    add(k, (m, b, i - 1, y), p / win[b])

    S = len(states)
    mat = sparse.csr_matrix((vals, (rows, cols)), shape=(S, S))
    mat.sum_duplicates()
    return Chain(windows=win, p=float(p), states=states, index=index, matrix=mat)


def stationary(chain, tol: float = 1e-12, max_iter: int = 200_000) -> StationaryDistribution:
    """Solve ``pi T = pi`` with ``sum(pi) = 1``.

    Small chains use a dense direct solve; larger ones use power
    iteration on the lazy chain.
    """
    if isinstance(chain, Chain):
        T = chain.matrix
        states = chain.states
    else:
        T = sparse.csr_matrix(np.asarray(chain, dtype=float))
        states = None
    S = T.shape[0]

    if S <= DENSE_LIMIT:
        A = T.T.toarray() - np.eye(S)
        A[-1, :] = 1.0
        rhs = np.zeros(S)
        rhs[-1] = 1.0
        try:
            pi = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError as exc:
            raise SolverFailure(f"stationary solve failed: {exc}") from exc
    else:
        # Lazy chain (I + T) / 2: same stationary vector, no periodicity.
        pi = np.full(S, 1.0 / S)
        TT = T.T.tocsr()
        for it in range(1, max_iter + 1):
            nxt = 0.5 * (pi + TT @ pi)
            delta = np.abs(nxt - pi).sum()
            pi = nxt
            if delta < tol * 1e-2:
                break
    pi = np.where(np.abs(pi) < 1e-300, 0.0, pi)
    pi = pi / pi.sum()
    resid = np.abs(T.T @ pi - pi).max()
    if resid > tol:
        raise SolverFailure(f"stationary residual {resid:.3e} exceeds {tol:.1e}")
    return StationaryDistribution(states, pi)


def eta_of(dist: StationaryDistribution) -> float:
    """Probability that exactly one counter of the tagged pair is zero."""
    if dist.states is None:
        raise ValidationError("distribution carries no chain states")
    total = 0.0
    for (m, n, i, j), v in dist.items():
        if (i == 0) != (j == 0):
            total += v
    return float(total)
