"""Domain types, validation, partner-map index algebra and channel timings."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    AsymmetricMatrix,
    ConfigError,
    NonBinaryEntry,
    NonzeroDiagonal,
    NotPartners,
    ValidationError,
)


def _is_power_of_two(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


@dataclass(frozen=True)
class ProtocolParams:
    """Contention-window ladder and number of TCPairs.

    Stage ``s`` uses the window ``W_s = 2**s * w0``; the last stage
    ``M - 1`` is the cap reached by repeated collisions.
    """

    w0: int
    m_stages: int = 4
    n_pairs: int = 1

    def __post_init__(self):
        for name in ("w0", "m_stages", "n_pairs"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v:
                raise ValidationError(f"{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.w0 < 2 or not _is_power_of_two(self.w0):
            raise ValidationError(f"w0 must be a power of two >= 2, got {self.w0}")
        if self.m_stages < 2:
            raise ValidationError("m_stages must be >= 2")
        if self.n_pairs < 1:
            raise ValidationError("n_pairs must be >= 1")

    @property
    def windows(self) -> tuple[int, ...]:
        return tuple(self.w0 << s for s in range(self.m_stages))

    @property
    def w_max(self) -> int:
        return self.w0 << (self.m_stages - 1)

    def window(self, stage: int) -> int:
        if not 0 <= stage < self.m_stages:
            raise ValidationError(f"stage {stage} outside [0, {self.m_stages - 1}]")
        return self.w0 << stage

    def with_pairs(self, n_pairs: int) -> "ProtocolParams":
        return replace(self, n_pairs=n_pairs)


@dataclass(frozen=True)
class FrameTimings:
    """Frame and spacing durations in symbol units.

    ``cts`` is only used by the conventional CSMA/CA comparator, whose
    handshake replaces PTA/SAK/DFTrigger with a single CTS.
    """

    rts: int = 160
    pta: int = 72
    sak: int = 36
    dftrigger: int = 36
    ack: int = 112
    sifs: int = 28
    difs: int = 128
    phy_h: int = 128
    mac_h: int = 272
    payload: int = 8184
    slot: int = 50
    cts: int = 112

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or int(v) != v or v < 0:
                raise ValidationError(f"{f.name} must be a non-negative integer, got {v!r}")
            object.__setattr__(self, f.name, int(v))
        if self.slot <= 0:
            raise ValidationError("slot must be positive")

    def check_busy_order(self) -> None:
        """Require T_s > T_c > 0, which the throughput model relies on."""
        ts, tc = channel_times(self)
        if not ts > tc > 0:
            raise ValidationError(f"need T_s > T_c > 0, got T_s={ts}, T_c={tc}")

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "FrameTimings":
        known = {f.name for f in fields(cls)}
        bad = set(values) - known
        if bad:
            raise ConfigError(f"unknown timing keys: {sorted(bad)}")
        return cls(**{k: int(v) for k, v in values.items()})


def channel_times(timings: FrameTimings) -> tuple[int, int]:
    """Return ``(T_s, T_c)`` for a DS-CSMA/CA exchange.

    A success runs RTS, PTA, SAK and DFTrigger, each followed by a SIFS,
    then the superimposed data frame, a SIFS, the ACK and a DIFS. A
    collision costs only the RTS and a DIFS.
    """
    t = timings
    ts = (t.rts + t.pta + t.sak + t.dftrigger + 4 * t.sifs
          + t.phy_h + t.mac_h + t.payload + t.sifs + t.ack + t.difs)
    tc = t.rts + t.difs
    return ts, tc


def baseline_channel_times(timings: FrameTimings) -> tuple[int, int]:
    """RTS/CTS exchange of conventional CSMA/CA with the same frame sizes."""
    t = timings
    ts = (t.rts + t.sifs + t.cts + t.sifs + t.phy_h + t.mac_h + t.payload
          + t.sifs + t.ack + t.difs)
    tc = t.rts + t.difs
    return ts, tc


def refusal_time(timings: FrameTimings) -> int:
    """Channel time consumed when the partner declines in its SAK."""
    t = timings
    return t.rts + t.sifs + t.pta + t.sifs + t.sak + t.difs


@dataclass(frozen=True)
class CounterIndex:
    """1-based identity ``T_{station, counter}``."""

    station: int
    counter: int


@dataclass(frozen=True, eq=False)
class PartnerMap:
    matrix: np.ndarray
    n_stations: int

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.int8, copy=True)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def degrees(self) -> tuple[int, ...]:
        """J_i, the number of PTCounters held by each station."""
        return tuple(int(x) for x in self.matrix.sum(axis=1))

    @property
    def n_total(self) -> int:
        """Sum of all entries; each unordered pair counts twice."""
        return int(self.matrix.sum())

    @property
    def n_pairs(self) -> int:
        return self.n_total // 2

    def edges(self) -> list[tuple[int, int]]:
        """Unordered pairs ``(i, i')`` with ``i < i'`` in 1-based ids."""
        iu, ju = np.nonzero(np.triu(self.matrix, 1))
        return [(int(a) + 1, int(b) + 1) for a, b in zip(iu, ju)]

    def __eq__(self, other):
        return isinstance(other, PartnerMap) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())


def validate_partner_map(matrix) -> PartnerMap:
    a = np.asarray(matrix)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"partner map must be square, got shape {a.shape}")
    if not np.isin(a, (0, 1)).all():
        raise NonBinaryEntry("partner map entries must be 0 or 1")
    if np.any(np.diag(a) != 0):
        raise NonzeroDiagonal("a station cannot partner with itself")
    if not np.array_equal(a, a.T):
        raise AsymmetricMatrix("partner map must be symmetric")
    return PartnerMap(matrix=a.astype(np.int8), n_stations=a.shape[0])


def partner_of(pmap: PartnerMap, station_i: int, station_k: int) -> tuple[CounterIndex, CounterIndex]:
    """Counter indices of the TCPair formed by stations ``i`` and ``i'``.

    The counter id on station ``i`` is the running count of partners of
    ``i`` up to and including ``i'``.
    """
    n = pmap.n_stations
    for s in (station_i, station_k):
        if not 1 <= s <= n:
            raise ValidationError(f"station {s} outside [1, {n}]")
    a = pmap.matrix
    i, k = station_i - 1, station_k - 1
    if a[i, k] == 0:
        raise NotPartners(f"stations {station_i} and {station_k} are not partners")
    j = int(a[i, : k + 1].sum())
    jp = int(a[k, : i + 1].sum())
    return CounterIndex(station_i, j), CounterIndex(station_k, jp)


def tcpairs(pmap: PartnerMap) -> list[tuple[CounterIndex, CounterIndex]]:
    return [partner_of(pmap, i, k) for i, k in pmap.edges()]


# --- configuration files -------------------------------------------------

def parse_config_text(text: str) -> tuple[dict[str, str], np.ndarray | None]:
    """Parse ``key = value`` lines and an optional ``[matrix]`` block.

    Blank lines and ``#`` comments are ignored. Matrix rows hold 0/1
    entries separated by spaces or commas; the block runs to the end of
    the file or to the next ``[section]`` header.
    """
    values: dict[str, str] = {}
    rows: list[list[int]] = []
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section != "matrix":
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if section == "matrix":
            try:
                rows.append([int(tok) for tok in line.replace(",", " ").split()])
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad matrix row {raw!r}") from exc
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        values[key.lower()] = val
    matrix = None
    if rows:
        if len({len(r) for r in rows}) != 1:
            raise ConfigError("matrix rows have different lengths")
        matrix = np.array(rows, dtype=np.int64)
    return values, matrix


def load_config(path) -> tuple[dict[str, str], np.ndarray | None]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config_text(text)


def timing_fields() -> Iterable[str]:
    return tuple(f.name for f in fields(FrameTimings))


def format_matrix(matrix) -> str:
    return "[matrix]\n" + "\n".join(" ".join(str(int(x)) for x in row) for row in np.asarray(matrix)) + "\n"
