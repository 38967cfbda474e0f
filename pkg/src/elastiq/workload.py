"""Queries, arrival profiles and batch readiness.

All times are integer milliseconds. Rates are tuples per second.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import NotEnoughTuples

_EPS = 1e-9


@dataclass(frozen=True)
class InputProfile:
    """Piecewise-constant arrival rate.

    segments are (start_ms, rate) pairs; each rate holds until the next
    start, the last one until end_ms. Tuples arrive in whole granules.
    """
    stream_id: str
    segments: tuple
    end_ms: int
    granule: int = 1

    def __post_init__(self):
        segs = tuple((int(t), float(r)) for t, r in self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise ValueError("profile needs at least one segment")
        if any(t2 <= t1 for (t1, _), (t2, _) in zip(segs, segs[1:])):
            raise ValueError("segment starts must be strictly increasing")
        if any(r < 0 for _, r in segs):
            raise ValueError("rates must be >= 0")
        if self.end_ms < segs[-1][0]:
            raise ValueError("end_ms precedes the last segment start")
        if self.granule < 1:
            raise ValueError("granule must be >= 1")

    @property
    def start_ms(self):
        return self.segments[0][0]

    def _spans(self):
        segs = self.segments
        for i, (t0, r) in enumerate(segs):
            t1 = segs[i + 1][0] if i + 1 < len(segs) else self.end_ms
            yield t0, t1, r

    def arrived(self, t_ms) -> float:
        """Continuous (unfloored) tuple count up to t."""
        total = 0.0
        for t0, t1, r in self._spans():
            if t_ms <= t0:
                break
            total += r * (min(t_ms, t1) - t0) / 1000.0
        return total

    def total(self) -> int:
        return cumulative_tuples(self, self.end_ms)

    def rate_at(self, t_ms) -> float:
        for t0, t1, r in self._spans():
            if t0 <= t_ms < t1:
                return r
        return 0.0

    def scaled(self, factor):
        return replace(self, segments=tuple((t, r * factor) for t, r in self.segments))

    def with_rate_from(self, t_ms, rate):
        """Same history up to t_ms, then `rate` until the profile end."""
        t_ms = int(t_ms)
        segs = [(t, r) for t, r in self.segments if t < t_ms]
        if not segs:
            segs = [(t_ms, rate)]
        else:
            segs.append((t_ms, rate))
        end = max(self.end_ms, t_ms)
        return replace(self, segments=tuple(segs), end_ms=end)


def cumulative_tuples(profile: InputProfile, t_ms) -> int:
    """Whole tuples arrived at or before t."""
    x = profile.arrived(t_ms)
    g = profile.granule
    return int(math.floor(x / g + _EPS)) * g


def input_time(profile: InputProfile, count) -> int:
    """Earliest time at which `count` tuples have arrived."""
    if count <= 0:
        return profile.start_ms
    if count > profile.total():
        raise NotEnoughTuples(f"{count} tuples requested, stream {profile.stream_id} delivers {profile.total()}")
    # continuous crossing point, then settle onto the floored step function
    g = profile.granule
    need = -(-count // g) * g
    t = profile.end_ms
    acc = 0.0
    for t0, t1, r in profile._spans():
        seg = r * (t1 - t0) / 1000.0
        if r > 0 and acc + seg + _EPS >= need:
            t = t0 + int(math.ceil((need - acc) / r * 1000.0 - 1e-6))
            t = min(max(t, t0), t1)
            break
        acc += seg
    while t > profile.start_ms and cumulative_tuples(profile, t - 1) >= count:
        t -= 1
    while cumulative_tuples(profile, t) < count:
        t += 1
    return t


@dataclass(frozen=True)
class QuerySpec:
    query_id: str
    wind_start: int
    wind_end: int
    deadline: int
    input_stream: str
    model: str = "default"
    input_rate: float | None = None
    num_tuple_total: int | None = None

    def __post_init__(self):
        if not (self.wind_start < self.wind_end <= self.deadline):
            raise ValueError(f"query {self.query_id}: need wind_start < wind_end <= deadline")


def window_offset(profile, q: QuerySpec) -> int:
    """Tuples that arrived strictly before the window opens."""
    return cumulative_tuples(profile, q.wind_start - 1)


def tuples_in_window(profile, q: QuerySpec) -> int:
    return cumulative_tuples(profile, q.wind_end) - window_offset(profile, q)


@dataclass
class QuerySimState:
    spec: QuerySpec
    total: int
    offset: int = 0
    consumed: int = 0
    batches_done: int = 0
    batch_size: int = 1
    folds: int = 0
    unfolded: int = 0
    next_brt: int = 0
    bst: int = 0
    bet: int = 0
    bct: int = 0
    fat: int = 0
    pat: int = 0
    slack: int = 0
    ready: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def pending(self):
        return self.total - self.consumed

    @property
    def qid(self):
        return self.spec.query_id


def make_state(spec: QuerySpec, profile: InputProfile, total=None) -> QuerySimState:
    n = tuples_in_window(profile, spec) if total is None else total
    return QuerySimState(spec=spec, total=n, offset=window_offset(profile, spec))


def next_brt(state: QuerySimState, profile: InputProfile) -> int:
    """Time at which the next batch of the query has all its tuples."""
    if state.pending <= 0:
        raise ValueError("query has no pending tuples")
    if state.pending <= state.batch_size:
        # final batch: the window has to close before the rest is known
        last = input_time(profile, state.offset + state.total) if state.total else profile.start_ms
        return max(state.spec.wind_end, last)
    return input_time(profile, state.offset + state.consumed + state.batch_size)


def estimate_rate(arrival_log, now_ms, window_ms) -> float:
    """Mean rate over (now - window, now] from (time_ms, count) records."""
    if window_ms <= 0:
        raise ValueError("window must be > 0")
    lo = now_ms - window_ms
    n = sum(c for t, c in arrival_log if lo < t <= now_ms)
    return n / (window_ms / 1000.0)
