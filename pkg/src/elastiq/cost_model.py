"""Duration and money models for query batches.

Processing time follows an Amdahl-style split into a serial and a
parallel per-tuple term plus a per-batch overhead. Aggregation time is a
piecewise-linear function of the number of intermediate results.
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .errors import DegenerateSamples, MalformedTimeline

TUPLES_UNBOUNDED = sys.maxsize


def to_ms(seconds: float) -> int:
    """Seconds to integer milliseconds, rounded up.

    The inner round() drops float noise so that 4.0000000001 s stays 4000 ms.
    """
    return math.ceil(round(seconds * 1000.0, 6))


@dataclass(frozen=True)
class ClusterConfig:
    id: int
    worker_nodes: int
    price_per_node_second: float

    def __post_init__(self):
        if self.worker_nodes < 1:
            raise ValueError("worker_nodes must be >= 1")
        if self.price_per_node_second <= 0:
            raise ValueError("price_per_node_second must be > 0")


def validate_config_set(configs, min_nodes=2):
    """Check ordering and the mandatory-node floor of a configuration list."""
    if not configs:
        raise ValueError("empty configuration set")
    for c in configs:
        if c.worker_nodes < min_nodes:
            raise ValueError(f"config {c.id} has {c.worker_nodes} nodes, below floor {min_nodes}")
    for a, b in zip(configs, configs[1:]):
        if not (b.id > a.id and b.worker_nodes > a.worker_nodes):
            raise ValueError("configs must be strictly increasing in id and worker_nodes")
    return list(configs)


@dataclass(frozen=True)
class ProcCostModel:
    a_serial: float = 0.0
    a_parallel: float = 0.0
    b_fixed: float = 0.0
    b_per_node: float = 0.0
    valid_nodes: tuple = (1, 1 << 30)
    fit_rms: float | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("a_serial", "a_parallel", "b_fixed", "b_per_node"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def per_tuple(self, nodes):
        return self.a_serial + self.a_parallel / nodes

    def overhead(self, nodes):
        return self.b_fixed + self.b_per_node / nodes

    def extrapolates(self, nodes) -> bool:
        lo, hi = self.valid_nodes
        return not (lo <= nodes <= hi)


@dataclass(frozen=True)
class AggCostModel:
    breakpoints: tuple = ()
    node_scale: tuple = (1.0, 0.0)

    def __post_init__(self):
        pts = tuple((int(b), float(s)) for b, s in self.breakpoints)
        object.__setattr__(self, "breakpoints", pts)
        object.__setattr__(self, "node_scale", tuple(float(v) for v in self.node_scale))
        xs = [b for b, _ in pts]
        if any(b2 <= b1 for b1, b2 in zip(xs, xs[1:])):
            raise ValueError("breakpoints must be strictly increasing in batch count")
        ys = [0.0] + [s for _, s in pts]
        if any(y2 < y1 for y1, y2 in zip(ys, ys[1:])):
            raise ValueError("aggregation time must be nondecreasing and >= 0")
        if pts and pts[0][0] < 1:
            raise ValueError("breakpoint batch counts must be >= 1")
        if pts and pts[0][0] == 1 and pts[0][1] != 0:
            raise ValueError("a single batch needs no aggregation: g(1) must be 0")
        if min(self.node_scale) < 0:
            raise ValueError("node_scale terms must be >= 0")

    def g(self, num_batches) -> float:
        if num_batches <= 1 or not self.breakpoints:
            return 0.0
        pts = self.breakpoints
        if pts[0][0] != 1:
            pts = ((1, 0.0),) + pts
        for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
            if num_batches <= x1:
                return y0 + (y1 - y0) * (num_batches - x0) / (x1 - x0)
        # past the last breakpoint: keep the last segment's slope
        (x0, y0), (x1, y1) = pts[-2], pts[-1]
        slope = max(0.0, (y1 - y0) / (x1 - x0))
        return y1 + slope * (num_batches - x1)


ZERO_AGG = AggCostModel()


@dataclass(frozen=True)
class PriceTable:
    machine_rate_per_hour: float
    platform_rate_per_hour: float
    minimum_billed_seconds: float = 60.0

    def __post_init__(self):
        if min(self.machine_rate_per_hour, self.platform_rate_per_hour, self.minimum_billed_seconds) <= 0:
            raise ValueError("price table fields must be > 0")

    @property
    def per_node_second(self):
        return (self.machine_rate_per_hour + self.platform_rate_per_hour) / 3600.0


def estimate_duration(model: ProcCostModel, nodes, tuples) -> float:
    """Seconds to process `tuples` on `nodes` nodes."""
    if nodes < 1 or tuples < 0:
        raise ValueError("need nodes >= 1 and tuples >= 0")
    return model.per_tuple(nodes) * tuples + model.overhead(nodes)


def estimate_duration_ms(model, nodes, tuples) -> int:
    return to_ms(estimate_duration(model, nodes, tuples))


def estimate_tuples(model: ProcCostModel, nodes, duration) -> int:
    """Largest whole tuple count that fits in `duration` seconds."""
    if duration < 0:
        return 0
    slack = duration - model.overhead(nodes)
    if slack < 0:
        return 0
    rate = model.per_tuple(nodes)
    if rate <= 0:
        return TUPLES_UNBOUNDED
    x = slack / rate
    if x >= TUPLES_UNBOUNDED:
        return TUPLES_UNBOUNDED
    t = int(math.floor(x))

    def fits(k):
        return estimate_duration(model, nodes, k) <= duration

    # the closed form can be off by float rounding; settle it by galloping + bisection
    while t > 0 and not fits(t):
        t = t // 2
    step = 1
    while t + step < TUPLES_UNBOUNDED and fits(t + step):
        t += step
        step *= 2
    hi = min(t + step, TUPLES_UNBOUNDED)
    while hi - t > 1:
        mid = (t + hi) // 2
        if fits(mid):
            t = mid
        else:
            hi = mid
    return t


def estimate_agg_duration(model: AggCostModel, nodes, num_batches) -> float:
    if num_batches < 1 or nodes < 1:
        raise ValueError("need num_batches >= 1 and nodes >= 1")
    if num_batches == 1:
        return 0.0
    c0, c1 = model.node_scale
    return model.g(num_batches) * (c0 + c1 / nodes)


def estimate_agg_duration_ms(model, nodes, num_batches) -> int:
    return to_ms(estimate_agg_duration(model, nodes, num_batches))


def fit_proc_model(samples) -> ProcCostModel:
    """Non-negative least-squares fit over the basis {t, t/n, 1, 1/n}.

    Args:
        samples: iterable of (nodes, tuples, observed_seconds).

    Returns:
        ProcCostModel with fit_rms set to the residual RMS in seconds.
    """
    rows = [(float(n), float(t), float(s)) for n, t, s in samples]
    if len(rows) < 4:
        raise DegenerateSamples(f"need at least 4 samples, got {len(rows)}")
    nodes = np.array([r[0] for r in rows])
    tuples = np.array([r[1] for r in rows])
    secs = np.array([r[2] for r in rows])
    if np.any(nodes < 1) or np.any(tuples < 0):
        raise DegenerateSamples("nodes must be >= 1 and tuples >= 0")
    if len(set(nodes)) < 2 or len(set(tuples)) < 2:
        raise DegenerateSamples("need >= 2 distinct node counts and >= 2 distinct tuple counts")
    A = np.column_stack([tuples, tuples / nodes, np.ones_like(nodes), 1.0 / nodes])
    if np.linalg.matrix_rank(A) < 4:
        raise DegenerateSamples("design matrix is rank-deficient")
    # column scaling keeps nnls well conditioned when tuple counts are large
    scale = np.linalg.norm(A, axis=0)
    coef, _ = nnls(A / scale, secs)
    coef = coef / scale
    resid = A @ coef - secs
    rms = float(np.sqrt(np.mean(resid ** 2)))
    return ProcCostModel(
        a_serial=float(coef[0]),
        a_parallel=float(coef[1]),
        b_fixed=float(coef[2]),
        b_per_node=float(coef[3]),
        valid_nodes=(int(nodes.min()), int(nodes.max())),
        fit_rms=rms,
    )


def extrapolate_duration(known_durations, target_nodes) -> float:
    """Fit d(n) = c0 + c1/n to (nodes, seconds) pairs and evaluate at target."""
    pts = [(float(n), float(s)) for n, s in known_durations]
    if len({n for n, _ in pts}) < 2:
        raise DegenerateSamples("need at least 2 distinct node counts")
    n = np.array([p[0] for p in pts])
    d = np.array([p[1] for p in pts])
    A = np.column_stack([np.ones_like(n), 1.0 / n])
    (c0, c1), *_ = np.linalg.lstsq(A, d, rcond=None)
    return float(c0 + c1 / target_nodes)


def batch_cost(config: ClusterConfig, duration) -> float:
    """Dollars for one batch: nodes x per-node rate x seconds."""
    if duration < 0:
        raise ValueError("duration must be >= 0")
    return config.worker_nodes * config.price_per_node_second * duration


def batch_cost_ms(config: ClusterConfig, duration_ms: int) -> float:
    return config.worker_nodes * config.price_per_node_second * duration_ms / 1000.0


@dataclass(frozen=True)
class NodeTimeline:
    """Step function of node count. points: ((time_ms, nodes), ...).

    The count holds from each point until the next one. A well-formed
    timeline ends at 0 nodes, which marks the release of everything.
    """
    points: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "points", tuple((int(t), int(n)) for t, n in self.points))

    def at(self, t_ms) -> int:
        level = 0
        for t, n in self.points:
            if t > t_ms:
                break
            level = n
        return level

    def max_nodes(self) -> int:
        return max((n for _, n in self.points), default=0)

    def end(self):
        return self.points[-1][0] if self.points else None

    @staticmethod
    def from_steps(steps):
        """Build from possibly redundant (time, nodes) pairs; later pairs at the same time win."""
        out = []
        for t, n in sorted(steps, key=lambda p: p[0]):
            if out and out[-1][0] == t:
                out[-1] = (t, n)
            elif out and out[-1][1] == n:
                continue
            else:
                out.append((t, n))
        # collapse equal neighbours introduced by same-time overrides
        merged = []
        for p in out:
            if merged and merged[-1][1] == p[1]:
                continue
            merged.append(p)
        return NodeTimeline(tuple(merged))


def node_acquisitions(timeline: NodeTimeline):
    """Per-node (acquire_ms, release_ms) pairs, releasing most recent first."""
    held = []
    spans = []
    prev_t = None
    for t, n in timeline.points:
        if n < 0:
            raise MalformedTimeline(f"negative node count {n} at {t}")
        if prev_t is not None and t <= prev_t:
            raise MalformedTimeline("timeline times must be strictly increasing")
        prev_t = t
        while len(held) < n:
            held.append(t)
        while len(held) > n:
            spans.append((held.pop(), t))
    if held:
        raise MalformedTimeline("timeline does not release all nodes at its end")
    return spans


def schedule_cost(timeline: NodeTimeline, prices: PriceTable) -> float:
    """Dollars for a node timeline with a per-acquisition billing minimum."""
    billed = 0.0
    for start, stop in node_acquisitions(timeline):
        billed += max(prices.minimum_billed_seconds, (stop - start) / 1000.0)
    return billed * prices.per_node_second
