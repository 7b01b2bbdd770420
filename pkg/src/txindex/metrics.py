"""Evaluation quantities computed from simulation traces."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class EmptyTraceError(ValueError):
    pass


@dataclass
class MetricsReport:
    utilization: float
    jain_fairness: float
    mean_queue_size: float
    per_flow_rtt: list  # seconds, NaN when a flow had no samples in the window
    per_flow_goodput: list  # delivered packets per second
    cwnd_correlation: float = float("nan")
    probe_retransmits: int = 0
    extras: dict = field(default_factory=dict)


def jain_index(throughputs: Sequence[float]) -> float:
    x = np.asarray(throughputs, dtype=float)
    if x.size == 0 or np.any(x < 0):
        raise ValueError("throughputs must be a non-empty vector of nonnegative values")
    sq = float(np.sum(x * x))
    if sq == 0.0:
        raise ValueError("Jain index undefined when every throughput is zero")
    return float(np.sum(x)) ** 2 / (x.size * sq)


def utilization(delivered_packets: float, window_s: float, bandwidth_bps: float,
                packet_bytes: int) -> float:
    u = delivered_packets * packet_bytes * 8 / (bandwidth_bps * window_s)
    return min(max(u, 0.0), 1.0)


def mean_queue_size(changes: Sequence[tuple], t0: float, t1: float) -> float:
    """Time-weighted mean of a piecewise-constant queue length on [t0, t1].

    ``changes`` holds ``(time, length)`` points in time order; the length holds
    until the next point.  The last point at or before ``t0`` sets the initial level.
    """
    if not changes:
        raise EmptyTraceError("no queue samples")
    if t1 <= t0:
        raise ValueError("empty measurement window")
    level = None
    area = 0.0
    last = t0
    for t, q in changes:
        if t <= t0:
            level = q
            continue
        if t >= t1:
            break
        if level is not None:
            area += level * (t - last)
        level = q
        last = t
    if level is None:
        raise EmptyTraceError("queue trace starts after the measurement window")
    area += level * (t1 - last)
    return area / (t1 - t0)


def mean_rtt(samples: Sequence[float]) -> float:
    if len(samples) == 0:
        raise EmptyTraceError("no RTT samples")
    return math.fsum(samples) / len(samples)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation; NaN when either series is constant."""
    a = np.asarray(x, dtype=float)
    b = np.asarray(y, dtype=float)
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if den == 0.0:
        return float("nan")
    return float(np.dot(a, b)) / den
