"""Packet-level dumbbell simulator: K AIMD sources, one bottleneck router, one sink.

Deterministic heapq event loop.  Each source feeds its own access link; all
access links meet at the router, whose buffer policy (DropTail, RED or the
index rule) decides what to drop when a data packet arrives.  ACKs return over
an uncongested reverse path, one per delivered packet.
"""
from __future__ import annotations

import csv
import hashlib
import heapq
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, TextIO

import numpy as np

from .config import RedParams, ScenarioSpec
from .flow_model import cwnd_ack_update, cwnd_loss_update
from .index_engine import index_lookup_table
from .metrics import MetricsReport, jain_index, mean_queue_size, mean_rtt, pearson, utilization

# event kinds, ordered so simultaneous events resolve the same way every run
_ACCESS_DONE, _ROUTER_ARRIVE, _LINK_DONE, _SINK_ARRIVE, _ACK_ARRIVE, _PROBE, _SAMPLE = range(7)

DUPACK_THRESHOLD = 3


class SimulationInvariantError(RuntimeError):
    pass


@dataclass(slots=True, eq=False)
class Packet:
    flow_id: int
    sequence_number: int
    size_bytes: int = 576
    index_value: float = 0.0
    enqueue_time: float = 0.0
    send_time: float = 0.0
    uid: int = 0
    retransmission: bool = False


# -- buffer policies ---------------------------------------------------------
# Each returns the packet to drop (possibly the arrival) or None to enqueue.

def droptail_on_arrival(queue, pkt: Packet, buffer_size: int) -> Optional[Packet]:
    return pkt if len(queue) >= buffer_size else None


def index_on_arrival(queue, pkt: Packet, buffer_size: int) -> Optional[Packet]:
    """Full buffer: drop the lowest-index packet among the queue and the arrival.

    Ties go to the packet that has waited longest; the queue is FIFO so a
    strict comparison in queue order finds it, and the arrival loses ties last.
    """
    if len(queue) < buffer_size:
        return None
    victim = None
    for q in queue:
        if victim is None or q.index_value < victim.index_value:
            victim = q
    if victim is None or pkt.index_value < victim.index_value:
        victim = pkt
    return victim


@dataclass
class RedState:
    params: RedParams
    rng: random.Random
    tx_time: float  # typical packet transmission time, for the idle correction
    avg: float = 0.0
    count: int = -1
    idle_since: Optional[float] = 0.0


def red_drop_probability(avg: float, count: int, params: RedParams) -> float:
    """Drop probability for average queue ``avg`` after ``count`` undropped arrivals."""
    if avg < params.min_th:
        return 0.0
    if avg >= params.max_th:
        return 1.0
    p_b = params.max_p * (avg - params.min_th) / (params.max_th - params.min_th)
    den = 1.0 - count * p_b
    return 1.0 if den <= 0 else min(p_b / den, 1.0)


def red_on_arrival(queue, pkt: Packet, red_state: RedState, buffer_size: int,
                   now: float) -> Optional[Packet]:
    st, p = red_state, red_state.params
    if st.idle_since is not None:
        m = (now - st.idle_since) / st.tx_time
        st.avg *= (1.0 - p.w_q) ** m
    else:
        st.avg = (1.0 - p.w_q) * st.avg + p.w_q * len(queue)
    if len(queue) >= buffer_size:
        st.count = 0
        return pkt
    if st.avg < p.min_th:
        st.count = -1
        return None
    if st.avg >= p.max_th:
        st.count = 0
        return pkt
    st.count += 1
    if st.rng.random() < red_drop_probability(st.avg, st.count, p):
        st.count = 0
        return pkt
    return None


# -- endpoints ----------------------------------------------------------------

@dataclass(eq=False)
class SourceState:
    flow_id: int
    gamma: float
    max_window: int
    table: np.ndarray  # table[n - 1] is the index of integer window n
    access_tx: float
    access_delay: float
    cwnd: float = 1.0
    snd_una: int = 0
    snd_nxt: int = 0
    dup_ack_count: int = 0
    in_recovery: bool = False
    recover: int = -1
    inflation: int = 0
    last_decrease_time: float = -math.inf
    srtt: Optional[float] = None
    probe_deadline: float = math.inf
    probe_pending: bool = False
    access_queue: deque = field(default_factory=deque)
    access_busy: bool = False
    decreases: int = 0
    probes: int = 0

    @property
    def window(self) -> int:
        return int(math.floor(self.cwnd + 1e-12))

    def current_index(self) -> float:
        return float(self.table[self.window - 1])

    def allowed_in_flight(self) -> int:
        return self.window + (self.inflation if self.in_recovery else 0)


def source_on_dupacks(src: SourceState, now: float, inflation: int = DUPACK_THRESHOLD) -> int:
    """Loss signal: decrease unless one already happened within the last RTT.

    Enters recovery and returns the sequence number to retransmit.
    """
    if src.srtt is None or now - src.last_decrease_time >= src.srtt:
        src.cwnd = cwnd_loss_update(src.cwnd, src.gamma)
        src.last_decrease_time = now
        src.decreases += 1
    src.in_recovery = True
    src.recover = src.snd_nxt - 1
    src.inflation = inflation
    return src.snd_una


def source_on_ack(src: SourceState, ack: int, now: float) -> tuple[bool, Optional[int]]:
    """Process a cumulative ACK (next expected sequence number).

    Returns ``(advanced, retransmit)``: whether new data was acknowledged and
    the sequence number to retransmit, if any.
    """
    if ack > src.snd_una:
        newly = ack - src.snd_una
        src.snd_una = ack
        src.dup_ack_count = 0
        if not src.in_recovery:
            src.cwnd = cwnd_ack_update(src.cwnd, src.max_window)
            return True, None
        if ack > src.recover:
            src.in_recovery = False
            src.inflation = 0
            return True, None
        # partial ACK: the next hole is lost too
        src.inflation = max(src.inflation - newly + 1, 0)
        return True, src.snd_una
    if ack == src.snd_una and src.snd_nxt > src.snd_una:
        src.dup_ack_count += 1
        if src.in_recovery:
            src.inflation += 1
        elif src.dup_ack_count == DUPACK_THRESHOLD:
            return False, source_on_dupacks(src, now)
    return False, None


@dataclass(eq=False)
class SinkState:
    rcv_nxt: int = 0
    out_of_order: set = field(default_factory=set)
    delivered_unique_in_window: int = 0


@dataclass
class TraceBundle:
    columns: list
    samples: list  # (t, cwnd_1..K, queue, index_1..K)
    queue_changes: list  # (t, length) after every change
    drops: list  # (t, flow_id, seq, index_value, was_arrival)
    rtt_samples: list  # per flow [(t, rtt)]
    probe_events: list  # (t, flow_id)
    counters: dict

    def digest(self) -> str:
        h = hashlib.sha256()
        for part in (self.samples, self.queue_changes, self.drops, self.rtt_samples, self.probe_events):
            h.update(repr(part).encode())
        return h.hexdigest()


class PacketSimulator:
    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        self.B = spec.router.buffer_size
        self.policy = spec.router.policy
        eg = spec.router.egress
        self.link_tx = spec.packet_bytes * 8 / eg.bandwidth_bps
        self.link_delay = eg.propagation_delay_s
        self.now = 0.0
        self._events = []
        self._seq = 0
        self._uid = 0
        self.queue = deque()
        self.in_service: Optional[Packet] = None
        self.sources = []
        for k, f in enumerate(spec.flows):
            self.sources.append(SourceState(
                flow_id=k,
                gamma=f.params.gamma,
                max_window=f.params.max_window,
                table=index_lookup_table(f.params),
                access_tx=spec.packet_bytes * 8 / f.access.bandwidth_bps,
                access_delay=f.access.propagation_delay_s,
                cwnd=float(f.params.initial_window),
            ))
        self.sinks = [SinkState() for _ in spec.flows]
        self.red = None
        if self.policy == "red":
            self.red = RedState(spec.router.red_params(), random.Random(spec.seed), self.link_tx)
        self.t0 = spec.warmup_s
        self.t1 = spec.sim_duration_s
        self.live = {}
        self.sent = self.delivered = self.dropped = 0
        self.max_queue = 0
        self.link_deliveries_in_window = 0
        self.queue_changes = [(0.0, 0)]
        self.drops = []
        self.samples = []
        self.rtt_samples = [[] for _ in spec.flows]
        self.probe_events = []

    # -- event plumbing --
    def _push(self, t, kind, a=None, b=None):
        self._seq += 1
        heapq.heappush(self._events, (t, kind, self._seq, a, b))

    def run(self) -> tuple[MetricsReport, TraceBundle]:
        for src, f in zip(self.sources, self.spec.flows):
            self._push(f.start_time_s, _ACK_ARRIVE, src, None)  # kick-off: send the first window
        n_samples = int(math.floor(self.t1 / self.spec.sample_interval_s + 1e-9)) + 1
        for i in range(n_samples):
            self._push(i * self.spec.sample_interval_s, _SAMPLE)
        events = self._events
        while events:
            t, kind, _, a, b = heapq.heappop(events)
            if t > self.t1:
                heapq.heappush(events, (t, kind, _, a, b))
                break
            self.now = t
            if kind == _ACCESS_DONE:
                self._access_done(a)
            elif kind == _ROUTER_ARRIVE:
                self._router_arrive(a)
            elif kind == _LINK_DONE:
                self._link_done()
            elif kind == _SINK_ARRIVE:
                self._sink_arrive(a)
            elif kind == _ACK_ARRIVE:
                if b is None:
                    self._send_new(a)
                else:
                    self._on_ack(a, *b)
            elif kind == _PROBE:
                self._probe_check(a)
            else:
                self._sample()
        self._check_conservation()
        return self._report(), self._bundle()

    # -- sending --
    def _transmit(self, src: SourceState, seq: int, retx: bool):
        self._uid += 1
        pkt = Packet(src.flow_id, seq, self.spec.packet_bytes, src.current_index(),
                     send_time=self.now, uid=self._uid, retransmission=retx)
        self.live[pkt.uid] = pkt
        self.sent += 1
        src.access_queue.append(pkt)
        if src.snd_una == src.snd_nxt or not src.probe_pending:
            self._arm_probe(src)
        if not src.access_busy:
            src.access_busy = True
            self._push(self.now + src.access_tx, _ACCESS_DONE, src)

    def _send_new(self, src: SourceState):
        while src.snd_nxt - src.snd_una < src.allowed_in_flight():
            seq = src.snd_nxt
            src.snd_nxt += 1
            self._transmit(src, seq, False)

    def _access_done(self, src: SourceState):
        pkt = src.access_queue.popleft()
        self._push(self.now + src.access_delay, _ROUTER_ARRIVE, pkt)
        if src.access_queue:
            self._push(self.now + src.access_tx, _ACCESS_DONE, src)
        else:
            src.access_busy = False

    # -- router --
    def _router_arrive(self, pkt: Packet):
        pkt.enqueue_time = self.now
        q = self.queue
        if self.policy == "droptail":
            victim = droptail_on_arrival(q, pkt, self.B)
        elif self.policy == "index":
            victim = index_on_arrival(q, pkt, self.B)
            if victim is not None:
                lowest = min([x.index_value for x in q] + [pkt.index_value])
                if victim.index_value > lowest:
                    raise SimulationInvariantError("index policy dropped a packet above the minimum index")
        else:
            victim = red_on_arrival(q, pkt, self.red, self.B, self.now)
        if victim is not None:
            self._drop(victim, victim is pkt)
            if victim is not pkt:
                q.remove(victim)
                q.append(pkt)
        else:
            q.append(pkt)
        if self.in_service is None:
            self._start_service()
        if len(q) > self.B:
            raise SimulationInvariantError(f"queue length {len(q)} exceeds B={self.B}")
        self.max_queue = max(self.max_queue, len(q))
        self._note_queue()

    def _drop(self, pkt: Packet, was_arrival: bool):
        if self.live.pop(pkt.uid, None) is None:
            raise SimulationInvariantError(f"packet {pkt.uid} dropped twice or unknown")
        self.dropped += 1
        self.drops.append((self.now, pkt.flow_id, pkt.sequence_number, pkt.index_value, was_arrival))

    def _start_service(self):
        if not self.queue:
            if self.red is not None and self.red.idle_since is None:
                self.red.idle_since = self.now
            return
        self.in_service = self.queue.popleft()
        if self.red is not None:
            self.red.idle_since = None
        self._push(self.now + self.link_tx, _LINK_DONE)

    def _note_queue(self):
        n = len(self.queue)
        if self.queue_changes[-1][1] != n:
            self.queue_changes.append((self.now, n))

    def _link_done(self):
        pkt = self.in_service
        self.in_service = None
        self._push(self.now + self.link_delay, _SINK_ARRIVE, pkt)
        self._start_service()
        self._note_queue()

    # -- sink --
    def _sink_arrive(self, pkt: Packet):
        if self.live.pop(pkt.uid, None) is None:
            raise SimulationInvariantError(f"packet {pkt.uid} delivered twice or unknown")
        self.delivered += 1
        sink = self.sinks[pkt.flow_id]
        seq = pkt.sequence_number
        fresh = seq >= sink.rcv_nxt and seq not in sink.out_of_order
        if fresh and self.t0 <= self.now < self.t1:
            sink.delivered_unique_in_window += 1
        if seq == sink.rcv_nxt:
            sink.rcv_nxt += 1
            while sink.rcv_nxt in sink.out_of_order:
                sink.out_of_order.remove(sink.rcv_nxt)
                sink.rcv_nxt += 1
        elif seq > sink.rcv_nxt:
            sink.out_of_order.add(seq)
        src = self.sources[pkt.flow_id]
        back = self.link_delay + src.access_delay
        self._push(self.now + back, _ACK_ARRIVE, src, (sink.rcv_nxt, pkt.send_time))

    # -- source --
    def _on_ack(self, src: SourceState, ack: int, echo: float):
        rtt = self.now - echo
        if self.t0 <= self.now < self.t1:
            self.rtt_samples[src.flow_id].append((self.now, rtt))
        src.srtt = rtt if src.srtt is None else 0.875 * src.srtt + 0.125 * rtt
        advanced, retx = source_on_ack(src, ack, self.now)
        if advanced:
            self._arm_probe(src)
        if retx is not None:
            self._transmit(src, retx, True)
        self._send_new(src)

    def _probe_interval(self, src: SourceState) -> float:
        return self.spec.probe_after_rtts * (src.srtt if src.srtt is not None else 0.5)

    def _arm_probe(self, src: SourceState):
        src.probe_deadline = self.now + self._probe_interval(src)
        if not src.probe_pending:
            src.probe_pending = True
            self._push(src.probe_deadline, _PROBE, src)

    def _probe_check(self, src: SourceState):
        src.probe_pending = False
        if src.snd_nxt == src.snd_una:
            return
        if self.now < src.probe_deadline:
            src.probe_pending = True
            self._push(src.probe_deadline, _PROBE, src)
            return
        # no progress for a while: the whole window is gone
        src.probes += 1
        self.probe_events.append((self.now, src.flow_id))
        src.dup_ack_count = 0
        self._transmit(src, source_on_dupacks(src, self.now, inflation=0), True)
        self._send_new(src)

    # -- observation --
    def _sample(self):
        row = [self.now]
        row += [s.cwnd for s in self.sources]
        row.append(len(self.queue))
        row += [s.current_index() for s in self.sources]
        self.samples.append(tuple(row))

    def _check_conservation(self):
        in_network = sum(len(s.access_queue) for s in self.sources) + len(self.queue)
        in_network += self.in_service is not None
        in_network += sum(1 for e in self._events if e[1] in (_ROUTER_ARRIVE, _SINK_ARRIVE))
        if in_network != len(self.live) or self.sent != self.delivered + self.dropped + in_network:
            raise SimulationInvariantError(
                f"conservation: sent={self.sent} delivered={self.delivered} "
                f"dropped={self.dropped} in_network={in_network} live={len(self.live)}")

    def _report(self) -> MetricsReport:
        window = self.t1 - self.t0
        counts = [s.delivered_unique_in_window for s in self.sinks]
        goodput = [c / window for c in counts]
        rtts = [mean_rtt([r for _, r in s]) if s else float("nan") for s in self.rtt_samples]
        corr = float("nan")
        if len(self.sources) == 2:
            rows = [r for r in self.samples if r[0] >= self.t0]
            corr = pearson([r[1] for r in rows], [r[2] for r in rows])
        return MetricsReport(
            utilization=utilization(sum(counts), window, self.spec.router.egress.bandwidth_bps,
                                    self.spec.packet_bytes),
            jain_fairness=jain_index(goodput) if sum(counts) > 0 else float("nan"),
            mean_queue_size=mean_queue_size(self.queue_changes, self.t0, self.t1),
            per_flow_rtt=rtts,
            per_flow_goodput=goodput,
            cwnd_correlation=corr,
            probe_retransmits=sum(s.probes for s in self.sources),
            extras={"decreases": [s.decreases for s in self.sources],
                    "drops": self.dropped, "max_queue": self.max_queue},
        )

    def _bundle(self) -> TraceBundle:
        K = len(self.sources)
        cols = (["time"] + [f"cwnd_{k}" for k in range(1, K + 1)] + ["queue"]
                + [f"index_{k}" for k in range(1, K + 1)])
        return TraceBundle(
            columns=cols,
            samples=self.samples,
            queue_changes=self.queue_changes,
            drops=self.drops,
            rtt_samples=self.rtt_samples,
            probe_events=self.probe_events,
            counters={"sent": self.sent, "delivered": self.delivered, "dropped": self.dropped,
                      "in_network": len(self.live), "max_queue": self.max_queue,
                      "probes": [s.probes for s in self.sources]},
        )


def run_scenario(spec: ScenarioSpec) -> tuple[MetricsReport, TraceBundle]:
    return PacketSimulator(spec).run()


def write_trace_csv(bundle: TraceBundle, fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(bundle.columns)
    for row in bundle.samples:
        w.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])
