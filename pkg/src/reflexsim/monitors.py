"""Detectors that turn telemetry reports into reflex commands.

Monitors hold only ephemeral state: recent path latencies per flow, recent
per-queue contributor counts. Losing a monitor instance delays detection
but can never corrupt replicated network state, so none of this is made
fault tolerant.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .simnet import Nanos
from .telemetry import FlowKey, IntReport, path_latency


class MonitorError(Exception):
    pass


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Reroute:
    flow: FlowKey
    at_switch: str
    new_egress_port: int


@dataclass(frozen=True)
class Throttle:
    flow: FlowKey
    rate_bits_per_s: int


@dataclass(frozen=True)
class SetParam:
    name: str
    value: int


@dataclass(frozen=True)
class UpdateRule:
    table: str
    entry: bytes


CommandBody = Reroute | Throttle | SetParam | UpdateRule


@dataclass(frozen=True)
class ReflexCommand:
    command_id: str
    origin: str
    issued_at: Nanos
    target_element: str
    body: CommandBody


# --------------------------------------------------------------------------
# Path-latency anomaly detection
# --------------------------------------------------------------------------

@dataclass
class FlowLatencyState:
    window: deque[int]
    total: int = 0

    def push(self, latency_ns: int, cap: int) -> None:
        self.window.append(latency_ns)
        self.total += latency_ns
        if len(self.window) > cap:
            self.total -= self.window.popleft()


def choose_reroute_switch(report: IntReport, per_hop_baselines: Sequence[float]) -> str:
    """Switch upstream of the worst above-baseline hop, else the path's first switch.

    If the worst excess sits at the first hop there is no upstream switch to
    address, so the first switch is told to reroute in that case too.
    """
    if len(per_hop_baselines) != len(report.hops):
        raise MonitorError("baseline arity does not match hop count")
    best_i, best_excess = 0, 0.0
    for i, (hop, base) in enumerate(zip(report.hops, per_hop_baselines)):
        excess = hop.hop_latency_ns - base
        if excess > best_excess:
            best_i, best_excess = i, excess
    if best_excess > 0 and best_i > 0:
        return report.hops[best_i - 1].switch_id
    return report.hops[0].switch_id


class PathLatencyMonitor:
    """Moving average over the last `window_size` reports per flow.

    A report whose path latency strictly exceeds that average plus the
    threshold triggers a reroute; the window then restarts so a step change
    fires once, not continuously while the average catches up.
    """

    def __init__(
        self,
        monitor_id: str,
        threshold_ns: int,
        window_size: int = 10,
        baseline_alpha_shift: int = 4,
        new_port_span: int = 256,
    ):
        if threshold_ns <= 0:
            raise MonitorError("threshold_ns must be positive")
        if window_size < 1:
            raise MonitorError("window_size must be >= 1")
        self.monitor_id = monitor_id
        self.threshold_ns = threshold_ns
        self.window_size = window_size
        self.baseline_alpha_shift = baseline_alpha_shift
        self.new_port_span = new_port_span
        self.flows: dict[FlowKey, FlowLatencyState] = {}
        self.baselines: dict[tuple[str, FlowKey], float] = {}
        self._ids = itertools.count()

    def observe(self, report: IntReport, now: Nanos) -> ReflexCommand | None:
        lat = path_latency(report)
        state = self.flows.get(report.flow)
        if state is None:
            state = self.flows[report.flow] = FlowLatencyState(deque())
        cmd = None
        w = self.window_size
        # Exact integer form of: lat > mean(window) + threshold.
        if len(state.window) == w and lat * w > state.total + self.threshold_ns * w:
            cmd = self._fire(report, now)
            state.window.clear()
            state.total = 0
        state.push(lat, w)
        self._update_baselines(report)
        return cmd

    def _fire(self, report: IntReport, now: Nanos) -> ReflexCommand:
        baselines = [
            self.baselines.get((h.switch_id, report.flow), float(h.hop_latency_ns))
            for h in report.hops
        ]
        target = choose_reroute_switch(report, baselines)
        offending = next(h for h in report.hops if h.switch_id == target)
        body = Reroute(
            flow=report.flow,
            at_switch=target,
            new_egress_port=(offending.egress_port + 1) % self.new_port_span,
        )
        return ReflexCommand(
            command_id=f"{self.monitor_id}:{next(self._ids)}",
            origin=self.monitor_id,
            issued_at=now,
            target_element=target,
            body=body,
        )

    def _update_baselines(self, report: IntReport) -> None:
        shift = self.baseline_alpha_shift
        for h in report.hops:
            k = (h.switch_id, report.flow)
            prev = self.baselines.get(k)
            if prev is None:
                self.baselines[k] = float(h.hop_latency_ns)
            else:
                self.baselines[k] = prev + (h.hop_latency_ns - prev) / (1 << shift)


def path_latency_observe(
    monitor: PathLatencyMonitor, report: IntReport, now: Nanos
) -> ReflexCommand | None:
    return monitor.observe(report, now)


# --------------------------------------------------------------------------
# Microburst detection
# --------------------------------------------------------------------------

@dataclass
class QueueState:
    last_depth: int = 0
    events: deque[tuple[Nanos, FlowKey]] = field(default_factory=deque)
    counts: dict[FlowKey, int] = field(default_factory=dict)

    def add(self, flow: FlowKey, now: Nanos) -> None:
        self.events.append((now, flow))
        self.counts[flow] = self.counts.get(flow, 0) + 1

    def prune(self, cutoff: Nanos) -> None:
        while self.events and self.events[0][0] < cutoff:
            _, flow = self.events.popleft()
            left = self.counts[flow] - 1
            if left:
                self.counts[flow] = left
            else:
                del self.counts[flow]


class MicroburstMonitor:
    """Per-queue depth threshold with hysteresis and contributor attribution.

    On an upward threshold crossing the top_k flows by packet count in the
    trailing window are throttled; the detector re-arms only after the
    depth falls back under the threshold.
    """

    def __init__(
        self,
        monitor_id: str,
        depth_threshold_pkts: int,
        top_k: int,
        window_ns: Nanos = 100_000,
        throttle_rate_bits_per_s: int = 1_000_000_000,
    ):
        if depth_threshold_pkts <= 0:
            raise MonitorError("depth_threshold_pkts must be positive")
        if top_k < 1:
            raise MonitorError("top_k must be >= 1")
        self.monitor_id = monitor_id
        self.depth_threshold_pkts = depth_threshold_pkts
        self.top_k = top_k
        self.window_ns = window_ns
        self.throttle_rate_bits_per_s = throttle_rate_bits_per_s
        self.queues: dict[tuple[str, int], QueueState] = {}
        self._ids = itertools.count()

    def observe(self, report: IntReport, now: Nanos) -> list[ReflexCommand]:
        out: list[ReflexCommand] = []
        thr = self.depth_threshold_pkts
        for hop in report.hops:
            key = (hop.switch_id, hop.queue_id)
            qs = self.queues.get(key)
            if qs is None:
                qs = self.queues[key] = QueueState()
            qs.prune(now - self.window_ns)
            qs.add(report.flow, now)
            crossed = qs.last_depth <= thr < hop.queue_depth
            qs.last_depth = hop.queue_depth
            if not crossed:
                continue
            ranked = sorted(qs.counts.items(), key=lambda kv: (-kv[1], kv[0]))
            for flow, _count in ranked[: self.top_k]:
                out.append(
                    ReflexCommand(
                        command_id=f"{self.monitor_id}:{next(self._ids)}",
                        origin=self.monitor_id,
                        issued_at=now,
                        target_element=hop.switch_id,
                        body=Throttle(flow, self.throttle_rate_bits_per_s),
                    )
                )
        return out


def microburst_observe(
    monitor: MicroburstMonitor, report: IntReport, now: Nanos
) -> list[ReflexCommand]:
    return monitor.observe(report, now)


# --------------------------------------------------------------------------
# Stateless threshold monitor
# --------------------------------------------------------------------------

_SCALAR_FIELDS = {"pkt_size_bytes", "seq"}
_HOP_FIELDS = {
    "hop_latency": "hop_latency_ns",
    "queue_depth": "queue_depth",
    "link_utilization": "link_utilization",
    "timestamp": "timestamp_ns",
}


def report_field_value(report: IntReport, fieldname: str) -> tuple[float, str]:
    """(value, switch) for a named report field; per-hop fields take the max hop."""
    if fieldname in _SCALAR_FIELDS:
        return float(getattr(report, fieldname)), report.hops[0].switch_id
    attr = _HOP_FIELDS.get(fieldname)
    if attr is None:
        raise MonitorError(f"unknown report field {fieldname!r}")
    best = max(report.hops, key=lambda h: getattr(h, attr))
    return float(getattr(best, attr)), best.switch_id


def threshold_observe(
    report: IntReport,
    fieldname: str,
    limit: float,
    monitor_id: str = "threshold",
    now: Nanos = 0,
    command_id: str | None = None,
) -> ReflexCommand | None:
    """Stateless: alert iff the field value strictly exceeds the limit."""
    value, switch = report_field_value(report, fieldname)
    if value <= limit:
        return None
    # utilization is fractional; carry it as fixed-point with 4 decimals
    scaled = int(round(value * 10_000)) if fieldname == "link_utilization" else int(value)
    return ReflexCommand(
        command_id=command_id or f"{monitor_id}:{report.flow}:{report.seq}",
        origin=monitor_id,
        issued_at=now,
        target_element=switch,
        body=SetParam(name=f"alert.{fieldname}", value=scaled),
    )


# --------------------------------------------------------------------------
# Processing budget arithmetic
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MonitorBudget:
    cycles: int
    instructions: int  # 1 instruction per cycle estimate
    budget_ns: int


def monitor_budget(reports_per_s: float, core_hz: float) -> MonitorBudget:
    """Per-report cycle and time budget for a core that must keep up."""
    if reports_per_s <= 0 or core_hz <= 0:
        raise ValueError("reports_per_s and core_hz must be positive")
    cycles = int(core_hz // reports_per_s)
    budget_ns = cycles * 10**9 // int(core_hz)
    return MonitorBudget(cycles=cycles, instructions=cycles, budget_ns=budget_ns)
