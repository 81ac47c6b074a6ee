"""Deterministic discrete-event network simulation kernel.

Virtual time is integer nanoseconds. Hosts are single-server FIFO queues
with bounded waiting room; switches add a fixed forwarding latency to
every path that traverses them. Events with equal timestamps fire in
insertion order, so a (topology, seed, workload) triple fully determines
the event trace.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Iterable, Mapping, Protocol

from .rng import exponential_ns, make_rng

Nanos = int


class SimError(Exception):
    pass


class TopologyError(SimError):
    pass


class DuplicateNode(TopologyError):
    pass


class DanglingEndpoint(TopologyError):
    pass


class NoPath(TopologyError):
    pass


class SchedulingInPast(SimError):
    """A handler scheduled an event before the current clock: a logic bug."""


# --------------------------------------------------------------------------
# Service-time models
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantService:
    ns: int = 0


@dataclass(frozen=True)
class ExponentialService:
    mean_ns: int


@dataclass(frozen=True)
class PerTypeService:
    """Service time keyed by payload class name; unlisted types get default_ns."""

    table: Mapping[str, int]
    default_ns: int = 0


ServiceModel = ConstantService | ExponentialService | PerTypeService


def _service_ns(model: ServiceModel, payload: Any, rng) -> int:
    if isinstance(model, ConstantService):
        return model.ns
    if isinstance(model, ExponentialService):
        return exponential_ns(rng, model.mean_ns)
    return int(model.table.get(type(payload).__name__, model.default_ns))


# --------------------------------------------------------------------------
# Topology
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkSpec:
    a: str
    b: str
    latency_ns: int = 0
    bandwidth_bits_per_ns: Fraction | None = None  # None = infinite

    def __post_init__(self) -> None:
        if self.a == self.b:
            raise TopologyError(f"link endpoints must differ: {self.a}")
        if self.latency_ns < 0:
            raise TopologyError(f"negative link latency: {self.latency_ns}")
        bw = self.bandwidth_bits_per_ns
        if bw is not None and bw <= 0:
            raise TopologyError(f"bandwidth must be positive: {bw}")


@dataclass(frozen=True)
class SwitchSpec:
    name: str
    forwarding_ns: int = 0

    def __post_init__(self) -> None:
        if self.forwarding_ns < 0:
            raise TopologyError(f"negative forwarding latency: {self.name}")


@dataclass(frozen=True)
class HostSpec:
    name: str
    service: ServiceModel = ConstantService(0)
    rx_queue_capacity: int = 1024
    mac_serial_ns: int = 0

    def __post_init__(self) -> None:
        if self.rx_queue_capacity < 1:
            raise TopologyError(f"rx_queue_capacity must be >= 1: {self.name}")
        if self.mac_serial_ns < 0:
            raise TopologyError(f"negative mac_serial_ns: {self.name}")


@dataclass(frozen=True)
class TopologySpec:
    hosts: tuple[HostSpec, ...]
    switches: tuple[SwitchSpec, ...] = ()
    links: tuple[LinkSpec, ...] = ()


def star(
    hosts: Iterable[HostSpec],
    link_latency_ns: int,
    switch_forwarding_ns: int,
    switch_name: str = "sw0",
    bandwidth_bits_per_ns: Fraction | None = None,
) -> TopologySpec:
    """All hosts hang off one central switch with identical links."""
    hosts = tuple(hosts)
    links = tuple(
        LinkSpec(h.name, switch_name, link_latency_ns, bandwidth_bits_per_ns)
        for h in hosts
    )
    return TopologySpec(hosts=hosts, switches=(SwitchSpec(switch_name, switch_forwarding_ns),), links=links)


@dataclass(frozen=True)
class PathInfo:
    hops: tuple[str, ...]           # node names, src..dst inclusive
    base_ns: int                    # link latencies + intermediate switch forwarding
    finite_bandwidths: tuple[Fraction, ...]

    def delay_ns(self, size_bytes: int) -> int:
        total = self.base_ns
        for bw in self.finite_bandwidths:
            total += math.ceil(Fraction(size_bytes * 8) / bw)
        return total


class Topology:
    """Immutable node/link graph with precomputed host-reachable paths."""

    def __init__(self, spec: TopologySpec):
        self.spec = spec
        self.hosts: dict[str, HostSpec] = {}
        self.switches: dict[str, SwitchSpec] = {}
        for h in spec.hosts:
            if h.name in self.hosts or h.name in self.switches:
                raise DuplicateNode(h.name)
            self.hosts[h.name] = h
        for s in spec.switches:
            if s.name in self.hosts or s.name in self.switches:
                raise DuplicateNode(s.name)
            self.switches[s.name] = s
        adj: dict[str, list[tuple[str, LinkSpec]]] = {n: [] for n in (*self.hosts, *self.switches)}
        for link in spec.links:
            for end in (link.a, link.b):
                if end not in adj:
                    raise DanglingEndpoint(f"link references unknown node {end!r}")
            adj[link.a].append((link.b, link))
            adj[link.b].append((link.a, link))
        for n in adj:
            adj[n].sort(key=lambda e: e[0])
        self._adj = adj
        self._paths: dict[tuple[str, str], PathInfo] = {}
        for src in adj:
            self._bfs_from(src)

    def _bfs_from(self, src: str) -> None:
        # Intermediate nodes must be switches; hosts only terminate paths.
        parent: dict[str, tuple[str, LinkSpec]] = {}
        seen = {src}
        frontier = deque([src])
        while frontier:
            cur = frontier.popleft()
            if cur != src and cur in self.hosts:
                continue
            for nbr, link in self._adj[cur]:
                if nbr in seen:
                    continue
                seen.add(nbr)
                parent[nbr] = (cur, link)
                frontier.append(nbr)
        for dst in seen:
            if dst == src:
                continue
            hops = [dst]
            links: list[LinkSpec] = []
            cur = dst
            while cur != src:
                prev, link = parent[cur]
                links.append(link)
                hops.append(prev)
                cur = prev
            hops.reverse()
            links.reverse()
            base = sum(l.latency_ns for l in links)
            base += sum(self.switches[n].forwarding_ns for n in hops[1:-1] if n in self.switches)
            finite = tuple(l.bandwidth_bits_per_ns for l in links if l.bandwidth_bits_per_ns is not None)
            self._paths[(src, dst)] = PathInfo(tuple(hops), base, finite)

    def path(self, src: str, dst: str) -> PathInfo:
        if src == dst:
            return PathInfo((src,), 0, ())
        try:
            return self._paths[(src, dst)]
        except KeyError:
            raise NoPath(f"no path {src} -> {dst}") from None

    def has_path(self, src: str, dst: str) -> bool:
        return src == dst or (src, dst) in self._paths

    def path_delay_ns(self, src: str, dst: str, size_bytes: int = 0) -> int:
        return self.path(src, dst).delay_ns(size_bytes)


def build_topology(spec: TopologySpec) -> Topology:
    return Topology(spec)


# --------------------------------------------------------------------------
# Latency statistics
# --------------------------------------------------------------------------

def percentile_nearest_rank(sorted_samples: list[int], pct: float) -> int:
    """Nearest-rank percentile over an already-sorted, non-empty sample list."""
    n = len(sorted_samples)
    k = max(1, math.ceil(pct / 100.0 * n))
    return sorted_samples[k - 1]


@dataclass(frozen=True)
class LatencyStats:
    count: int
    drop_count: int
    mean_ns: float
    p50_ns: int
    p99_ns: int
    max_ns: int

    @staticmethod
    def from_samples(samples: list[int], drop_count: int = 0) -> "LatencyStats":
        if not samples:
            return LatencyStats(0, drop_count, 0.0, 0, 0, 0)
        s = sorted(samples)
        return LatencyStats(
            count=len(s),
            drop_count=drop_count,
            mean_ns=sum(s) / len(s),
            p50_ns=percentile_nearest_rank(s, 50.0),
            p99_ns=percentile_nearest_rank(s, 99.0),
            max_ns=s[-1],
        )


class StatsSink:
    """Collects exact latency samples per label; no streaming approximation."""

    def __init__(self) -> None:
        self._samples: dict[str, list[int]] = {}
        self._drops: dict[str, int] = {}

    def record(self, label: str, start: Nanos, end: Nanos) -> None:
        if end < start:
            raise ValueError(f"end {end} < start {start} for label {label!r}")
        self._samples.setdefault(label, []).append(end - start)

    def add_drop(self, label: str, n: int = 1) -> None:
        self._drops[label] = self._drops.get(label, 0) + n

    def samples(self, label: str) -> list[int]:
        return list(self._samples.get(label, []))

    def labels(self) -> list[str]:
        return sorted(set(self._samples) | set(self._drops))

    def summary(self, label: str) -> LatencyStats:
        return LatencyStats.from_samples(
            self._samples.get(label, []), self._drops.get(label, 0)
        )


# --------------------------------------------------------------------------
# Simulator
# --------------------------------------------------------------------------

@dataclass
class Envelope:
    src: str
    dst: str
    payload: Any
    size_bytes: int
    send_ns: Nanos      # when the sender handed the message to its NIC
    egress_ns: Nanos    # send_ns + sender mac_serial
    ingress_ns: Nanos = -1  # wire arrival at the destination NIC


class Handler(Protocol):
    def on_message(self, ctx: "NodeCtx", env: Envelope, now: Nanos) -> None: ...

    def on_timer(self, ctx: "NodeCtx", tag: Any, now: Nanos) -> None: ...


class NodeCtx:
    """Capabilities handed to a node handler while it runs."""

    def __init__(self, sim: "Simulator", node: str):
        self._sim = sim
        self.node = node

    def send(self, dst: str, payload: Any, size_bytes: int = 0) -> Nanos:
        return self._sim.send(self.node, dst, payload, size_bytes)

    def set_timer(self, at: Nanos, tag: Any = None) -> None:
        self._sim.schedule_timer(self.node, at, tag)

    def record(self, label: str, start: Nanos, end: Nanos) -> None:
        self._sim.stats.record(label, start, end)

    @property
    def rng(self):
        return self._sim.node_rng(self.node)


_DELIVER, _KICK, _COMPLETE, _TIMER = range(4)
_KIND_NAMES = ("deliver", "kick", "complete", "timer")


class _NodeRuntime:
    __slots__ = (
        "spec", "handler", "queue", "in_service", "delivered", "dropped", "ctx", "rng",
    )

    def __init__(self, spec: HostSpec, ctx: NodeCtx, rng):
        self.spec = spec
        self.handler: Handler | None = None
        self.queue: deque[tuple[Nanos, Envelope]] = deque()
        # True from service start until the COMPLETE event runs; only that
        # event may start the next service, so same-instant deliveries can
        # never double-start the server.
        self.in_service = False
        self.delivered = 0
        self.dropped = 0
        self.ctx = ctx
        self.rng = rng


@dataclass(frozen=True)
class SimSummary:
    events_processed: int
    clock_ns: Nanos
    injected: int
    delivered: int
    dropped: int
    drops_by_node: dict[str, int]
    in_flight: int


class Simulator:
    """Single-threaded event loop over one immutable topology."""

    def __init__(self, topology: Topology, seed: int = 0, trace: bool = False,
                 message_jitter_ns: int = 0):
        self.topology = topology
        self.seed = seed
        self.clock: Nanos = 0
        self.stats = StatsSink()
        self._heap: list[tuple[Nanos, int, int, str, Any]] = []
        self._seq = 0
        self._events_processed = 0
        self._injected = 0
        # Optional per-message delay fuzz for fault-injection runs. Non-zero
        # jitter deliberately breaks exact latency additivity.
        self._jitter_ns = message_jitter_ns
        self._jitter_rng = make_rng(seed, "jitter") if message_jitter_ns else None
        self._trace: list[tuple[Nanos, int, str, str, str]] | None = [] if trace else None
        self._nodes: dict[str, _NodeRuntime] = {}
        for name, spec in topology.hosts.items():
            self._nodes[name] = _NodeRuntime(
                spec, NodeCtx(self, name), make_rng(seed, "node", name)
            )

    # -- wiring ------------------------------------------------------------

    def register(self, node: str, handler: Handler) -> None:
        self._nodes[node].handler = handler

    def node_rng(self, node: str):
        return self._nodes[node].rng

    def node(self, node: str) -> _NodeRuntime:
        return self._nodes[node]

    @property
    def trace(self) -> list[tuple[Nanos, int, str, str, str]]:
        if self._trace is None:
            raise SimError("simulator built with trace=False")
        return self._trace

    # -- event plumbing ------------------------------------------------------

    def _push(self, at: Nanos, kind: int, node: str, data: Any) -> None:
        if at < self.clock:
            raise SchedulingInPast(f"event at {at} < clock {self.clock}")
        heapq.heappush(self._heap, (at, self._seq, kind, node, data))
        self._seq += 1

    def schedule_timer(self, node: str, at: Nanos, tag: Any = None) -> None:
        if node not in self._nodes:
            raise NoPath(f"unknown timer target {node!r}")
        self._push(at, _TIMER, node, tag)

    def send(self, src: str, dst: str, payload: Any, size_bytes: int = 0) -> Nanos:
        """Schedule delivery of payload along the src->dst path; returns NIC egress time."""
        if dst not in self._nodes:
            raise NoPath(f"destination {dst!r} is not a host")
        egress = self.clock + self._nodes[src].spec.mac_serial_ns if src in self._nodes else self.clock
        arrive = egress + self.topology.path_delay_ns(src, dst, size_bytes)
        if self._jitter_rng is not None:
            arrive += int(self._jitter_rng.integers(0, self._jitter_ns + 1))
        env = Envelope(src, dst, payload, size_bytes, self.clock, egress)
        self._push(arrive, _DELIVER, dst, env)
        self._injected += 1
        return egress

    def inject(self, dst: str, payload: Any, at: Nanos, size_bytes: int = 0, src: str = "@external") -> None:
        """Deliver a payload at an absolute wire-arrival time, bypassing path delays."""
        env = Envelope(src, dst, payload, size_bytes, at, at)
        self._push(at, _DELIVER, dst, env)
        self._injected += 1

    # -- node server ---------------------------------------------------------

    def _start_service(self, rt: _NodeRuntime, env: Envelope, now: Nanos) -> None:
        svc = _service_ns(rt.spec.service, env.payload, rt.rng)
        rt.in_service = True
        self._push(now + svc, _COMPLETE, rt.spec.name, env)

    def _pull_next(self, rt: _NodeRuntime, now: Nanos) -> None:
        if rt.in_service or not rt.queue:
            return
        ready, env = rt.queue[0]
        if ready <= now:
            rt.queue.popleft()
            self._start_service(rt, env, now)
        else:
            self._push(ready, _KICK, rt.spec.name, None)

    def _handle_event(self, at: Nanos, kind: int, node: str, data: Any) -> None:
        rt = self._nodes[node]
        if kind == _DELIVER:
            env: Envelope = data
            env.ingress_ns = at
            if len(rt.queue) >= rt.spec.rx_queue_capacity:
                rt.dropped += 1
                return
            rt.queue.append((at + rt.spec.mac_serial_ns, env))
            self._pull_next(rt, at)
        elif kind == _KICK:
            self._pull_next(rt, at)
        elif kind == _COMPLETE:
            rt.in_service = False
            env = data
            rt.delivered += 1
            if rt.handler is not None:
                rt.handler.on_message(rt.ctx, env, at)
            self._pull_next(rt, at)
        else:  # _TIMER
            if rt.handler is not None:
                rt.handler.on_timer(rt.ctx, data, at)

    # -- main loop -----------------------------------------------------------

    def run_until(self, t_end: Nanos) -> SimSummary:
        while self._heap and self._heap[0][0] <= t_end:
            at, seq, kind, node, data = heapq.heappop(self._heap)
            self.clock = at
            if self._trace is not None:
                desc = type(data.payload).__name__ if kind in (_DELIVER, _COMPLETE) else str(data)
                self._trace.append((at, seq, _KIND_NAMES[kind], node, desc))
            self._events_processed += 1
            self._handle_event(at, kind, node, data)
        self.clock = max(self.clock, t_end)
        return self.summary()

    def run(self) -> SimSummary:
        """Drain every pending event (the workload must be finite)."""
        while self._heap:
            self.run_until(self._heap[0][0])
        return self.summary()

    def summary(self) -> SimSummary:
        delivered = sum(rt.delivered for rt in self._nodes.values())
        dropped = sum(rt.dropped for rt in self._nodes.values())
        return SimSummary(
            events_processed=self._events_processed,
            clock_ns=self.clock,
            injected=self._injected,
            delivered=delivered,
            dropped=dropped,
            drops_by_node={n: rt.dropped for n, rt in self._nodes.items() if rt.dropped},
            in_flight=self._injected - delivered - dropped,
        )


def record_latency(stats_sink: StatsSink, label: str, start: Nanos, end: Nanos) -> None:
    stats_sink.record(label, start, end)
