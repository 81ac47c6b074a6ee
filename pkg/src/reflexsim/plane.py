"""The closed control loop: telemetry -> classify -> monitor -> replicated state.

One simulation hosts the whole chain: a telemetry source feeding classifier
nodes, classifier nodes dispatching projected reports to monitor nodes,
monitors writing commands into the Raft cluster, and the leader forwarding
committed commands to element agents. Every command carries a provenance
trace from report ingress to switch-update arrival, and the end-to-end
latency equals the sum of the per-stage terms exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any

from .engine import ClassifierEngine, EngineConfig
from .monitors import (
    MicroburstMonitor,
    PathLatencyMonitor,
    ReflexCommand,
    threshold_observe,
)
from .raft import (
    ClientReply,
    ClientWrite,
    Control,
    ControlCommand,
    RaftConfig,
    RaftNode,
    Reflex,
    Role,
    message_size_bytes,
)
from .raftnet import ElementAgent, RaftServer
from .rng import make_rng
from .rules import (
    Action,
    ProjectedReport,
    Rule,
    RuleSet,
    ShardMode,
    Wildcard,
    dispatch,
    key_from_report,
    shard_for_key,
    shard_ruleset,
)
from .simnet import (
    ConstantService,
    Envelope,
    HostSpec,
    LatencyStats,
    Nanos,
    NodeCtx,
    PerTypeService,
    Simulator,
    build_topology,
    star,
)
from .telemetry import IntReport, ReportStreamStats, dedup_coalesce


class PlaneConfigError(Exception):
    pass


@dataclass(frozen=True)
class MonitorSpec:
    monitor_id: str
    kind: str = "path_latency"  # path_latency | microburst | threshold
    threshold_ns: int = 500
    window_size: int = 10
    depth_threshold_pkts: int = 10
    top_k: int = 2
    contributor_window_ns: int = 100_000
    field: str = "link_utilization"
    limit: float = 0.9


@dataclass(frozen=True)
class PlaneConfig:
    link_ns: int = 43
    switch_ns: int = 300
    classifier_count: int = 1
    shard_mode: ShardMode = ShardMode.Replicate
    monitors: tuple[MonitorSpec, ...] = (MonitorSpec("m0"),)
    raft_size: int = 3
    classify_service_ns: int = 0
    monitor_service_ns: int = 0
    raft_request_service_ns: int = 0
    mac_serial_ns: int = 0
    rx_queue_capacity: int = 1024
    elements: tuple[str, ...] = ("s1", "s2", "s3")
    dedup_window: int = 1024
    seed: int = 0

    def validate(self) -> None:
        if self.raft_size < 1 or self.raft_size % 2 == 0:
            raise PlaneConfigError(f"raft_size must be odd and >= 1, got {self.raft_size}")
        if self.classifier_count < 1:
            raise PlaneConfigError("at least one classifier node required")
        if not self.monitors:
            raise PlaneConfigError("at least one monitor required")
        kinds = {"path_latency", "microburst", "threshold"}
        for m in self.monitors:
            if m.kind not in kinds:
                raise PlaneConfigError(f"monitors[{m.monitor_id}].kind: unknown kind {m.kind!r}")
        ids = [m.monitor_id for m in self.monitors]
        if len(set(ids)) != len(ids):
            raise PlaneConfigError("duplicate monitor ids")


# The paper-shaped preset: 50ns per report at monitors, 26ns MAC+serial on
# every NIC, the calibrated replication service, and a classify budget of
# one line-rate report slot (120ns at 8.3M reports/s).
PRESETS: dict[str, dict[str, int]] = {
    "nanopu": {
        "classify_service_ns": 120,
        "monitor_service_ns": 50,
        "raft_request_service_ns": 1532,
        "mac_serial_ns": 26,
    },
    "zero": {
        "classify_service_ns": 0,
        "monitor_service_ns": 0,
        "raft_request_service_ns": 0,
        "mac_serial_ns": 0,
    },
}


def apply_preset(cfg: PlaneConfig, preset: str) -> PlaneConfig:
    try:
        return replace(cfg, **PRESETS[preset])
    except KeyError:
        raise PlaneConfigError(f"unknown preset {preset!r}") from None


def default_ruleset(monitors: tuple[MonitorSpec, ...]) -> RuleSet:
    """One all-wildcard rule per monitor with full projection."""
    rules = [
        Rule(i, len(monitors) - i, tuple(Wildcard() for _ in range(9)),
             Action((m.monitor_id,), None))
        for i, m in enumerate(monitors)
    ]
    return RuleSet(rules)


# --------------------------------------------------------------------------
# Provenance
# --------------------------------------------------------------------------

@dataclass
class ReflexTrace:
    command_id: str
    report_ingress_ns: Nanos = -1
    classify_done_ns: Nanos = -1
    monitor_decision_ns: Nanos = -1
    raft_commit_ns: Nanos = -1
    switch_update_egress_ns: Nanos = -1
    switch_update_arrival_ns: Nanos = -1

    def complete(self) -> bool:
        return self.switch_update_arrival_ns >= 0

    def e2e_ns(self) -> Nanos:
        return self.switch_update_arrival_ns - self.report_ingress_ns

    def monotone(self) -> bool:
        stamps = [
            self.report_ingress_ns, self.classify_done_ns, self.monitor_decision_ns,
            self.raft_commit_ns, self.switch_update_egress_ns, self.switch_update_arrival_ns,
        ]
        return all(a <= b for a, b in zip(stamps, stamps[1:]))


@dataclass(frozen=True)
class ClassifiedReport:
    projected: ProjectedReport
    report_ingress_ns: Nanos
    classify_done_ns: Nanos


@dataclass
class RunReport:
    injected: int
    dedup: ReportStreamStats
    classified: int
    monitored: int
    commands: list[ReflexCommand]
    traces: list[ReflexTrace]
    stats: dict[str, LatencyStats]
    drops_by_node: dict[str, int]


# --------------------------------------------------------------------------
# Node handlers
# --------------------------------------------------------------------------

class ClassifierNode:
    def __init__(self, plane: "Plane", engine: ClassifierEngine):
        self.plane = plane
        self.engine = engine
        self.processed = 0

    def on_message(self, ctx: NodeCtx, env: Envelope, now: Nanos) -> None:
        report: IntReport = env.payload
        self.processed += 1
        match = self.engine.classify(key_from_report(report))
        ctx.record("stage.classify", env.ingress_ns, now)
        for dest, projected in dispatch(report, match):
            msg = ClassifiedReport(projected, env.ingress_ns, now)
            ctx.send(dest, msg, size_bytes=64)

    def on_timer(self, ctx: NodeCtx, tag: Any, now: Nanos) -> None:
        pass


class MonitorNode:
    """Runs one detector and writes its commands through the Raft cluster."""

    def __init__(self, plane: "Plane", spec: MonitorSpec, leader_hint: str):
        self.plane = plane
        self.spec = spec
        self.leader_hint = leader_hint
        self.processed = 0
        self._rid = 0
        self._pending: dict[int, ReflexCommand] = {}
        if spec.kind == "path_latency":
            self.detector = PathLatencyMonitor(
                spec.monitor_id, spec.threshold_ns, spec.window_size
            )
        elif spec.kind == "microburst":
            self.detector = MicroburstMonitor(
                spec.monitor_id, spec.depth_threshold_pkts, spec.top_k,
                spec.contributor_window_ns,
            )
        else:
            self.detector = None

    def _observe(self, projected: ProjectedReport, now: Nanos) -> list[ReflexCommand]:
        if self.spec.kind == "path_latency":
            cmd = self.detector.observe(projected.report, now)
            return [cmd] if cmd else []
        if self.spec.kind == "microburst":
            return self.detector.observe(projected.report, now)
        cmd = threshold_observe(
            projected.report, self.spec.field, self.spec.limit,
            monitor_id=self.spec.monitor_id, now=now,
        )
        return [cmd] if cmd else []

    def on_message(self, ctx: NodeCtx, env: Envelope, now: Nanos) -> None:
        msg = env.payload
        if isinstance(msg, ClassifiedReport):
            self.processed += 1
            ctx.record("stage.monitor", env.ingress_ns, now)
            for cmd in self._observe(msg.projected, now):
                trace = self.plane.traces.setdefault(cmd.command_id, ReflexTrace(cmd.command_id))
                trace.report_ingress_ns = msg.report_ingress_ns
                trace.classify_done_ns = msg.classify_done_ns
                trace.monitor_decision_ns = now
                self.plane.commands.append(cmd)
                self._submit(ctx, cmd)
        elif isinstance(msg, ClientReply):
            if not msg.committed and msg.leader_hint:
                self.leader_hint = msg.leader_hint
                cmd = self._pending.get(msg.request_id)
                if cmd is not None:
                    wire = ClientWrite(msg.request_id, Reflex(cmd))
                    ctx.send(self.leader_hint, wire, message_size_bytes(wire))
            elif msg.committed:
                self._pending.pop(msg.request_id, None)

    def _submit(self, ctx: NodeCtx, cmd: ReflexCommand) -> None:
        rid = self._rid
        self._rid += 1
        self._pending[rid] = cmd
        wire = ClientWrite(rid, Reflex(cmd))
        ctx.send(self.leader_hint, wire, message_size_bytes(wire))

    def on_timer(self, ctx: NodeCtx, tag: Any, now: Nanos) -> None:
        pass


class TracingElementAgent(ElementAgent):
    def __init__(self, plane: "Plane"):
        super().__init__()
        self.plane = plane

    def on_message(self, ctx: NodeCtx, env: Envelope, now: Nanos) -> None:
        super().on_message(ctx, env, now)
        msg = env.payload
        trace = self.plane.traces.get(msg.command_id)
        if trace is not None:
            trace.raft_commit_ns = msg.committed_at
            trace.switch_update_egress_ns = env.egress_ns
            trace.switch_update_arrival_ns = env.ingress_ns


class ControlStub:
    """Control-plane writer: replicates commands through the same Raft path."""

    def __init__(self, leader_hint: str):
        self.leader_hint = leader_hint
        self._rid = 0
        self._pending: dict[int, ControlCommand] = {}
        self.committed: set[int] = set()

    def on_timer(self, ctx: NodeCtx, tag: Any, now: Nanos) -> None:
        cmd: ControlCommand = tag
        rid = self._rid
        self._rid += 1
        self._pending[rid] = cmd
        wire = ClientWrite(rid, Control(cmd))
        ctx.send(self.leader_hint, wire, message_size_bytes(wire))

    def on_message(self, ctx: NodeCtx, env: Envelope, now: Nanos) -> None:
        msg = env.payload
        if not isinstance(msg, ClientReply):
            return
        if msg.committed:
            self.committed.add(msg.request_id)
            self._pending.pop(msg.request_id, None)
        elif msg.leader_hint:
            self.leader_hint = msg.leader_hint
            cmd = self._pending.get(msg.request_id)
            if cmd is not None:
                wire = ClientWrite(msg.request_id, Control(cmd))
                ctx.send(self.leader_hint, wire, message_size_bytes(wire))


class SourceNode:
    """Replays a prepared (delay to next, report) schedule into the classifiers."""

    def __init__(self, plane: "Plane"):
        self.plane = plane
        self.emitted = 0
        self._rr = 0

    def on_timer(self, ctx: NodeCtx, tag: Any, now: Nanos) -> None:
        report: IntReport = tag
        plane = self.plane
        if plane.config.shard_mode is ShardMode.PartitionByHash and plane.n_classifiers > 1:
            i = shard_for_key(key_from_report(report), plane.n_classifiers)
        else:
            i = self._rr % plane.n_classifiers
            self._rr += 1
        self.emitted += 1
        ctx.send(f"cls{i}", report, size_bytes=report.pkt_size_bytes or 64)

    def on_message(self, ctx: NodeCtx, env: Envelope, now: Nanos) -> None:
        pass


# --------------------------------------------------------------------------
# Plane assembly
# --------------------------------------------------------------------------

class Plane:
    def __init__(self, config: PlaneConfig, ruleset: RuleSet | None = None):
        config.validate()
        self.config = config
        self.ruleset = ruleset if ruleset is not None else default_ruleset(config.monitors)
        monitor_ids = {m.monitor_id for m in config.monitors}
        for rule in self.ruleset.rules:
            missing = set(rule.action.destinations) - monitor_ids
            if missing:
                raise PlaneConfigError(
                    f"rules[{rule.rule_id}].action: undefined monitors {sorted(missing)}"
                )
        self.n_classifiers = config.classifier_count
        self.traces: dict[str, ReflexTrace] = {}
        self.commands: list[ReflexCommand] = []

        raft_names = [f"raft{i}" for i in range(config.raft_size)]
        hosts = [HostSpec("gen0", mac_serial_ns=config.mac_serial_ns)]
        hosts += [
            HostSpec(f"cls{i}", service=ConstantService(config.classify_service_ns),
                     rx_queue_capacity=config.rx_queue_capacity,
                     mac_serial_ns=config.mac_serial_ns)
            for i in range(config.classifier_count)
        ]
        hosts += [
            HostSpec(m.monitor_id, service=PerTypeService(
                {"ClassifiedReport": config.monitor_service_ns}, default_ns=0),
                rx_queue_capacity=config.rx_queue_capacity,
                mac_serial_ns=config.mac_serial_ns)
            for m in config.monitors
        ]
        hosts += [
            HostSpec(n, service=PerTypeService(
                {"AppendEntries": config.raft_request_service_ns}, default_ns=0),
                rx_queue_capacity=config.rx_queue_capacity,
                mac_serial_ns=config.mac_serial_ns)
            for n in raft_names
        ]
        hosts += [HostSpec(e) for e in config.elements]
        hosts += [HostSpec("ctl0")]
        topo = build_topology(star(hosts, config.link_ns, config.switch_ns))
        self.sim = Simulator(topo, seed=config.seed)

        self.source = SourceNode(self)
        self.sim.register("gen0", self.source)

        shards = shard_ruleset(self.ruleset, config.classifier_count, config.shard_mode)
        self.classifiers = []
        for i in range(config.classifier_count):
            node = ClassifierNode(self, ClassifierEngine(shards[i], EngineConfig()))
            self.classifiers.append(node)
            self.sim.register(f"cls{i}", node)

        self.raft_servers: dict[str, RaftServer] = {}
        for n in raft_names:
            core = RaftNode(n, tuple(raft_names), make_rng(config.seed, "raft", n), RaftConfig())
            self.raft_servers[n] = RaftServer(core)
            self.sim.register(n, self.raft_servers[n])
        self.raft_servers[raft_names[0]].core.bootstrap_leader(0)
        for n in raft_names[1:]:
            self.raft_servers[n].core.bootstrap_follower(raft_names[0], 0)
        for n in raft_names:
            self.sim.schedule_timer(n, 0, "tick")

        self.monitors: dict[str, MonitorNode] = {}
        for spec in config.monitors:
            node = MonitorNode(self, spec, raft_names[0])
            self.monitors[spec.monitor_id] = node
            self.sim.register(spec.monitor_id, node)

        self.agents: dict[str, TracingElementAgent] = {}
        for e in config.elements:
            agent = TracingElementAgent(self)
            self.agents[e] = agent
            self.sim.register(e, agent)

        self.control = ControlStub(raft_names[0])
        self.sim.register("ctl0", self.control)

    # -- control-plane interface -----------------------------------------------

    def current_leader(self) -> RaftNode | None:
        leaders = [
            s.core for s in self.raft_servers.values() if s.core.role is Role.Leader
        ]
        return max(leaders, key=lambda c: c.current_term) if leaders else None

    def read_element_state(self, element_id: str):
        """Leader-local read of the applied state for one element."""
        leader = self.current_leader()
        if leader is None:
            raise LookupError("no elected leader")
        if element_id not in leader.elements:
            raise KeyError(f"unknown element {element_id!r}")
        return leader.elements[element_id].snapshot()

    def control_write(self, cmd: ControlCommand, at: Nanos) -> None:
        """Queue a control-plane command; replicated then forwarded like a reflex."""
        self.sim.schedule_timer("ctl0", at, cmd)

    # -- workload -------------------------------------------------------------

    def inject_reports(
        self,
        reports: list[IntReport],
        rate_rps: float,
        start_ns: Nanos = 1_000,
        run_extra_ns: Nanos = 20_000_000,
    ) -> RunReport:
        if rate_rps <= 0:
            raise PlaneConfigError("rate_rps must be positive")
        known = set(self.config.elements)
        for r in reports:
            for h in r.hops:
                if h.switch_id not in known:
                    raise PlaneConfigError(
                        f"report references element {h.switch_id!r} not in the plane"
                    )
        deduped, dedup_stats = dedup_coalesce(reports, self.config.dedup_window)
        interval = max(1, round(1e9 / rate_rps))
        t = start_ns
        for r in deduped:
            self.sim.schedule_timer("gen0", t, r)
            t += interval
        self.sim.run_until(t + run_extra_ns)
        return self._run_report(len(reports), dedup_stats)

    def _run_report(self, injected: int, dedup_stats: ReportStreamStats) -> RunReport:
        summary = self.sim.summary()
        stats = {label: self.sim.stats.summary(label) for label in self.sim.stats.labels()}
        done = [t for t in self.traces.values() if t.complete()]
        if done:
            stats["e2e"] = LatencyStats.from_samples([t.e2e_ns() for t in done])
        return RunReport(
            injected=injected,
            dedup=dedup_stats,
            classified=sum(c.processed for c in self.classifiers),
            monitored=sum(m.processed for m in self.monitors.values()),
            commands=list(self.commands),
            traces=sorted(self.traces.values(), key=lambda t: t.command_id),
            stats=stats,
            drops_by_node=summary.drops_by_node,
        )


def build_plane(config: PlaneConfig, ruleset: RuleSet | None = None) -> Plane:
    return Plane(config, ruleset)


# --------------------------------------------------------------------------
# Scenario measurements
# --------------------------------------------------------------------------

def measure_direct_reflex(
    monitor_service_ns: int,
    mac_serial_ns: int,
    link_ns: int = 43,
    switch_ns: int = 300,
    seed: int = 0,
) -> LatencyStats:
    """Single-node reflex: report in, one command out, no classification or raft.

    Latency is from wire arrival of the triggering report at the monitor NIC
    to the command leaving the monitor NIC: rx serial + service + tx serial.
    """
    hosts = (
        HostSpec("gen0"),
        HostSpec("mon0", service=ConstantService(monitor_service_ns),
                 mac_serial_ns=mac_serial_ns),
        HostSpec("s1"),
    )
    topo = build_topology(star(hosts, link_ns, switch_ns))
    sim = Simulator(topo, seed=seed)
    samples: list[int] = []

    class DirectMonitor:
        def on_message(self, ctx: NodeCtx, env: Envelope, now: Nanos) -> None:
            cmd = threshold_observe(env.payload, "queue_depth", 10, monitor_id="m0", now=now)
            if cmd is not None:
                egress = ctx.send("s1", cmd, 64)
                samples.append(egress - env.ingress_ns)

        def on_timer(self, ctx, tag, now):
            pass

    class Gen:
        def on_timer(self, ctx: NodeCtx, tag: Any, now: Nanos) -> None:
            ctx.send("mon0", tag, 64)

        def on_message(self, ctx, env, now):
            pass

    sim.register("mon0", DirectMonitor())
    sim.register("gen0", Gen())
    sim.register("s1", ElementAgent())

    from .telemetry import FlowKey, HopMetadata

    flow = FlowKey(1, 2, 3, 4, 6)
    calm = IntReport(flow=flow, seq=0, hops=(HopMetadata("s1", 0, 1, 0, 1, 100, 0.1, 0),))
    spike = IntReport(flow=flow, seq=1, hops=(HopMetadata("s1", 0, 1, 0, 99, 100, 0.1, 0),))
    sim.schedule_timer("gen0", 0, calm)
    sim.schedule_timer("gen0", 10_000, spike)
    sim.run_until(1_000_000)
    return LatencyStats.from_samples(samples)


def measure_monitor_capacity(
    service_ns: int,
    interval_ns: int,
    n_reports: int,
    queue_capacity: int = 64,
    seed: int = 0,
) -> tuple[int, int]:
    """(processed, dropped) for a lone monitor node fed at a fixed interval."""
    hosts = (
        HostSpec("gen0"),
        HostSpec("mon0", service=ConstantService(service_ns),
                 rx_queue_capacity=queue_capacity),
    )
    topo = build_topology(star(hosts, 0, 0))
    sim = Simulator(topo, seed=seed)

    class Sink:
        processed = 0

        def on_message(self, ctx, env, now):
            Sink.processed += 1

        def on_timer(self, ctx, tag, now):
            pass

    class Gen:
        sent = 0

        def on_timer(self, ctx: NodeCtx, tag: Any, now: Nanos) -> None:
            ctx.send("mon0", Gen.sent, 64)
            Gen.sent += 1
            if Gen.sent < n_reports:
                ctx.set_timer(now + interval_ns, None)

        def on_message(self, ctx, env, now):
            pass

    Sink.processed = 0
    Gen.sent = 0
    sim.register("gen0", Gen())
    sim.register("mon0", Sink())
    sim.schedule_timer("gen0", 0, None)
    summary = sim.run()
    return Sink.processed, summary.dropped


def measure_stage_throughput(
    classify_service_ns: int,
    monitor_service_ns: int,
    inject_interval_ns: int = 10,
    duration_ns: int = 2_000_000,
    seed: int = 0,
) -> float:
    """Sustained reports/s through classify->monitor when overdriven at the source."""
    hosts = (
        HostSpec("gen0"),
        HostSpec("cls0", service=ConstantService(classify_service_ns), rx_queue_capacity=16),
        HostSpec("mon0", service=ConstantService(monitor_service_ns), rx_queue_capacity=16),
    )
    topo = build_topology(star(hosts, 0, 0))
    sim = Simulator(topo, seed=seed)
    w0, w1 = duration_ns // 4, duration_ns
    done_at: list[int] = []

    class Cls:
        def on_message(self, ctx, env, now):
            ctx.send("mon0", env.payload, 64)

        def on_timer(self, ctx, tag, now):
            pass

    class Mon:
        def on_message(self, ctx, env, now):
            if w0 <= now < w1:
                done_at.append(now)

        def on_timer(self, ctx, tag, now):
            pass

    class Gen:
        def on_timer(self, ctx: NodeCtx, tag: Any, now: Nanos) -> None:
            ctx.send("cls0", now, 64)
            if now + inject_interval_ns < duration_ns:
                ctx.set_timer(now + inject_interval_ns, None)

        def on_message(self, ctx, env, now):
            pass

    sim.register("gen0", Gen())
    sim.register("cls0", Cls())
    sim.register("mon0", Mon())
    sim.schedule_timer("gen0", 0, None)
    sim.run_until(duration_ns)
    if not done_at:
        return 0.0
    return len(done_at) * 1e9 / (w1 - w0)
