"""Closed-loop plane tests: wiring, provenance, stage physics, control reads."""

import pytest

from reflexsim.fixtures import gen_anomaly_trace
from reflexsim.monitors import SetParam
from reflexsim.plane import (
    MonitorSpec,
    Plane,
    PlaneConfig,
    PlaneConfigError,
    apply_preset,
    build_plane,
    measure_direct_reflex,
    measure_monitor_capacity,
    measure_stage_throughput,
)
from reflexsim.raft import ControlCommand
from reflexsim.rules import Action, Rule, RuleSet, Wildcard
from reflexsim.telemetry import FlowKey, HopMetadata, IntReport


def analytic_e2e_ns(cfg: PlaneConfig) -> int:
    """Hand model of the command chain, independent of the event kernel.

    classify: rx serial + service + tx serial, transit to the monitor,
    monitor: rx + service + tx, transit to the raft leader,
    leader admission: rx + tx (request service is charged at the replicas),
    transit to a follower, follower: rx + service + tx, reply transit,
    leader commit: rx + tx, transit to the target element.
    """
    hop = 2 * cfg.link_ns + cfg.switch_ns
    mac = cfg.mac_serial_ns
    classify = mac + cfg.classify_service_ns + mac
    monitor = mac + cfg.monitor_service_ns + mac
    leader_admit = mac + mac
    follower = mac + cfg.raft_request_service_ns + mac
    leader_commit = mac + mac
    return classify + hop + monitor + hop + leader_admit + hop + follower + hop + leader_commit + hop


def quiet_config(**kw) -> PlaneConfig:
    return PlaneConfig(monitors=(MonitorSpec("m0", "path_latency", threshold_ns=500),), **kw)


def run_anomaly(cfg: PlaneConfig, seed=3, rate=100_000.0):
    reports, plan = gen_anomaly_trace(seed)
    plane = build_plane(cfg)
    run = plane.inject_reports(reports, rate_rps=rate)
    return plane, run, plan


# --------------------------------------------------------------------------
# build validation
# --------------------------------------------------------------------------

def test_minimal_plane_idle_produces_no_commands():
    plane = build_plane(quiet_config())
    plane.sim.run_until(1_000_000)
    assert plane.commands == []


def test_rule_referencing_unknown_monitor_rejected():
    rules = RuleSet([Rule(0, 1, tuple(Wildcard() for _ in range(9)), Action(("ghost",)))])
    with pytest.raises(PlaneConfigError):
        build_plane(quiet_config(), rules)


def test_even_raft_size_rejected():
    with pytest.raises(PlaneConfigError):
        build_plane(quiet_config(raft_size=2))


def test_nanopu_preset_values():
    cfg = apply_preset(PlaneConfig(), "nanopu")
    assert cfg.monitor_service_ns == 50
    assert cfg.mac_serial_ns == 26
    assert cfg.raft_request_service_ns == 1532
    with pytest.raises(PlaneConfigError):
        apply_preset(PlaneConfig(), "warp")


def test_report_with_unknown_element_rejected():
    plane = build_plane(quiet_config())
    bad = IntReport(
        flow=FlowKey(1, 2, 3, 4, 6), seq=0,
        hops=(HopMetadata("s99", 0, 1, 0, 0, 100, 0.0, 0),),
    )
    with pytest.raises(PlaneConfigError):
        plane.inject_reports([bad], rate_rps=1e6)


# --------------------------------------------------------------------------
# end-to-end chain
# --------------------------------------------------------------------------

def test_clean_stream_classified_without_commands():
    reports, _ = gen_anomaly_trace(5, spike_flows=())
    plane = build_plane(quiet_config())
    run = plane.inject_reports(reports, rate_rps=1e6)
    assert run.commands == []
    assert run.classified == len(reports)
    assert run.monitored == len(reports)


def test_single_anomaly_yields_one_reroute_with_monotone_trace():
    cfg = apply_preset(quiet_config(), "nanopu")
    plane, run, plan = run_anomaly(cfg)
    assert len(run.commands) == 1
    (spike,) = plan.spikes
    cmd = run.commands[0]
    assert cmd.target_element == spike.expected_target
    (trace,) = [t for t in run.traces if t.complete()]
    assert trace.monotone()
    assert trace.e2e_ns() == run.stats["e2e"].p50_ns


def test_e2e_latency_matches_analytic_oracle_exactly():
    cfg = apply_preset(quiet_config(), "nanopu")
    plane, run, _ = run_anomaly(cfg)
    assert run.stats["e2e"].p50_ns == analytic_e2e_ns(cfg)
    assert run.stats["e2e"].p50_ns < 10_000


def test_e2e_zero_preset_zero_latency_topology():
    cfg = apply_preset(quiet_config(link_ns=0, switch_ns=0), "zero")
    plane, run, _ = run_anomaly(cfg)
    assert run.stats["e2e"].p50_ns == 0


def test_e2e_deterministic_across_runs():
    def one():
        cfg = apply_preset(quiet_config(), "nanopu")
        _, run, _ = run_anomaly(cfg, seed=11)
        return [(t.command_id, t.report_ingress_ns, t.raft_commit_ns,
                 t.switch_update_arrival_ns) for t in run.traces]

    assert one() == one()


def test_replicas_and_switch_agent_converge_after_reroute():
    cfg = quiet_config()
    plane, run, plan = run_anomaly(cfg)
    (spike,) = plan.spikes
    target = spike.expected_target
    snap = plane.read_element_state(target)
    assert len(snap.forwarding_table) == 1
    assert len(plane.agents[target].updates) == 1
    for server in plane.raft_servers.values():
        assert server.core.elements[target].forwarding_table == snap.forwarding_table


def test_sharded_classifiers_preserve_detection():
    from reflexsim.rules import ShardMode

    cfg = quiet_config(classifier_count=4, shard_mode=ShardMode.PartitionByHash)
    plane, run, plan = run_anomaly(cfg)
    assert len(run.commands) == len(plan.spikes) == 1
    assert run.classified == run.injected - run.dedup.duplicates_removed


def test_control_write_read_after_reflex():
    cfg = quiet_config()
    plane = build_plane(cfg)
    cmd = ControlCommand("bgp:1", 0, "s2", SetParam("ecn_threshold", 64))
    plane.control_write(cmd, at=1_000)
    plane.sim.run_until(2_000_000)
    assert plane.control.committed == {0}
    snap = plane.read_element_state("s2")
    assert snap.params["ecn_threshold"] == 64
    assert len(plane.agents["s2"].updates) == 1
    with pytest.raises(KeyError):
        plane.read_element_state("s3")  # provisioned but never written


# --------------------------------------------------------------------------
# direct reflex and stage physics
# --------------------------------------------------------------------------

def test_direct_reflex_latency_with_and_without_serial():
    assert measure_direct_reflex(78, 26).p50_ns == 130
    assert measure_direct_reflex(78, 0).p50_ns == 78
    assert measure_direct_reflex(0, 0).p50_ns == 0


def test_monitor_sustains_exact_service_rate():
    processed, dropped = measure_monitor_capacity(50, interval_ns=50, n_reports=20_000)
    assert processed == 20_000 and dropped == 0
    processed, dropped = measure_monitor_capacity(50, interval_ns=49, n_reports=10_000)
    assert dropped > 0


def test_rate_above_monitor_capacity_drops_in_full_plane():
    reports, _ = gen_anomaly_trace(7, n_flows=8, reports_per_flow=400, spike_flows=())
    cfg = quiet_config(monitor_service_ns=200, rx_queue_capacity=8)
    plane = build_plane(cfg)
    run = plane.inject_reports(reports, rate_rps=20_000_000)  # 50ns interval << 200ns service
    assert run.drops_by_node.get("m0", 0) > 0


def test_bottleneck_law_thresholds():
    for s_cls, s_mon in ((20, 50), (100, 50), (500, 50)):
        got = measure_stage_throughput(s_cls, s_mon)
        want = 1e9 / max(s_cls, s_mon)
        assert abs(got - want) / want < 0.01
