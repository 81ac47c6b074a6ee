"""Deterministic synthetic workloads: rulesets, key traces, INT streams.

Everything is generated from labeled sub-seeds of one root seed, so two
invocations with the same seed produce byte-identical assets. Planted
anomalies come with an independent ground-truth plan (the sidecar), never
derived by running the detector under test.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .rng import make_rng, uniform_int
from .rules import (
    Action,
    Exact,
    FieldMatcher,
    Prefix,
    Range,
    Rule,
    RuleSet,
    Wildcard,
    dump_ruleset,
)
from .telemetry import FlowKey, HopMetadata, IntReport, dump_trace

WELL_KNOWN_PORTS = (22, 25, 53, 80, 123, 443, 8080)


def _prefix_matcher(rng, pool: list[int]) -> FieldMatcher:
    r = rng.random()
    if r < 0.05:
        return Wildcard()
    base = int(pool[uniform_int(rng, 0, len(pool) - 1)])
    if r < 0.15:
        return Prefix(base, 8)
    if r < 0.40:
        return Prefix(base | (uniform_int(rng, 0, 255) << 8), 16)
    if r < 0.75:
        return Prefix(base | uniform_int(rng, 0, (1 << 16) - 1), 24)
    return Prefix(base | uniform_int(rng, 0, (1 << 24) - 1), 32)


def _port_matcher(rng) -> FieldMatcher:
    r = rng.random()
    if r < 0.55:
        return Wildcard()
    if r < 0.80:
        p = WELL_KNOWN_PORTS[uniform_int(rng, 0, len(WELL_KNOWN_PORTS) - 1)]
        return Range(p, p)
    lo = uniform_int(rng, 0, 60000)
    return Range(lo, uniform_int(rng, lo, 65535))


def _proto_matcher(rng) -> FieldMatcher:
    r = rng.random()
    if r < 0.55:
        return Exact(6)
    if r < 0.80:
        return Exact(17)
    return Wildcard()


def _extra_matcher(rng, hi: int, p_exact: float) -> FieldMatcher:
    if rng.random() < p_exact:
        return Exact(uniform_int(rng, 0, hi))
    return Wildcard()


def gen_acl_ruleset(n_rules: int, seed: int, monitors: tuple[str, ...] = ("m0",)) -> RuleSet:
    """ACL-like prefix/range ruleset; earlier rules get higher priority."""
    rng = make_rng(seed, "ruleset")
    pool = [(10 << 24), (172 << 24), (192 << 24), (100 << 24)]
    rules = []
    for i in range(n_rules):
        dest = monitors[uniform_int(rng, 0, len(monitors) - 1)]
        matchers = (
            _prefix_matcher(rng, pool),
            _prefix_matcher(rng, pool),
            _port_matcher(rng),
            _port_matcher(rng),
            _proto_matcher(rng),
            _extra_matcher(rng, 32, 0.10),
            _extra_matcher(rng, 64, 0.05),
            _extra_matcher(rng, 7, 0.05),
            _extra_matcher(rng, 4, 0.05),
        )
        rules.append(Rule(rule_id=i, priority=n_rules - i, matchers=matchers,
                          action=Action((dest,))))
    return RuleSet(rules)


def gen_keys(ruleset: RuleSet, n_keys: int, seed: int, hit_fraction: float = 0.7) -> np.ndarray:
    """Key corpus mixing uniform draws with draws inside random rule boxes."""
    rng = make_rng(seed, "keys")
    widths = np.array([(1 << fd.bits) - 1 for fd in ruleset.schema], dtype=np.int64)
    keys = np.empty((n_keys, len(ruleset.schema)), dtype=np.int64)
    n_rules = len(ruleset)
    for i in range(n_keys):
        if n_rules and rng.random() < hit_fraction:
            rule = ruleset.rules[uniform_int(rng, 0, n_rules - 1)]
            for j, (lo, hi) in enumerate(rule.intervals(ruleset.schema)):
                keys[i, j] = uniform_int(rng, lo, hi)
        else:
            for j, w in enumerate(widths):
                keys[i, j] = uniform_int(rng, 0, int(w))
    return keys


# --------------------------------------------------------------------------
# INT traces with planted path-latency anomalies
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PlantedSpike:
    flow: str                # telemetry flow string form
    flow_index: int
    seq: int                 # per-flow seq of the spiking report
    trace_line: int          # 1-based position in the trace file
    expected_target: str     # switch the reroute must address
    spike_hop: int
    path_latency_ns: int


@dataclass(frozen=True)
class AnomalyPlan:
    window: int
    threshold_ns: int
    spikes: tuple[PlantedSpike, ...]


def gen_anomaly_trace(
    seed: int,
    n_flows: int = 4,
    reports_per_flow: int = 24,
    spike_flows: tuple[int, ...] = (0,),
    window: int = 10,
    threshold_ns: int = 500,
    switches: tuple[str, ...] = ("s1", "s2", "s3"),
) -> tuple[list[IntReport], AnomalyPlan]:
    """Interleaved constant-baseline flows with one planted spike per chosen flow.

    The spike lands right after the detector window fills (seq = window),
    exceeds baseline + threshold at the middle hop, so the expected reroute
    target is the switch upstream of that hop.
    """
    rng = make_rng(seed, "trace")
    flows = [
        FlowKey((10 << 24) | i, (10 << 24) | (1 << 16) | i, 40000 + i, 80, 6)
        for i in range(n_flows)
    ]
    base = [
        tuple(uniform_int(rng, 200, 900) for _ in switches) for _ in range(n_flows)
    ]
    spike_hop = 1 if len(switches) > 1 else 0
    reports: list[IntReport] = []
    spikes: list[PlantedSpike] = []
    line = 0
    for seq in range(reports_per_flow):
        for fi, flow in enumerate(flows):
            line += 1
            lats = list(base[fi])
            is_spike = fi in spike_flows and seq == window
            if is_spike:
                lats[spike_hop] += threshold_ns + 1000
            ts = 0
            hops = []
            for hop_i, sw in enumerate(switches):
                ts += lats[hop_i]
                hops.append(
                    HopMetadata(sw, hop_i, hop_i + 1, 0, uniform_int(rng, 0, 8),
                                lats[hop_i], uniform_int(rng, 0, 9000) / 10_000, ts)
                )
            r = IntReport(flow=flow, seq=seq, hops=tuple(hops), pkt_size_bytes=1500)
            reports.append(r)
            if is_spike:
                target = switches[spike_hop - 1] if spike_hop > 0 else switches[0]
                spikes.append(
                    PlantedSpike(
                        flow=str(flow), flow_index=fi, seq=seq, trace_line=line,
                        expected_target=target, spike_hop=spike_hop,
                        path_latency_ns=sum(lats),
                    )
                )
    return reports, AnomalyPlan(window, threshold_ns, tuple(spikes))


def write_anomaly_fixture(out_dir: Path, seed: int, **kw) -> tuple[Path, Path]:
    reports, plan = gen_anomaly_trace(seed, **kw)
    trace_path = out_dir / "trace_anomaly1.int"
    sidecar_path = out_dir / "trace_anomaly1.json"
    dump_trace(reports, trace_path)
    sidecar = {
        "window": plan.window,
        "threshold_ns": plan.threshold_ns,
        "spikes": [asdict(s) for s in plan.spikes],
    }
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return trace_path, sidecar_path


def write_ruleset_fixture(out_dir: Path, seed: int, n_rules: int = 100,
                          name: str = "acl_100.rules") -> Path:
    rs = gen_acl_ruleset(n_rules, seed)
    path = out_dir / name
    dump_ruleset(rs, path)
    return path
