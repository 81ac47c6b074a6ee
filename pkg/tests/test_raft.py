"""Raft protocol rules, replicated apply, latency exactness, fault injection."""

import pytest

from reflexsim.monitors import ReflexCommand, Reroute, SetParam
from reflexsim.raft import (
    AppendEntries,
    AppendReply,
    ClientReply,
    ClientWrite,
    Control,
    ControlCommand,
    KV_ELEMENT,
    KvWrite,
    NoOp,
    RaftConfig,
    RaftLogEntry,
    RaftNode,
    Reflex,
    RequestVote,
    Role,
    VoteReply,
    state_hash,
)
from reflexsim.raftnet import (
    CALIBRATED_WRITE_SERVICE_NS,
    ClosedLoopClient,
    RaftScenario,
    analytic_noload_write_ns,
    build_raft_sim,
    kv_payload,
    raft_load_sweep,
    raft_noload_latency,
    run_safety_scenario,
    run_until_quiescent,
)
from reflexsim.rng import make_rng
from reflexsim.telemetry import FlowKey


def mk_node(name="raft0", peers=("raft0", "raft1", "raft2"), seed=1):
    return RaftNode(name, tuple(peers), make_rng(seed, "test", name))


def entries_msg(term, prev_index, prev_term, entries=(), commit=0, leader="raft1"):
    return AppendEntries(term, leader, prev_index, prev_term, tuple(entries), commit)


# --------------------------------------------------------------------------
# protocol unit rules
# --------------------------------------------------------------------------

def test_append_prev_mismatch_rejected():
    n = mk_node()
    n.current_term = 2
    n.log = [RaftLogEntry(1, 1, NoOp())]
    out = n.handle("raft1", entries_msg(2, prev_index=3, prev_term=2), now=0)
    assert out == [("raft1", AppendReply(2, False, 0))]
    assert len(n.log) == 1


def test_append_conflicting_suffix_truncated():
    n = mk_node()
    n.current_term = 3
    n.log = [RaftLogEntry(1, 1, NoOp()), RaftLogEntry(2, 2, NoOp())]
    new = RaftLogEntry(3, 2, KvWrite(b"k" * 16, b"v" * 64))
    out = n.handle("raft1", entries_msg(3, prev_index=1, prev_term=1, entries=[new]), now=0)
    assert out[-1] == ("raft1", AppendReply(3, True, 2))
    assert n.log == [RaftLogEntry(1, 1, NoOp()), new]


def test_stale_term_append_rejected():
    n = mk_node()
    n.current_term = 5
    out = n.handle("raft1", entries_msg(3, 0, 0), now=0)
    assert out == [("raft1", AppendReply(5, False, 0))]


def test_vote_granted_once_per_term():
    n = mk_node()
    req = RequestVote(term=1, candidate="raft1", last_log_index=0, last_log_term=0)
    assert n.handle("raft1", req, now=0) == [("raft1", VoteReply(1, True))]
    req2 = RequestVote(term=1, candidate="raft2", last_log_index=0, last_log_term=0)
    assert n.handle("raft2", req2, now=0) == [("raft2", VoteReply(1, False))]


def test_vote_rejected_for_stale_log():
    n = mk_node()
    n.current_term = 2
    n.log = [RaftLogEntry(2, 1, NoOp())]
    req = RequestVote(term=3, candidate="raft1", last_log_index=0, last_log_term=0)
    assert n.handle("raft1", req, now=0) == [("raft1", VoteReply(3, False))]


def test_client_write_to_follower_returns_hint():
    n = mk_node()
    n.leader_id = "raft2"
    out = n.handle("client0", ClientWrite(7, kv_payload(7)), now=0)
    assert out == [("client0", ClientReply(7, False, "raft2"))]


def test_majority_commit_advances_and_applies():
    n = mk_node()
    n.bootstrap_leader(0)
    out = n.handle("client0", ClientWrite(0, kv_payload(0)), now=0)
    assert {dst for dst, _ in out} == {"raft1", "raft2"}
    assert n.commit_index == 0
    out = n.handle("raft1", AppendReply(1, True, 1), now=10)
    assert n.commit_index == 1
    assert n.last_applied == 1
    assert ("client0", ClientReply(0, True, "raft0")) in out
    assert n.elements[KV_ELEMENT].kv[(0).to_bytes(16, "big")] == (0).to_bytes(8, "big") * 8
    # second (duplicate) reply does nothing further
    out2 = n.handle("raft2", AppendReply(1, True, 1), now=11)
    assert out2 == []


def test_single_node_cluster_commits_immediately():
    n = RaftNode("raft0", ("raft0",), make_rng(0, "solo"))
    outs = n.tick(now=10**9)  # election deadline long passed
    assert n.role is Role.Leader
    out = n.handle("client0", ClientWrite(1, kv_payload(1)), now=10**9 + 1)
    assert n.commit_index == n.last_applied == n.last_log_index()
    assert any(isinstance(m, ClientReply) and m.committed for _, m in out)


def test_malformed_kv_sizes_rejected_before_replication():
    with pytest.raises(ValueError):
        KvWrite(b"short", b"v" * 64)
    with pytest.raises(ValueError):
        KvWrite(b"k" * 16, b"v" * 63)


def test_duplicate_request_id_applies_once():
    n = RaftNode("raft0", ("raft0",), make_rng(0, "solo2"))
    n.tick(now=10**9)
    cmd = ControlCommand("c1", 0, "s1", SetParam("x", 1))
    n.handle("client0", ClientWrite(5, Control(cmd)), now=10**9)
    # same request id again: immediate committed reply, no new log entry
    log_len = n.last_log_index()
    out = n.handle("client0", ClientWrite(5, Control(cmd)), now=10**9 + 5)
    assert n.last_log_index() == log_len
    assert out == [("client0", ClientReply(5, True, "raft0"))]


def test_reflex_apply_updates_forwarding_and_forwards_to_switch():
    n = RaftNode("raft0", ("raft0",), make_rng(0, "solo3"))
    n.tick(now=10**9)
    flow = FlowKey(1, 2, 3, 4, 6)
    cmd = ReflexCommand("m1:0", "m1", 0, "s1", Reroute(flow, "s1", 3))
    out = n.handle("client0", ClientWrite(0, Reflex(cmd)), now=10**9)
    assert n.elements["s1"].forwarding_table[flow] == 3
    dsts = [dst for dst, _ in out]
    # switch update departs before the client reply
    assert dsts.index("s1") < dsts.index("client0")


def test_state_hash_equal_iff_same_state():
    a = mk_node("a", ("a",))
    b = mk_node("b", ("b",))
    for node in (a, b):
        node._apply_payload(KvWrite(b"k" * 16, b"v" * 64))
    assert state_hash(a.elements) == state_hash(b.elements)
    b._apply_payload(KvWrite(b"k" * 16, b"w" * 64))
    assert state_hash(a.elements) != state_hash(b.elements)


# --------------------------------------------------------------------------
# cluster-level behavior in the simulator
# --------------------------------------------------------------------------

def test_cold_start_elects_exactly_one_leader():
    rs = build_raft_sim(RaftScenario(seed=7, bootstrap=False))
    rs.sim.run_until(2_000_000)
    leaders = [s.core for s in rs.servers.values() if s.core.role is Role.Leader]
    assert len(leaders) == 1
    terms = {s.core.current_term for s in rs.servers.values()}
    assert len(terms) == 1


def test_leader_crash_triggers_reelection_preserving_entries():
    rs = build_raft_sim(RaftScenario(seed=8, bootstrap=False, elements=("s1",)))
    rs.sim.run_until(2_000_000)
    leader = rs.current_leader()
    assert leader is not None
    # commit one write, then kill the leader
    client = ClosedLoopClient(leader.name, 1, 0, kv_payload, start_ns=2_000_100)
    rs.sim.register(rs.client_name, client)
    client.start(rs.sim, rs.client_name)
    rs.sim.run_until(3_000_000)
    assert len(client.committed) == 1
    rs.sim.schedule_timer(leader.name, 3_000_100, "crash")
    rs.sim.run_until(6_000_000)
    new_leader = rs.current_leader()
    assert new_leader is not None and new_leader.name != leader.name
    assert new_leader.last_log_index() >= 1
    assert any(
        e.client == (rs.client_name, 0) for e in new_leader.log
    ), "committed entry missing from new leader"


def test_read_element_state_after_commit():
    rs = build_raft_sim(RaftScenario(seed=9, elements=("s1",)))
    flow = FlowKey(9, 9, 9, 9, 17)

    def payload(rid):
        return Reflex(ReflexCommand(f"m1:{rid}", "m1", 0, "s1", Reroute(flow, "s1", 4)))

    client = ClosedLoopClient("raft0", 1, 0, payload, start_ns=100)
    rs.sim.register(rs.client_name, client)
    client.start(rs.sim, rs.client_name)
    run_until_quiescent(rs, lambda: len(client.committed) == 1)
    snap = rs.read_element_state("s1")
    assert snap.forwarding_table[flow] == 4
    # all three replicas applied it
    for s in rs.servers.values():
        assert s.core.elements["s1"].forwarding_table[flow] == 4
    # and the physical switch agent received exactly one update
    assert len(rs.agents["s1"].updates) == 1
    with pytest.raises(KeyError):
        rs.read_element_state("nope")


# --------------------------------------------------------------------------
# latency decomposition (the paper-shaped numbers)
# --------------------------------------------------------------------------

def test_write_latency_zero_service_exact():
    for switch_ns, expect in ((1, 348), (300, 1544)):
        cfg = RaftScenario(switch_ns=switch_ns)
        stats = raft_noload_latency(cfg, trials=32)
        assert stats.p50_ns == stats.max_ns == expect == analytic_noload_write_ns(cfg)


def test_latency_delta_is_four_switch_traversals():
    a = raft_noload_latency(RaftScenario(switch_ns=1), trials=8).p50_ns
    b = raft_noload_latency(RaftScenario(switch_ns=300), trials=8).p50_ns
    assert b - a == 4 * 299 == 1196


def test_calibrated_service_hits_paper_medians():
    cfg1 = RaftScenario(switch_ns=1, request_service_ns=CALIBRATED_WRITE_SERVICE_NS)
    cfg300 = RaftScenario(switch_ns=300, request_service_ns=CALIBRATED_WRITE_SERVICE_NS)
    assert raft_noload_latency(cfg1, trials=64).p50_ns == 1880
    assert raft_noload_latency(cfg300, trials=64).p50_ns == 3076


def test_sweep_stable_vs_overload():
    cfg = RaftScenario(switch_ns=300, request_service_ns=2000)
    pts = raft_load_sweep(cfg, [400_000, 520_000], requests=800)
    stable, overload = pts
    assert stable.stats.p99_ns == stable.stats.p50_ns  # no queueing at all
    assert stable.stats.p99_ns < 4_500
    assert overload.drops > 0 or overload.stats.p99_ns > 10_000


# --------------------------------------------------------------------------
# randomized safety
# --------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(8))
def test_safety_scenario_clean(seed):
    report = run_safety_scenario(seed)
    assert report.ok, f"seed {seed}: {report.violations}"
    assert report.terms_with_leader >= 1
    assert report.acked > 0
