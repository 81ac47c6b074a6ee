"""Ruleset parsing, linear-scan classification, dispatch, and sharding."""

import numpy as np
import pytest

from reflexsim.fixtures import gen_acl_ruleset, gen_keys
from reflexsim.rules import (
    Action,
    DEFAULT_SCHEMA,
    Exact,
    Prefix,
    Range,
    Rule,
    RuleError,
    RuleParseError,
    RuleSet,
    ShardMode,
    Wildcard,
    classify_linear,
    classify_linear_batch,
    classify_sharded,
    dispatch,
    dump_ruleset,
    format_rule,
    key_from_report,
    load_ruleset,
    parse_ruleset,
    project_report,
    shard_for_key,
    shard_ruleset,
)
from reflexsim.telemetry import DropInfo, DropReason, FlowKey, HopMetadata, IntReport

W = Wildcard()


def rule(rule_id, priority, src_ip=W, dst_ip=W, src_port=W, dst_port=W, proto=W,
         switch=W, link=W, queue=W, drop=W, action=Action()):
    return Rule(rule_id, priority, (src_ip, dst_ip, src_port, dst_port, proto,
                                    switch, link, queue, drop), action)


def key(sip=0, dip=0, sp=0, dp=0, proto=0, sw=0, link=0, q=0, drop=0):
    return (sip, dip, sp, dp, proto, sw, link, q, drop)


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

def test_parse_all_wildcard_rule():
    rs = parse_ruleset("@0.0.0.0/0 0.0.0.0/0 0:65535 0:65535 0x00/0x00 * * * *\n")
    assert len(rs) == 1
    assert all(isinstance(m, Wildcard) for m in rs.rules[0].matchers)


def test_parse_prefix_and_exact_port():
    rs = parse_ruleset("@10.0.0.0/8 0.0.0.0/0 0:65535 80:80 0x06/0xFF * * * *\n")
    r = rs.rules[0]
    assert r.matchers[0] == Prefix(10 << 24, 8)
    assert r.matchers[3] == Range(80, 80)
    assert r.matchers[3].interval(16) == (80, 80)
    assert r.matchers[4] == Exact(6)


def test_parse_vanilla_classbench_spacing_and_flags():
    # "lo : hi" spacing plus a trailing flags column must load unchanged.
    rs = parse_ruleset("@1.2.3.4/32 5.6.7.8/16 0 : 65535 1024 : 2047 0x11/0xFF 0x0000/0x0200\n")
    r = rs.rules[0]
    assert r.matchers[2] == Wildcard()
    assert r.matchers[3] == Range(1024, 2047)
    assert r.matchers[5] == Wildcard()  # extras default to wildcard


def test_parse_inverted_range_reports_line():
    text = "@0.0.0.0/0 0.0.0.0/0 0:65535 0:65535 0x00/0x00\n@0.0.0.0/0 0.0.0.0/0 500:100 0:65535 0x00/0x00\n"
    with pytest.raises(RuleParseError) as exc:
        parse_ruleset(text)
    assert "line 2" in str(exc.value)


def test_parse_action_clause():
    rs = parse_ruleset(
        "@10.0.0.0/8 0.0.0.0/0 0:65535 0:65535 0x06/0xFF * * * * -> m1,m2 {hop_latency,queue_depth}\n"
    )
    act = rs.rules[0].action
    assert act.destinations == ("m1", "m2")
    assert act.projection == frozenset({"hop_latency", "queue_depth"})


def test_parse_default_action_when_clause_absent():
    rs = parse_ruleset("@0.0.0.0/0 0.0.0.0/0 0:65535 0:65535 0x00/0x00\n")
    assert rs.rules[0].action == Action(("m0",), None)


def test_parse_drop_reason_by_name():
    rs = parse_ruleset("@0.0.0.0/0 0.0.0.0/0 0:65535 0:65535 0x00/0x00 * * * QueueOverflow\n")
    assert rs.rules[0].matchers[8] == Exact(1)


def test_priority_defaults_earlier_lines_win():
    text = (
        "@10.0.0.0/8 0.0.0.0/0 0:65535 0:65535 0x00/0x00\n"
        "@0.0.0.0/0 0.0.0.0/0 0:65535 0:65535 0x00/0x00\n"
    )
    rs = parse_ruleset(text)
    assert rs.rules[0].priority > rs.rules[1].priority
    m = classify_linear(rs, key(sip=10 << 24))
    assert m.rule_id == 0


def test_ruleset_round_trip_through_file(tmp_path):
    rs = gen_acl_ruleset(60, seed=9)
    path = tmp_path / "t.rules"
    dump_ruleset(rs, path)
    rs2 = load_ruleset(path)
    assert [format_rule(r) for r in rs.rules] == [format_rule(r) for r in rs2.rules]


def test_unknown_projection_rejected_at_validation():
    with pytest.raises(RuleError):
        rule(0, 1, action=Action(("m0",), frozenset({"bogus"})))


def test_duplicate_rule_ids_rejected():
    with pytest.raises(RuleError):
        RuleSet([rule(0, 1), rule(0, 2, proto=Exact(6))])


# --------------------------------------------------------------------------
# classify_linear
# --------------------------------------------------------------------------

def test_all_wildcard_rule_matches_everything():
    rs = RuleSet([rule(0, 1)])
    for k in (key(), key(sip=2**32 - 1, proto=255), key(dp=65535)):
        assert classify_linear(rs, k).rule_id == 0


def test_higher_priority_wins():
    rs = RuleSet([rule(1, 10, src_ip=Prefix(10 << 24, 8)), rule(2, 20)])
    m = classify_linear(rs, key(sip=(10 << 24) + 5))
    assert m.rule_id == 2  # wildcard rule has higher priority


def test_empty_ruleset_matches_nothing():
    rs = RuleSet([])
    assert classify_linear(rs, key()) is None


def test_equal_priority_breaks_to_lowest_rule_id():
    rs = RuleSet([rule(7, 5), rule(3, 5, proto=W, src_port=Range(0, 70000 - 5000))])
    m = classify_linear(rs, key())
    assert m.rule_id == 3


def test_arity_mismatch_rejected():
    rs = RuleSet([rule(0, 1)])
    with pytest.raises(RuleError):
        classify_linear(rs, (1, 2, 3))


def test_batch_linear_agrees_with_scalar():
    rs = gen_acl_ruleset(150, seed=4)
    keys = gen_keys(rs, 800, seed=5)
    got = classify_linear_batch(rs, keys)
    for i in range(0, len(keys), 37):
        m = classify_linear(rs, tuple(int(v) for v in keys[i]))
        assert (m.rule_id if m else -1) == got[i]


def test_build_monotonicity_low_priority_addition_is_invisible():
    rs = gen_acl_ruleset(80, seed=11)
    keys = gen_keys(rs, 300, seed=12)
    base = classify_linear_batch(rs, keys)
    extra = rule(2000, 0)  # below every existing priority, matches everything
    rs2 = RuleSet([*rs.rules, extra])
    got = classify_linear_batch(rs2, keys)
    changed = got != base
    # only keys that previously matched nothing may now match the new rule
    assert np.all(base[changed] == -1)
    assert np.all(got[changed] == 2000)


def test_priority_permutation_invariance():
    rs = gen_acl_ruleset(60, seed=21)
    keys = gen_keys(rs, 300, seed=22)
    base = classify_linear_batch(rs, keys)
    perm = list(rs.rules)[::-1]
    got = classify_linear_batch(RuleSet(perm), keys)
    assert np.array_equal(base, got)


# --------------------------------------------------------------------------
# report keys
# --------------------------------------------------------------------------

def make_report(drop=None):
    flow = FlowKey(1, 2, 3, 4, 6)
    hops = (
        HopMetadata("s1", 0, 1, 0, 5, 100, 0.1, 10),
        HopMetadata("s2", 1, 2, 3, 9, 200, 0.2, 20),
    )
    return IntReport(flow=flow, seq=0, hops=hops, pkt_size_bytes=64, drop=drop)


def test_key_from_report_uses_last_hop():
    k = key_from_report(make_report())
    assert k == (1, 2, 3, 4, 6, 2, 2, 3, 0)


def test_key_from_report_uses_drop_hop_and_reason():
    r = make_report(drop=DropInfo(0, DropReason.AclDeny))
    k = key_from_report(r)
    assert k == (1, 2, 3, 4, 6, 1, 1, 0, 2)


# --------------------------------------------------------------------------
# dispatch / projection
# --------------------------------------------------------------------------

def test_dispatch_replicates_and_projects():
    act = Action(("m1", "m2"), frozenset({"hop_latency", "queue_depth"}))
    rs = RuleSet([rule(0, 1, action=act)])
    r = make_report()
    m = classify_linear(rs, key_from_report(r))
    out = dispatch(r, m)
    assert [dest for dest, _ in out] == ["m1", "m2"]
    proj = out[0][1]
    assert proj.flow == r.flow
    assert [h.hop_latency_ns for h in proj.report.hops] == [100, 200]
    assert all(h.link_utilization == 0.0 for h in proj.report.hops)
    assert proj.report.pkt_size_bytes == 0


def test_dispatch_no_match_is_empty():
    assert dispatch(make_report(), None) == []


def test_projection_unknown_field_rejected():
    with pytest.raises(RuleError):
        project_report(make_report(), frozenset({"nope"}))


def test_full_projection_is_identity():
    r = make_report()
    proj = project_report(r, None)
    assert proj.report == r


# --------------------------------------------------------------------------
# sharding
# --------------------------------------------------------------------------

def test_shard_identity_and_replicate():
    rs = gen_acl_ruleset(40, seed=31)
    (only,) = shard_ruleset(rs, 1, ShardMode.PartitionByHash)
    assert [r.rule_id for r in only.rules] == [r.rule_id for r in rs.rules]
    reps = shard_ruleset(rs, 4, ShardMode.Replicate)
    assert len(reps) == 4
    assert all(len(s) == len(rs) for s in reps)


def test_shard_zero_rejected():
    with pytest.raises(RuleError):
        shard_ruleset(gen_acl_ruleset(5, seed=1), 0, ShardMode.Replicate)


def test_partition_by_hash_oracle_equivalence():
    rs = gen_acl_ruleset(120, seed=41)
    shards = shard_ruleset(rs, 8, ShardMode.PartitionByHash)
    keys = gen_keys(rs, 400, seed=42)
    for i in range(len(keys)):
        k = tuple(int(v) for v in keys[i])
        want = classify_linear(rs, k)
        # union across shards
        union = classify_sharded(shards, k)
        assert (union.rule_id if union else None) == (want.rule_id if want else None)
        # and the single hashed shard already holds every needed rule
        local = classify_linear(shards[shard_for_key(k, 8)], k)
        assert (local.rule_id if local else None) == (want.rule_id if want else None)
