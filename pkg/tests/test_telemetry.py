"""Telemetry model tests: extraction, dedup/coalesce, trace round-trip."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reflexsim.telemetry import (
    DedupWindow,
    DropInfo,
    DropReason,
    EmptyPath,
    FlowKey,
    HopMetadata,
    IntReport,
    TraceParseError,
    dedup_coalesce,
    format_report,
    make_drop_report,
    parse_report_line,
    parse_trace,
    path_latency,
    report_rate_for_link,
    sink_extract,
)

FLOW = FlowKey(0x0A000001, 0x0A000002, 1234, 80, 6)


def hop(switch="s1", lat=100, ts=0, depth=0, util=0.0, qid=0, inp=0, outp=1):
    return HopMetadata(switch, inp, outp, qid, depth, lat, util, ts)


def report(lats, flow=FLOW, seq=0, **kw):
    hops = tuple(hop(switch=f"s{i}", lat=l, ts=i * 10) for i, l in enumerate(lats))
    return IntReport(flow=flow, seq=seq, hops=hops, **kw)


# --------------------------------------------------------------------------
# extraction and path latency
# --------------------------------------------------------------------------

def test_sink_extract_preserves_hop_order():
    r = report([200, 500, 300], pkt_size_bytes=1500)
    desc, out = sink_extract(r)
    assert [h.hop_latency_ns for h in out.hops] == [200, 500, 300]
    assert path_latency(out) == 1000
    assert desc.flow == FLOW and desc.size_bytes == 1500


def test_single_hop_report_valid():
    r = report([65])
    assert path_latency(r) == 65


def test_zero_hops_rejected():
    with pytest.raises(EmptyPath):
        IntReport(flow=FLOW, seq=0, hops=())


def test_path_latency_all_zero():
    assert path_latency(report([0, 0, 0, 0, 0])) == 0


def test_hop_timestamps_must_be_monotone():
    hops = (hop(ts=10), hop(switch="s2", ts=5))
    with pytest.raises(Exception):
        IntReport(flow=FLOW, seq=0, hops=hops)


# --------------------------------------------------------------------------
# drop reports
# --------------------------------------------------------------------------

def test_drop_report_indexes_last_hop():
    hops = [hop(switch="s0", ts=0), hop(switch="s1", ts=1), hop(switch="s2", ts=2)]
    r = make_drop_report(FLOW, hops, DropReason.QueueOverflow)
    assert r.drop == DropInfo(2, DropReason.QueueOverflow)


def test_drop_at_first_hop():
    r = make_drop_report(FLOW, [hop()], DropReason.AclDeny)
    assert r.drop.hop_index == 0


def test_drop_report_empty_hops_rejected():
    with pytest.raises(EmptyPath):
        make_drop_report(FLOW, [], DropReason.Other)


# --------------------------------------------------------------------------
# report rate arithmetic
# --------------------------------------------------------------------------

def test_report_rate_100g_1500b():
    assert report_rate_for_link(100_000_000_000, 1500) == 8_333_333


def test_report_rate_200g_1500b():
    # Independent check: 200e9 / (1500*8) = 16,666,666.67 -> floor.
    assert report_rate_for_link(200_000_000_000, 1500) == 16_666_666


def test_report_rate_zero_size_rejected():
    with pytest.raises(ValueError):
        report_rate_for_link(100_000_000_000, 0)


# --------------------------------------------------------------------------
# dedup / coalesce
# --------------------------------------------------------------------------

def test_exact_duplicate_removed():
    r = report([100, 200], seq=7)
    out, stats = dedup_coalesce([r, r], window=16)
    assert out == [r]
    assert stats.duplicates_removed == 1
    assert stats.reports_out == 1


def test_differing_hop_sets_coalesced_to_union():
    a, b, c = hop("sA", ts=0), hop("sB", ts=10), hop("sC", ts=20)
    r1 = IntReport(flow=FLOW, seq=7, hops=(a, b))
    r2 = IntReport(flow=FLOW, seq=7, hops=(b, c))
    out, stats = dedup_coalesce([r1, r2], window=16)
    # Oracle: union of the two hop sets, ordered by timestamp.
    assert len(out) == 1
    assert out[0].hops == (a, b, c)
    assert stats.coalesced == 1


def test_distinct_seqs_pass_through():
    rs = [report([100], seq=i) for i in range(1, 101)]
    out, stats = dedup_coalesce(rs, window=16)
    assert out == rs
    assert stats.duplicates_removed == stats.coalesced == 0
    assert stats.reports_out == 100


def test_window_eviction_forgets_old_keys():
    r = report([100], seq=1)
    fillers = [report([100], seq=100 + i) for i in range(4)]
    out, stats = dedup_coalesce([r, *fillers, r], window=2)
    # seq=1 evicted by the fillers, so its reappearance is emitted again.
    assert stats.duplicates_removed == 0
    assert len(out) == 6


def test_dedup_window_validates():
    with pytest.raises(ValueError):
        DedupWindow(0)


@st.composite
def dup_streams(draw):
    n_flows = draw(st.integers(1, 4))
    flows = [FlowKey(i, i + 100, 1, 2, 6) for i in range(n_flows)]
    stream = []
    for _ in range(draw(st.integers(0, 40))):
        flow = draw(st.sampled_from(flows))
        seq = draw(st.integers(0, 5))
        lats = draw(st.lists(st.integers(0, 500), min_size=1, max_size=3))
        stream.append(report(lats, flow=flow, seq=seq))
    return stream


@given(dup_streams(), st.integers(1, 64))
@settings(max_examples=120, deadline=None)
def test_dedup_conservation_and_idempotence(stream, window):
    out, stats = dedup_coalesce(stream, window)
    assert stats.reports_in == len(stream)
    assert stats.reports_out == len(out)
    assert stats.reports_out == stats.reports_in - stats.duplicates_removed - stats.coalesced
    # Idempotence: a second pass with the same window changes nothing.
    out2, stats2 = dedup_coalesce(out, window)
    assert out2 == out
    assert stats2.duplicates_removed == 0


# --------------------------------------------------------------------------
# trace format
# --------------------------------------------------------------------------

def test_format_example_line():
    r = IntReport(
        flow=FLOW,
        seq=7,
        hops=(hop("s1", lat=200, ts=5, util=0.5),),
        pkt_size_bytes=1500,
        drop=DropInfo(0, DropReason.QueueOverflow),
    )
    line = format_report(r)
    assert line == (
        "INT flow=167772161:1234-167772162:80/6 seq=7 size=1500 "
        "hops=[s1:0:1:0:0:200:0.5000:5] drop=0:QueueOverflow"
    )
    assert parse_report_line(line) == r


def test_parse_rejects_malformed_with_line_number():
    with pytest.raises(TraceParseError) as exc:
        list(parse_trace(["INT flow=1:2-3:4/5 seq=0 size=0 hops=[] drop=-", ""]))
    assert "line 1" in str(exc.value)


def test_parse_rejects_bad_drop_reason():
    line = "INT flow=1:2-3:4/6 seq=0 size=0 hops=[s1:0:1:0:0:5:0.0000:0] drop=0:Nope"
    with pytest.raises(TraceParseError):
        parse_report_line(line, 3)


def test_parse_skips_comments_and_blanks():
    line = format_report(report([10]))
    out = list(parse_trace(["# header", "", line]))
    assert len(out) == 1


@st.composite
def arbitrary_reports(draw):
    n_hops = draw(st.integers(1, 5))
    ts = 0
    hops = []
    for i in range(n_hops):
        ts += draw(st.integers(0, 1000))
        hops.append(
            HopMetadata(
                switch_id=f"sw{draw(st.integers(0, 30))}",
                ingress_port=draw(st.integers(0, 64)),
                egress_port=draw(st.integers(0, 64)),
                queue_id=draw(st.integers(0, 7)),
                queue_depth=draw(st.integers(0, 4096)),
                hop_latency_ns=draw(st.integers(0, 10**7)),
                link_utilization=draw(st.integers(0, 10_000)) / 10_000,
                timestamp_ns=ts,
            )
        )
    drop = None
    if draw(st.booleans()):
        drop = DropInfo(draw(st.integers(0, n_hops - 1)), draw(st.sampled_from(list(DropReason))))
    return IntReport(
        flow=FlowKey(
            draw(st.integers(0, 2**32 - 1)),
            draw(st.integers(0, 2**32 - 1)),
            draw(st.integers(0, 2**16 - 1)),
            draw(st.integers(0, 2**16 - 1)),
            draw(st.integers(0, 255)),
        ),
        seq=draw(st.integers(0, 2**31)),
        hops=tuple(hops),
        pkt_size_bytes=draw(st.integers(0, 9000)),
        drop=drop,
    )


@given(arbitrary_reports())
@settings(max_examples=150, deadline=None)
def test_trace_round_trip(r):
    assert parse_report_line(format_report(r)) == r


@given(arbitrary_reports())
@settings(max_examples=60, deadline=None)
def test_path_latency_stable_under_reserialization(r):
    brute = sum(h.hop_latency_ns for h in r.hops)
    assert path_latency(r) == brute
    assert path_latency(parse_report_line(format_report(r))) == brute
