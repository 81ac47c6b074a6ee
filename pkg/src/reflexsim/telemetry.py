"""INT telemetry data model: reports, sink extraction, dedup, trace files.

A report is one packet's worth of per-hop switch metadata plus optional
drop information. The line-oriented trace format here is the on-disk
fixture/replay format for the rest of the pipeline.
"""

from __future__ import annotations

import enum
import re
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from .simnet import Nanos


class TelemetryError(Exception):
    pass


class EmptyPath(TelemetryError):
    """A packet or report with zero hop records."""


class TraceParseError(TelemetryError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DropReason(enum.Enum):
    QueueOverflow = "QueueOverflow"
    AclDeny = "AclDeny"
    TtlExpired = "TtlExpired"
    Other = "Other"


@dataclass(frozen=True, order=True)
class FlowKey:
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    proto: int

    def __str__(self) -> str:
        return f"{self.src_ip}:{self.src_port}-{self.dst_ip}:{self.dst_port}/{self.proto}"


@dataclass(frozen=True, order=True)
class HopMetadata:
    switch_id: str
    ingress_port: int
    egress_port: int
    queue_id: int
    queue_depth: int
    hop_latency_ns: Nanos
    link_utilization: float
    timestamp_ns: Nanos

    def __post_init__(self) -> None:
        if self.hop_latency_ns < 0:
            raise TelemetryError(f"negative hop latency: {self.hop_latency_ns}")
        if not 0.0 <= self.link_utilization <= 1.0:
            raise TelemetryError(f"utilization out of [0,1]: {self.link_utilization}")


@dataclass(frozen=True)
class DropInfo:
    hop_index: int
    reason: DropReason


@dataclass(frozen=True)
class IntReport:
    flow: FlowKey
    seq: int
    hops: tuple[HopMetadata, ...]
    pkt_size_bytes: int = 0
    drop: DropInfo | None = None

    def __post_init__(self) -> None:
        if not self.hops:
            raise EmptyPath("report with no hops")
        for a, b in zip(self.hops, self.hops[1:]):
            if b.timestamp_ns < a.timestamp_ns:
                raise TelemetryError("hop timestamps must be non-decreasing")
        if self.drop is not None and not 0 <= self.drop.hop_index < len(self.hops):
            raise TelemetryError(f"drop hop_index {self.drop.hop_index} out of range")


@dataclass
class ReportStreamStats:
    reports_in: int = 0
    duplicates_removed: int = 0
    coalesced: int = 0
    reports_out: int = 0


@dataclass(frozen=True)
class PayloadDescriptor:
    flow: FlowKey
    size_bytes: int


def sink_extract(packet_with_int: "IntReport") -> tuple[PayloadDescriptor, IntReport]:
    """Split a received INT-bearing packet into its payload descriptor and report.

    The packet model already carries parsed hop records; extraction checks
    them and peels the payload identity off for onward delivery.
    """
    if not packet_with_int.hops:
        raise EmptyPath("packet carries no hop records")
    return PayloadDescriptor(packet_with_int.flow, packet_with_int.pkt_size_bytes), packet_with_int


def path_latency(report: IntReport) -> Nanos:
    return sum(h.hop_latency_ns for h in report.hops)


def make_drop_report(
    flow: FlowKey,
    hops_so_far: Sequence[HopMetadata],
    reason: DropReason,
    seq: int = 0,
    pkt_size_bytes: int = 0,
) -> IntReport:
    if not hops_so_far:
        raise EmptyPath("drop report requires at least one hop")
    return IntReport(
        flow=flow,
        seq=seq,
        hops=tuple(hops_so_far),
        pkt_size_bytes=pkt_size_bytes,
        drop=DropInfo(len(hops_so_far) - 1, reason),
    )


def report_rate_for_link(line_rate_bits_per_s: int, pkt_size_bytes: int) -> int:
    """Reports per second for a line rate fully occupied by equal-size packets."""
    if line_rate_bits_per_s <= 0:
        raise ValueError("line rate must be positive")
    if pkt_size_bytes <= 0:
        raise ValueError("packet size must be positive")
    return int(line_rate_bits_per_s) // (pkt_size_bytes * 8)


# --------------------------------------------------------------------------
# Duplicate handling
# --------------------------------------------------------------------------

def _merged_hops(a: IntReport, b: IntReport) -> tuple[HopMetadata, ...]:
    union = set(a.hops) | set(b.hops)
    return tuple(sorted(union, key=lambda h: (h.timestamp_ns, h.switch_id, h)))


class DedupWindow:
    """Sliding window over the last `window` first-seen (flow, seq) keys.

    Eviction is strictly insertion-ordered (no refresh on duplicate hits);
    refreshing would make a second dedup pass see different window contents
    than the first, breaking idempotence.
    """

    def __init__(self, window: int = 1024):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self._recent: OrderedDict[tuple[FlowKey, int], int] = OrderedDict()
        self.stats = ReportStreamStats()

    def push(self, report: IntReport, out: list[IntReport]) -> None:
        self.stats.reports_in += 1
        key = (report.flow, report.seq)
        idx = self._recent.get(key)
        if idx is None:
            self._recent[key] = len(out)
            if len(self._recent) > self.window:
                self._recent.popitem(last=False)
            out.append(report)
            self.stats.reports_out += 1
            return
        prior = out[idx]
        if prior == report:
            self.stats.duplicates_removed += 1
            return
        merged = _merged_hops(prior, report)
        out[idx] = IntReport(
            flow=prior.flow,
            seq=prior.seq,
            hops=merged,
            pkt_size_bytes=prior.pkt_size_bytes,
            drop=prior.drop or report.drop,
        )
        self.stats.coalesced += 1


def dedup_coalesce(
    reports: Iterable[IntReport], window: int = 1024
) -> tuple[list[IntReport], ReportStreamStats]:
    """Remove exact duplicates and merge same-key reports with differing hops.

    Duplicate identity is (flow, seq) within a sliding LRU window of recent
    keys. Coalescing takes the union of hop sets ordered by timestamp; output
    order preserves first arrival.
    """
    dw = DedupWindow(window)
    out: list[IntReport] = []
    for r in reports:
        dw.push(r, out)
    return out, dw.stats


# --------------------------------------------------------------------------
# Trace file format
# --------------------------------------------------------------------------
#   INT flow=<sip>:<sport>-<dip>:<dport>/<proto> seq=<n> size=<bytes> \
#       hops=[swid:inport:outport:qid:qdepth:hoplat:util:ts;...] drop=<idx>:<reason>|-
# Integers are decimal; util is fixed-point with 4 decimals.

_LINE_RE = re.compile(
    r"^INT flow=(\d+):(\d+)-(\d+):(\d+)/(\d+) seq=(\d+) size=(\d+) "
    r"hops=\[([^\]]*)\] drop=(.+)$"
)
_HOP_RE = re.compile(
    r"^([^:;]+):(\d+):(\d+):(\d+):(\d+):(\d+):(\d+\.\d{4}):(\d+)$"
)


def format_report(report: IntReport) -> str:
    hops = ";".join(
        f"{h.switch_id}:{h.ingress_port}:{h.egress_port}:{h.queue_id}:"
        f"{h.queue_depth}:{h.hop_latency_ns}:{h.link_utilization:.4f}:{h.timestamp_ns}"
        for h in report.hops
    )
    drop = "-" if report.drop is None else f"{report.drop.hop_index}:{report.drop.reason.value}"
    return (
        f"INT flow={report.flow.src_ip}:{report.flow.src_port}"
        f"-{report.flow.dst_ip}:{report.flow.dst_port}/{report.flow.proto} "
        f"seq={report.seq} size={report.pkt_size_bytes} hops=[{hops}] drop={drop}"
    )


def parse_report_line(line: str, line_no: int = 0) -> IntReport:
    m = _LINE_RE.match(line.strip())
    if m is None:
        raise TraceParseError(line_no, f"malformed report line: {line.strip()[:80]!r}")
    sip, sport, dip, dport, proto, seq, size, hops_s, drop_s = m.groups()
    hops = []
    for part in hops_s.split(";"):
        hm = _HOP_RE.match(part)
        if hm is None:
            raise TraceParseError(line_no, f"malformed hop record {part!r}")
        swid, inp, outp, qid, qd, lat, util, ts = hm.groups()
        hops.append(
            HopMetadata(swid, int(inp), int(outp), int(qid), int(qd), int(lat), float(util), int(ts))
        )
    if not hops:
        raise TraceParseError(line_no, "report with empty hop list")
    drop = None
    if drop_s != "-":
        idx_s, _, reason_s = drop_s.partition(":")
        try:
            drop = DropInfo(int(idx_s), DropReason(reason_s))
        except (ValueError, KeyError):
            raise TraceParseError(line_no, f"malformed drop field {drop_s!r}") from None
    try:
        return IntReport(
            flow=FlowKey(int(sip), int(dip), int(sport), int(dport), int(proto)),
            seq=int(seq),
            hops=tuple(hops),
            pkt_size_bytes=int(size),
            drop=drop,
        )
    except TelemetryError as e:
        raise TraceParseError(line_no, str(e)) from None


def parse_trace(lines: Iterable[str]) -> Iterator[IntReport]:
    for i, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield parse_report_line(line, i)


def load_trace(path) -> list[IntReport]:
    with open(path, "r", encoding="utf-8") as f:
        return list(parse_trace(f))


def dump_trace(reports: Iterable[IntReport], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in reports:
            f.write(format_report(r) + "\n")
