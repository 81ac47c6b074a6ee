"""Prioritized multi-field rulesets over telemetry report keys.

The classification schema is nine unsigned fields: the 5-tuple plus
switch id, link id, queue id, and drop reason. Every matcher reduces to
an inclusive integer interval, which is what both the linear-scan
reference classifier and the tree engine operate on.
"""

from __future__ import annotations

import hashlib
import re
import zlib
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .telemetry import DropReason, FlowKey, HopMetadata, IntReport


class RuleError(Exception):
    pass


class RuleParseError(RuleError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class FieldDef(NamedTuple):
    name: str
    bits: int


DEFAULT_SCHEMA: tuple[FieldDef, ...] = (
    FieldDef("src_ip", 32),
    FieldDef("dst_ip", 32),
    FieldDef("src_port", 16),
    FieldDef("dst_port", 16),
    FieldDef("proto", 8),
    FieldDef("switch_id", 32),
    FieldDef("link_id", 32),
    FieldDef("queue_id", 16),
    FieldDef("drop_reason", 8),
)

# drop_reason field encoding; 0 means "packet was not dropped".
DROP_REASON_NONE = 0
DROP_REASON_CODE: dict[DropReason, int] = {
    DropReason.QueueOverflow: 1,
    DropReason.AclDeny: 2,
    DropReason.TtlExpired: 3,
    DropReason.Other: 4,
}

PROJECTION_FIELDS = frozenset(
    {
        "switch_id", "ingress_port", "egress_port", "queue_id", "queue_depth",
        "hop_latency", "link_utilization", "timestamp",
        "pkt_size_bytes", "drop", "seq",
    }
)


# --------------------------------------------------------------------------
# Matchers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Wildcard:
    def interval(self, bits: int) -> tuple[int, int]:
        return 0, (1 << bits) - 1


@dataclass(frozen=True)
class Exact:
    value: int

    def interval(self, bits: int) -> tuple[int, int]:
        if not 0 <= self.value < (1 << bits):
            raise RuleError(f"value {self.value} out of {bits}-bit field")
        return self.value, self.value


@dataclass(frozen=True)
class Prefix:
    value: int
    prefix_len: int

    def interval(self, bits: int) -> tuple[int, int]:
        if not 0 <= self.prefix_len <= bits:
            raise RuleError(f"prefix length {self.prefix_len} exceeds {bits}-bit field")
        span = bits - self.prefix_len
        lo = (self.value >> span) << span
        return lo, lo + (1 << span) - 1


@dataclass(frozen=True)
class Range:
    lo: int
    hi: int

    def __post_init__(self) -> None:
        if self.lo > self.hi:
            raise RuleError(f"range lo {self.lo} > hi {self.hi}")

    def interval(self, bits: int) -> tuple[int, int]:
        return self.lo, self.hi


FieldMatcher = Wildcard | Exact | Prefix | Range


@dataclass(frozen=True)
class Action:
    destinations: tuple[str, ...] = ("m0",)
    projection: frozenset[str] | None = None  # None = full projection

    def __post_init__(self) -> None:
        if not self.destinations:
            raise RuleError("action with no destinations")
        if self.projection is not None:
            unknown = self.projection - PROJECTION_FIELDS
            if unknown:
                raise RuleError(f"unknown projection fields: {sorted(unknown)}")


@dataclass(frozen=True)
class Rule:
    rule_id: int
    priority: int
    matchers: tuple[FieldMatcher, ...]
    action: Action = Action()

    def __post_init__(self) -> None:
        if self.priority < 0:
            raise RuleError(f"rule {self.rule_id}: negative priority")

    def intervals(self, schema: Sequence[FieldDef]) -> tuple[tuple[int, int], ...]:
        if len(self.matchers) != len(schema):
            raise RuleError(
                f"rule {self.rule_id}: arity {len(self.matchers)} != schema {len(schema)}"
            )
        return tuple(m.interval(fd.bits) for m, fd in zip(self.matchers, schema))


@dataclass(frozen=True)
class MatchResult:
    rule_id: int
    priority: int
    action: Action


class RuleSet:
    def __init__(self, rules: Iterable[Rule], schema: Sequence[FieldDef] = DEFAULT_SCHEMA):
        self.schema = tuple(schema)
        self.rules = tuple(rules)
        seen_ids: set[int] = set()
        seen_vectors: set[tuple] = set()
        for r in self.rules:
            if r.rule_id in seen_ids:
                raise RuleError(f"duplicate rule_id {r.rule_id}")
            if not 0 <= r.rule_id < (1 << 21) or r.priority >= (1 << 41):
                raise RuleError(f"rule_id/priority out of packable range: {r.rule_id}")
            seen_ids.add(r.rule_id)
            vec = (r.priority, r.matchers)
            if vec in seen_vectors:
                raise RuleError(
                    f"rule {r.rule_id}: duplicate (priority, matchers) vector"
                )
            seen_vectors.add(vec)
            r.intervals(self.schema)  # validates widths and arity
        self._arrays: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.rules)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(lo, hi, score, rule_id) arrays; score orders by (priority, -rule_id)."""
        if self._arrays is None:
            n = len(self.rules)
            k = len(self.schema)
            lo = np.zeros((n, k), dtype=np.int64)
            hi = np.zeros((n, k), dtype=np.int64)
            for i, r in enumerate(self.rules):
                for j, (a, b) in enumerate(r.intervals(self.schema)):
                    lo[i, j] = a
                    hi[i, j] = b
            ids = np.array([r.rule_id for r in self.rules], dtype=np.int64)
            prios = np.array([r.priority for r in self.rules], dtype=np.int64)
            score = prios * (1 << 21) + ((1 << 21) - 1 - ids)
            self._arrays = (lo, hi, score, ids)
        return self._arrays

    def by_id(self, rule_id: int) -> Rule:
        for r in self.rules:
            if r.rule_id == rule_id:
                return r
        raise KeyError(rule_id)


# --------------------------------------------------------------------------
# Linear-scan reference classifier (the oracle the engines are held to)
# --------------------------------------------------------------------------

def _check_key(key: Sequence[int], schema: Sequence[FieldDef]) -> None:
    if len(key) != len(schema):
        raise RuleError(f"key arity {len(key)} != schema {len(schema)}")


def classify_linear(ruleset: RuleSet, key: Sequence[int]) -> MatchResult | None:
    """Highest-priority matching rule; equal priorities break to lowest rule_id."""
    _check_key(key, ruleset.schema)
    best: Rule | None = None
    for r in ruleset.rules:
        if all(a <= v <= b for v, (a, b) in zip(key, r.intervals(ruleset.schema))):
            if best is None or (r.priority, -r.rule_id) > (best.priority, -best.rule_id):
                best = r
    if best is None:
        return None
    return MatchResult(best.rule_id, best.priority, best.action)


def classify_linear_batch(ruleset: RuleSet, keys: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Vectorized linear scan; returns matched rule_id per key, -1 for none."""
    if keys.ndim != 2 or keys.shape[1] != len(ruleset.schema):
        raise RuleError(f"keys must be (n, {len(ruleset.schema)})")
    if len(ruleset) == 0:
        return np.full(keys.shape[0], -1, dtype=np.int64)
    lo, hi, score, ids = ruleset.arrays()
    out = np.empty(keys.shape[0], dtype=np.int64)
    for start in range(0, keys.shape[0], chunk):
        kc = keys[start : start + chunk]
        match = np.ones((kc.shape[0], lo.shape[0]), dtype=bool)
        for j in range(lo.shape[1]):
            col = kc[:, j : j + 1]
            match &= col >= lo[:, j]
            match &= col <= hi[:, j]
        masked = np.where(match, score, -1)
        best = masked.argmax(axis=1)
        got = masked[np.arange(kc.shape[0]), best] >= 0
        out[start : start + chunk] = np.where(got, ids[best], -1)
    return out


# --------------------------------------------------------------------------
# Report -> classification key
# --------------------------------------------------------------------------

def switch_num(switch_id: str) -> int:
    """Stable numeric id for a switch name ("s3" -> 3; else CRC32)."""
    m = re.search(r"(\d+)$", switch_id)
    if m:
        return int(m.group(1))
    return zlib.crc32(switch_id.encode()) & 0xFFFFFFFF


def key_from_report(report: IntReport) -> tuple[int, ...]:
    """Project a report onto the 9-field schema.

    The keyed hop is the drop hop when present, else the last hop (the
    sink's view); the link id is that hop's egress port.
    """
    hop = report.hops[report.drop.hop_index] if report.drop else report.hops[-1]
    reason = DROP_REASON_CODE[report.drop.reason] if report.drop else DROP_REASON_NONE
    f = report.flow
    return (
        f.src_ip, f.dst_ip, f.src_port, f.dst_port, f.proto,
        switch_num(hop.switch_id), hop.egress_port, hop.queue_id, reason,
    )


def key_from_five_tuple(flow: FlowKey) -> tuple[int, ...]:
    return (flow.src_ip, flow.dst_ip, flow.src_port, flow.dst_port, flow.proto, 0, 0, 0, 0)


# --------------------------------------------------------------------------
# Rule file format (ClassBench-style with an optional action clause)
# --------------------------------------------------------------------------

_FLAGS_TOKEN = re.compile(r"^0x[0-9a-fA-F]+/0x[0-9a-fA-F]+$")


def _parse_int(tok: str) -> int:
    return int(tok, 16) if tok.lower().startswith("0x") else int(tok)


def _parse_ip(tok: str) -> int:
    if "." in tok:
        parts = tok.split(".")
        if len(parts) != 4 or not all(p.isdigit() and int(p) < 256 for p in parts):
            raise ValueError(f"bad IPv4 address {tok!r}")
        return (int(parts[0]) << 24) | (int(parts[1]) << 16) | (int(parts[2]) << 8) | int(parts[3])
    return _parse_int(tok)


def _parse_prefix(tok: str) -> FieldMatcher:
    ip_s, _, len_s = tok.partition("/")
    if not len_s:
        raise ValueError(f"missing prefix length in {tok!r}")
    plen = int(len_s)
    if plen == 0:
        return Wildcard()
    return Prefix(_parse_ip(ip_s), plen)


def _parse_port_range(tok: str) -> FieldMatcher:
    if ":" in tok:
        lo_s, _, hi_s = tok.partition(":")
        lo, hi = _parse_int(lo_s), _parse_int(hi_s)
        if (lo, hi) == (0, 65535):
            return Wildcard()
        return Range(lo, hi)
    return Exact(_parse_int(tok))


def _parse_proto(tok: str) -> FieldMatcher:
    val_s, _, mask_s = tok.partition("/")
    if not mask_s:
        return Exact(_parse_int(val_s))
    val, mask = _parse_int(val_s), _parse_int(mask_s)
    if mask == 0:
        return Wildcard()
    if mask == 0xFF:
        return Exact(val)
    raise ValueError(f"unsupported protocol mask {mask_s!r} (use 0x00 or 0xFF)")


def _parse_extra(tok: str, name: str) -> FieldMatcher:
    if tok == "*":
        return Wildcard()
    if name == "drop_reason" and not tok.lstrip("-").isdigit() and not tok.lower().startswith("0x"):
        try:
            return Exact(DROP_REASON_CODE[DropReason(tok)])
        except ValueError:
            raise ValueError(f"unknown drop reason {tok!r}") from None
    return Exact(_parse_int(tok))


_ACTION_RE = re.compile(r"^([\w\-.]+(?:,[\w\-.]+)*)(?:\s*\{([^}]*)\})?$")


def _parse_action(text: str) -> Action:
    m = _ACTION_RE.match(text.strip())
    if m is None:
        raise ValueError(f"malformed action clause {text.strip()!r}")
    dests = tuple(d.strip() for d in m.group(1).split(","))
    proj = None
    if m.group(2) is not None:
        names = [p.strip() for p in m.group(2).split(",") if p.strip()]
        if not names:
            raise ValueError("empty projection set")
        proj = frozenset(names)
    return Action(dests, proj)


def parse_rule_line(line: str, line_no: int, rule_id: int, priority: int,
                    schema: Sequence[FieldDef] = DEFAULT_SCHEMA) -> Rule:
    body, sep, action_s = line.partition("->")
    body = re.sub(r"\s*:\s*", ":", body.strip())
    if not body.startswith("@"):
        raise RuleParseError(line_no, "rule line must start with '@'")
    toks = body[1:].split()
    if len(toks) < 5:
        raise RuleParseError(line_no, f"expected at least 5 fields, got {len(toks)}")
    try:
        matchers: list[FieldMatcher] = [
            _parse_prefix(toks[0]),
            _parse_prefix(toks[1]),
            _parse_port_range(toks[2]),
            _parse_port_range(toks[3]),
            _parse_proto(toks[4]),
        ]
        rest = toks[5:]
        if rest and _FLAGS_TOKEN.match(rest[-1]) and len(rest) in (1, 5):
            rest = rest[:-1]  # tolerate a trailing ClassBench flags column
        if len(rest) == 0:
            matchers += [Wildcard()] * 4
        elif len(rest) == 4:
            for tok, fd in zip(rest, schema[5:]):
                matchers.append(_parse_extra(tok, fd.name))
        else:
            raise ValueError(f"expected 0 or 4 extra field tokens, got {len(rest)}")
        action = _parse_action(action_s) if sep else Action()
        rule = Rule(rule_id=rule_id, priority=priority, matchers=tuple(matchers), action=action)
        rule.intervals(schema)
        return rule
    except (ValueError, RuleError) as e:
        raise RuleParseError(line_no, str(e)) from None


def parse_ruleset(text: str, schema: Sequence[FieldDef] = DEFAULT_SCHEMA) -> RuleSet:
    """Parse a rule file; earlier lines win (priority = N - line_index)."""
    raw = [
        (i, line) for i, line in enumerate(text.splitlines(), start=1)
        if line.strip() and not line.lstrip().startswith("#")
    ]
    n = len(raw)
    rules = [
        parse_rule_line(line, line_no, rule_id=idx, priority=n - idx, schema=schema)
        for idx, (line_no, line) in enumerate(raw)
    ]
    return RuleSet(rules, schema)


def load_ruleset(path, schema: Sequence[FieldDef] = DEFAULT_SCHEMA) -> RuleSet:
    with open(path, "r", encoding="utf-8") as f:
        return parse_ruleset(f.read(), schema)


def _format_matcher(m: FieldMatcher, fd: FieldDef) -> str:
    if fd.name in ("src_ip", "dst_ip"):
        if isinstance(m, Wildcard):
            return "0.0.0.0/0"
        if isinstance(m, Prefix):
            v = m.interval(fd.bits)[0]
            return f"{v >> 24}.{(v >> 16) & 255}.{(v >> 8) & 255}.{v & 255}/{m.prefix_len}"
        raise RuleError(f"{fd.name} must be a prefix or wildcard in the file format")
    if fd.name in ("src_port", "dst_port"):
        lo, hi = m.interval(fd.bits)
        return f"{lo}:{hi}"
    if fd.name == "proto":
        if isinstance(m, Wildcard):
            return "0x00/0x00"
        lo, hi = m.interval(fd.bits)
        if lo != hi:
            raise RuleError("proto must be exact or wildcard in the file format")
        return f"0x{lo:02x}/0xFF"
    if isinstance(m, Wildcard):
        return "*"
    lo, hi = m.interval(fd.bits)
    if lo != hi:
        raise RuleError(f"{fd.name} must be exact or wildcard in the file format")
    return str(lo)


def format_rule(rule: Rule, schema: Sequence[FieldDef] = DEFAULT_SCHEMA) -> str:
    fields = " ".join(_format_matcher(m, fd) for m, fd in zip(rule.matchers, schema))
    line = f"@{fields}"
    act = rule.action
    if act != Action():
        line += f" -> {','.join(act.destinations)}"
        if act.projection is not None:
            line += " {" + ",".join(sorted(act.projection)) + "}"
    return line


def dump_ruleset(ruleset: RuleSet, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in ruleset.rules:
            f.write(format_rule(r, ruleset.schema) + "\n")


# --------------------------------------------------------------------------
# Dispatch (projection + replication to monitor destinations)
# --------------------------------------------------------------------------

_MASKED_HOP_DEFAULTS = {
    "switch_id": "-", "ingress_port": 0, "egress_port": 0, "queue_id": 0,
    "queue_depth": 0, "hop_latency_ns": 0, "link_utilization": 0.0, "timestamp_ns": 0,
}
_HOP_FIELD_BY_NAME = {
    "switch_id": "switch_id", "ingress_port": "ingress_port", "egress_port": "egress_port",
    "queue_id": "queue_id", "queue_depth": "queue_depth", "hop_latency": "hop_latency_ns",
    "link_utilization": "link_utilization", "timestamp": "timestamp_ns",
}


@dataclass(frozen=True)
class ProjectedReport:
    """Report as seen by a monitor: masked copy plus the set of live fields."""

    present: frozenset[str]
    report: IntReport

    @property
    def flow(self) -> FlowKey:
        return self.report.flow

    @property
    def seq(self) -> int:
        return self.report.seq


def project_report(report: IntReport, projection: frozenset[str] | None) -> ProjectedReport:
    if projection is None:
        return ProjectedReport(PROJECTION_FIELDS, report)
    unknown = projection - PROJECTION_FIELDS
    if unknown:
        raise RuleError(f"unknown projection fields: {sorted(unknown)}")
    hops = []
    for h in report.hops:
        kw = {}
        for name, attr in _HOP_FIELD_BY_NAME.items():
            kw[attr] = getattr(h, attr) if name in projection else _MASKED_HOP_DEFAULTS[attr]
        hops.append(HopMetadata(**kw))
    masked = IntReport(
        flow=report.flow,
        seq=report.seq,
        hops=tuple(hops),
        pkt_size_bytes=report.pkt_size_bytes if "pkt_size_bytes" in projection else 0,
        drop=report.drop if "drop" in projection else None,
    )
    return ProjectedReport(frozenset(projection), masked)


def dispatch(report: IntReport, match_result: MatchResult | None) -> list[tuple[str, ProjectedReport]]:
    """Replicate the projected report to every destination of the matched rule."""
    if match_result is None:
        return []
    projected = project_report(report, match_result.action.projection)
    return [(dest, projected) for dest in match_result.action.destinations]


# --------------------------------------------------------------------------
# Sharding
# --------------------------------------------------------------------------

class ShardMode(Enum):
    Replicate = "replicate"
    PartitionByHash = "partition_by_hash"


_SHARD_FIELD = 0          # src_ip
_SHARD_PREFIX_BITS = 8    # hash on the top byte so /8-or-longer rules land on one shard


def _stable_shard(top_byte: int, n: int) -> int:
    digest = hashlib.sha256(bytes([top_byte])).digest()
    return int.from_bytes(digest[:4], "big") % n


def shard_for_key(key: Sequence[int], n: int) -> int:
    return _stable_shard((key[_SHARD_FIELD] >> 24) & 0xFF, n)


def shard_ruleset(ruleset: RuleSet, n: int, mode: ShardMode) -> list[RuleSet]:
    """Split or replicate a ruleset across n shards.

    PartitionByHash places each rule on every shard that some key inside
    its src_ip interval can hash to, so per-key shard lookup plus
    max-priority merge reproduces the unsharded result.
    """
    if n < 1:
        raise RuleError("shard count must be >= 1")
    if n == 1 or mode is ShardMode.Replicate:
        return [RuleSet(ruleset.rules, ruleset.schema) for _ in range(n)]
    buckets: list[list[Rule]] = [[] for _ in range(n)]
    bits = ruleset.schema[_SHARD_FIELD].bits
    for r in ruleset.rules:
        lo, hi = r.matchers[_SHARD_FIELD].interval(bits)
        tb_lo, tb_hi = lo >> 24, hi >> 24
        if tb_hi - tb_lo + 1 >= 256:
            targets = range(n)
        else:
            targets = sorted({_stable_shard(b, n) for b in range(tb_lo, tb_hi + 1)})
        for t in targets:
            buckets[t].append(r)
    return [RuleSet(b, ruleset.schema) for b in buckets]


def classify_sharded(shards: list[RuleSet], key: Sequence[int]) -> MatchResult | None:
    """Reference merge: best match across all shard results."""
    best: MatchResult | None = None
    for rs in shards:
        m = classify_linear(rs, key)
        if m and (best is None or (m.priority, -m.rule_id) > (best.priority, -best.rule_id)):
            best = m
    return best
