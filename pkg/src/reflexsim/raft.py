"""Raft consensus core driving a replicated per-element state machine.

The protocol state machine here is transport-agnostic: `handle` and `tick`
consume messages/time and return outbound (destination, message) pairs.
Log entries carry either 16B-key/64B-value writes, reflex commands, control
commands, or no-ops. Applying a reflex or control command on the leader
additionally emits a switch-update message toward the target element, sent
before the client reply for the same entry.

Crash recovery keeps the persistent triple (term, vote, log) and rebuilds
everything else, replaying the state machine from the start of the log.
Switch updates are therefore at-least-once across leader failover.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

from .monitors import CommandBody, ReflexCommand, Reroute, SetParam, Throttle, UpdateRule
from .rng import uniform_int
from .simnet import Nanos
from .telemetry import FlowKey

KV_ELEMENT = "kv-store"
KEY_BYTES = 16
VALUE_BYTES = 64
DEDUP_PER_CLIENT = 1 << 16

Addr = str
Outbound = list[tuple[Addr, Any]]


class Role(Enum):
    Follower = "follower"
    Candidate = "candidate"
    Leader = "leader"


# --------------------------------------------------------------------------
# Log payloads
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class KvWrite:
    key: bytes
    value: bytes

    def __post_init__(self) -> None:
        if len(self.key) != KEY_BYTES:
            raise ValueError(f"key must be {KEY_BYTES} bytes, got {len(self.key)}")
        if len(self.value) != VALUE_BYTES:
            raise ValueError(f"value must be {VALUE_BYTES} bytes, got {len(self.value)}")


@dataclass(frozen=True)
class ControlCommand:
    command_id: str
    issued_at: Nanos
    target_element: str
    body: CommandBody


@dataclass(frozen=True)
class Reflex:
    command: ReflexCommand


@dataclass(frozen=True)
class Control:
    command: ControlCommand


@dataclass(frozen=True)
class NoOp:
    pass


EntryPayload = KvWrite | Reflex | Control | NoOp


@dataclass(frozen=True)
class RaftLogEntry:
    term: int
    index: int
    payload: EntryPayload
    client: tuple[Addr, int] | None = None  # (client id, request id)


# --------------------------------------------------------------------------
# Messages
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RequestVote:
    term: int
    candidate: Addr
    last_log_index: int
    last_log_term: int


@dataclass(frozen=True)
class VoteReply:
    term: int
    granted: bool


@dataclass(frozen=True)
class AppendEntries:
    term: int
    leader: Addr
    prev_index: int
    prev_term: int
    entries: tuple[RaftLogEntry, ...]
    leader_commit: int


@dataclass(frozen=True)
class AppendReply:
    term: int
    success: bool
    match_index: int


@dataclass(frozen=True)
class ClientWrite:
    request_id: int
    payload: EntryPayload


@dataclass(frozen=True)
class ClientReply:
    request_id: int
    committed: bool
    leader_hint: Addr | None


@dataclass(frozen=True)
class SwitchUpdate:
    """Applied command forwarded from the Raft leader to the physical element."""

    command_id: str
    target_element: str
    body: CommandBody
    committed_at: Nanos = 0


RaftMessage = RequestVote | VoteReply | AppendEntries | AppendReply | ClientWrite | ClientReply


def message_size_bytes(msg: Any) -> int:
    if isinstance(msg, AppendEntries):
        return 48 + sum(_entry_size(e) for e in msg.entries)
    if isinstance(msg, ClientWrite):
        return 32 + _entry_size_payload(msg.payload)
    return 32


def _entry_size(e: RaftLogEntry) -> int:
    return 16 + _entry_size_payload(e.payload)


def _entry_size_payload(p: EntryPayload) -> int:
    if isinstance(p, KvWrite):
        return KEY_BYTES + VALUE_BYTES
    if isinstance(p, NoOp):
        return 0
    return 64


# --------------------------------------------------------------------------
# Replicated element state
# --------------------------------------------------------------------------

@dataclass
class ElementState:
    element_id: str
    kv: dict[bytes, bytes] = field(default_factory=dict)
    forwarding_table: dict[FlowKey, int] = field(default_factory=dict)
    params: dict[str, int] = field(default_factory=dict)
    tables: dict[str, list[bytes]] = field(default_factory=dict)

    def apply_body(self, body: CommandBody) -> None:
        if isinstance(body, Reroute):
            self.forwarding_table[body.flow] = body.new_egress_port
        elif isinstance(body, Throttle):
            self.params[f"throttle.{body.flow}"] = body.rate_bits_per_s
        elif isinstance(body, SetParam):
            self.params[body.name] = body.value
        elif isinstance(body, UpdateRule):
            self.tables.setdefault(body.table, []).append(body.entry)
        else:
            raise TypeError(f"unknown command body {body!r}")

    def snapshot(self) -> "ElementState":
        return ElementState(
            self.element_id,
            dict(self.kv),
            dict(self.forwarding_table),
            dict(self.params),
            {k: list(v) for k, v in self.tables.items()},
        )


def state_hash(elements: dict[str, ElementState]) -> str:
    h = hashlib.sha256()
    for eid in sorted(elements):
        el = elements[eid]
        h.update(eid.encode())
        for k in sorted(el.kv):
            h.update(k)
            h.update(el.kv[k])
        for flow in sorted(el.forwarding_table):
            h.update(str(flow).encode())
            h.update(el.forwarding_table[flow].to_bytes(4, "big"))
        for name in sorted(el.params):
            h.update(name.encode())
            h.update(el.params[name].to_bytes(8, "big", signed=True))
        for table in sorted(el.tables):
            h.update(table.encode())
            for entry in el.tables[table]:
                h.update(entry)
    return h.hexdigest()


# --------------------------------------------------------------------------
# Node
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RaftConfig:
    election_timeout_ns: tuple[int, int] = (150_000, 300_000)
    heartbeat_ns: int = 50_000


class RaftNode:
    def __init__(self, name: Addr, peers: tuple[Addr, ...], rng, config: RaftConfig = RaftConfig()):
        self.name = name
        self.peers = tuple(p for p in peers if p != name)
        self.rng = rng
        self.config = config
        # persistent
        self.current_term = 0
        self.voted_for: Addr | None = None
        self.log: list[RaftLogEntry] = []
        # volatile
        self.role = Role.Follower
        self.leader_id: Addr | None = None
        self.commit_index = 0
        self.last_applied = 0
        self.votes: set[Addr] = set()
        self.next_index: dict[Addr, int] = {}
        self.match_index: dict[Addr, int] = {}
        self.election_deadline: Nanos = self._draw_timeout(0)
        self.heartbeat_due: Nanos = 0
        # state machine
        self.elements: dict[str, ElementState] = {}
        self._applied_requests: dict[Addr, OrderedDict[int, int]] = {}
        self._in_log: dict[tuple[Addr, int], int] = {}
        # observers (safety harness hooks)
        self.on_become_leader: Callable[[int, Addr], None] | None = None
        self.on_apply: Callable[[Addr, int, str], None] | None = None

    # -- helpers -------------------------------------------------------------

    def _draw_timeout(self, now: Nanos) -> Nanos:
        lo, hi = self.config.election_timeout_ns
        return now + uniform_int(self.rng, lo, hi)

    def _majority(self) -> int:
        return (len(self.peers) + 1) // 2 + 1

    def last_log_index(self) -> int:
        return len(self.log)

    def last_log_term(self) -> int:
        return self.log[-1].term if self.log else 0

    def _entry(self, index: int) -> RaftLogEntry:
        return self.log[index - 1]

    def _step_down(self, term: int, now: Nanos) -> None:
        self.current_term = term
        self.voted_for = None
        self.role = Role.Follower
        self.votes = set()
        self.election_deadline = self._draw_timeout(now)

    # -- elections -------------------------------------------------------------

    def tick(self, now: Nanos) -> Outbound:
        out: Outbound = []
        if self.role is Role.Leader:
            if now >= self.heartbeat_due:
                out.extend(self._broadcast_append(now))
        elif now >= self.election_deadline:
            out.extend(self._start_election(now))
        return out

    def _start_election(self, now: Nanos) -> Outbound:
        self.role = Role.Candidate
        self.current_term += 1
        self.voted_for = self.name
        self.votes = {self.name}
        self.leader_id = None
        self.election_deadline = self._draw_timeout(now)
        if len(self.votes) >= self._majority():
            return self._become_leader(now)
        req = RequestVote(self.current_term, self.name, self.last_log_index(), self.last_log_term())
        return [(p, req) for p in self.peers]

    def _become_leader(self, now: Nanos) -> Outbound:
        self.role = Role.Leader
        self.leader_id = self.name
        self.next_index = {p: self.last_log_index() + 1 for p in self.peers}
        self.match_index = {p: 0 for p in self.peers}
        self.heartbeat_due = now + self.config.heartbeat_ns
        if self.on_become_leader:
            self.on_become_leader(self.current_term, self.name)
        out = self._append_local(NoOp(), None, now)
        out.extend(self._broadcast_append(now))
        return out

    def bootstrap_leader(self, now: Nanos) -> None:
        """Start a steady-state cluster with this node as the term-1 leader."""
        self.current_term = 1
        self.voted_for = self.name
        self.role = Role.Leader
        self.leader_id = self.name
        self.next_index = {p: 1 for p in self.peers}
        self.match_index = {p: 0 for p in self.peers}
        self.heartbeat_due = now + self.config.heartbeat_ns
        if self.on_become_leader:
            self.on_become_leader(self.current_term, self.name)

    def bootstrap_follower(self, leader: Addr, now: Nanos) -> None:
        self.current_term = 1
        self.voted_for = leader
        self.role = Role.Follower
        self.leader_id = leader
        self.election_deadline = self._draw_timeout(now)

    # -- log machinery ----------------------------------------------------------

    def _append_local(self, payload: EntryPayload, client: tuple[Addr, int] | None,
                      now: Nanos) -> Outbound:
        entry = RaftLogEntry(self.current_term, self.last_log_index() + 1, payload, client)
        self.log.append(entry)
        if client is not None:
            self._in_log[client] = entry.index
        if len(self.peers) == 0:
            return self._advance_commit(now)
        return []

    def _entries_for(self, peer: Addr) -> AppendEntries:
        nxt = self.next_index[peer]
        prev = nxt - 1
        prev_term = self._entry(prev).term if prev >= 1 else 0
        return AppendEntries(
            term=self.current_term,
            leader=self.name,
            prev_index=prev,
            prev_term=prev_term,
            entries=tuple(self.log[nxt - 1 :]),
            leader_commit=self.commit_index,
        )

    def _broadcast_append(self, now: Nanos) -> Outbound:
        # Any broadcast doubles as a heartbeat, so the idle beat re-arms.
        self.heartbeat_due = now + self.config.heartbeat_ns
        return [(p, self._entries_for(p)) for p in self.peers]

    def _truncate_from(self, index: int) -> None:
        # Drop entries >= index and rebuild the request-id index.
        self.log = self.log[: index - 1]
        self._in_log = {e.client: e.index for e in self.log if e.client is not None}

    def _advance_commit(self, now: Nanos) -> Outbound:
        matches = sorted(
            [self.last_log_index(), *self.match_index.values()], reverse=True
        )
        candidate = matches[self._majority() - 1]
        if candidate > self.commit_index and self._entry(candidate).term == self.current_term:
            self.commit_index = candidate
            return self.apply_committed(now)
        return []

    def apply_committed(self, now: Nanos = 0) -> Outbound:
        """Apply (last_applied, commit_index]; leader also emits replies/updates.

        A request id that already mutated the state machine is not applied
        again (client retries around a failover can commit a second entry);
        the duplicate still earns a committed reply so the retrying client
        learns the outcome.
        """
        out: Outbound = []
        while self.last_applied < self.commit_index:
            self.last_applied += 1
            entry = self._entry(self.last_applied)
            duplicate = False
            if entry.client is not None:
                client, rid = entry.client
                seen = self._applied_requests.setdefault(client, OrderedDict())
                duplicate = rid in seen
                if not duplicate:
                    seen[rid] = entry.index
                    if len(seen) > DEDUP_PER_CLIENT:
                        seen.popitem(last=False)
            if not duplicate:
                self._apply_payload(entry.payload)
            if self.role is Role.Leader:
                if not duplicate:
                    target = _forward_target(entry.payload)
                    if target is not None:
                        cmd_id, element, body = target
                        out.append((element, SwitchUpdate(cmd_id, element, body, now)))
                if entry.client is not None:
                    client, rid = entry.client
                    out.append((client, ClientReply(rid, True, self.name)))
            if self.on_apply:
                self.on_apply(self.name, self.last_applied, state_hash(self.elements))
        return out

    def _apply_payload(self, payload: EntryPayload) -> None:
        if isinstance(payload, KvWrite):
            self._element(KV_ELEMENT).kv[payload.key] = payload.value
        elif isinstance(payload, Reflex):
            cmd = payload.command
            self._element(cmd.target_element).apply_body(cmd.body)
        elif isinstance(payload, Control):
            cmd = payload.command
            self._element(cmd.target_element).apply_body(cmd.body)
        elif isinstance(payload, NoOp):
            pass
        else:
            raise TypeError(f"unknown payload {payload!r}")

    def _element(self, element_id: str) -> ElementState:
        el = self.elements.get(element_id)
        if el is None:
            el = self.elements[element_id] = ElementState(element_id)
        return el

    # -- message handling ---------------------------------------------------------

    def handle(self, src: Addr, msg: Any, now: Nanos) -> Outbound:
        if isinstance(msg, RequestVote):
            return self._on_request_vote(src, msg, now)
        if isinstance(msg, VoteReply):
            return self._on_vote_reply(src, msg, now)
        if isinstance(msg, AppendEntries):
            return self._on_append_entries(src, msg, now)
        if isinstance(msg, AppendReply):
            return self._on_append_reply(src, msg, now)
        if isinstance(msg, ClientWrite):
            return self._on_client_write(src, msg, now)
        raise TypeError(f"unexpected message {msg!r}")

    def _on_request_vote(self, src: Addr, msg: RequestVote, now: Nanos) -> Outbound:
        if msg.term > self.current_term:
            self._step_down(msg.term, now)
        if msg.term < self.current_term:
            return [(src, VoteReply(self.current_term, False))]
        up_to_date = (msg.last_log_term, msg.last_log_index) >= (
            self.last_log_term(), self.last_log_index(),
        )
        grant = up_to_date and self.voted_for in (None, msg.candidate)
        if grant:
            self.voted_for = msg.candidate
            self.election_deadline = self._draw_timeout(now)
        return [(src, VoteReply(self.current_term, grant))]

    def _on_vote_reply(self, src: Addr, msg: VoteReply, now: Nanos) -> Outbound:
        if msg.term > self.current_term:
            self._step_down(msg.term, now)
            return []
        if self.role is not Role.Candidate or msg.term < self.current_term or not msg.granted:
            return []
        self.votes.add(src)
        if len(self.votes) >= self._majority():
            return self._become_leader(now)
        return []

    def _on_append_entries(self, src: Addr, msg: AppendEntries, now: Nanos) -> Outbound:
        if msg.term > self.current_term:
            self._step_down(msg.term, now)
        if msg.term < self.current_term:
            return [(src, AppendReply(self.current_term, False, 0))]
        # Same-term append: a valid leader exists, so any candidacy ends.
        self.role = Role.Follower
        self.leader_id = msg.leader
        self.election_deadline = self._draw_timeout(now)
        if msg.prev_index >= 1 and (
            self.last_log_index() < msg.prev_index
            or self._entry(msg.prev_index).term != msg.prev_term
        ):
            return [(src, AppendReply(self.current_term, False, 0))]
        for i, entry in enumerate(msg.entries):
            index = msg.prev_index + i + 1
            if self.last_log_index() >= index:
                if self._entry(index).term != entry.term:
                    self._truncate_from(index)
                else:
                    continue  # already have it
            self.log.append(entry)
            if entry.client is not None:
                self._in_log[entry.client] = entry.index
        new_match = msg.prev_index + len(msg.entries)
        out: Outbound = []
        if msg.leader_commit > self.commit_index:
            # Log matching: everything up to new_match is known consistent.
            self.commit_index = max(self.commit_index, min(msg.leader_commit, new_match))
            out.extend(self.apply_committed(now))
        out.append((src, AppendReply(self.current_term, True, new_match)))
        return out

    def _on_append_reply(self, src: Addr, msg: AppendReply, now: Nanos) -> Outbound:
        if msg.term > self.current_term:
            self._step_down(msg.term, now)
            return []
        if self.role is not Role.Leader or msg.term < self.current_term:
            return []
        if msg.success:
            self.match_index[src] = max(self.match_index[src], msg.match_index)
            self.next_index[src] = self.match_index[src] + 1
            return self._advance_commit(now)
        self.next_index[src] = max(1, self.next_index[src] - 1)
        return [(src, self._entries_for(src))]

    def _on_client_write(self, src: Addr, msg: ClientWrite, now: Nanos) -> Outbound:
        if self.role is not Role.Leader:
            return [(src, ClientReply(msg.request_id, False, self.leader_id))]
        seen = self._applied_requests.get(src)
        if seen is not None and msg.request_id in seen:
            return [(src, ClientReply(msg.request_id, True, self.name))]
        if (src, msg.request_id) in self._in_log:
            return []  # already replicating; the apply path will answer
        out = self._append_local(msg.payload, (src, msg.request_id), now)
        out.extend(self._broadcast_append(now))
        return out

    # -- crash / restart -----------------------------------------------------------

    def restart(self, now: Nanos) -> None:
        """Rejoin with persisted (term, vote, log); everything else rebuilt."""
        self.role = Role.Follower
        self.leader_id = None
        self.votes = set()
        self.next_index = {}
        self.match_index = {}
        self.commit_index = 0
        self.last_applied = 0
        self.elements = {}
        self._applied_requests = {}
        self._in_log = {e.client: e.index for e in self.log if e.client is not None}
        self.election_deadline = self._draw_timeout(now)


def raft_tick(node: RaftNode, now: Nanos) -> Outbound:
    return node.tick(now)


def raft_handle(node: RaftNode, src: Addr, msg: Any, now: Nanos) -> Outbound:
    return node.handle(src, msg, now)


def _forward_target(payload: EntryPayload) -> tuple[str, str, CommandBody] | None:
    if isinstance(payload, Reflex):
        c = payload.command
        return c.command_id, c.target_element, c.body
    if isinstance(payload, Control):
        c = payload.command
        return c.command_id, c.target_element, c.body
    return None
