"""
Voting Terminal - the station state machine.

    Idle ──card──▶ AwaitingSelection ──select──▶ AwaitingConfirmation ──confirm──▶ Committed
      │                  ▲                              │                             │
      └─denied─▶ Denied  └────────────cancel────────────┘                             │
                   │                                                                   │
                   └──────────────── dwell / timeout elapses ──▶ Idle ◀────────────────┘

`handle_event` is a pure transition function returning the next state and the
effects to apply. `VotingTerminal` is the single-threaded event loop that owns
the session, applies effects in order, and keeps terminal telemetry.
"""

import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Protocol, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from card_auth import AuthResult, CardImage, VoterRegistry, authenticate, mark_voted, validate_uid
from config import DEFAULT_STEP_DURATIONS, DISPLAY_DWELL_MS, SESSION_TIMEOUT_MS, get_logger
from crypto_engine import DIGEST_SIZE, Aes128Key, IvGenerator, checksum, encrypt_packet
from errors import ContractError, MalformedPacket, StorageError

logger = get_logger("voting.terminal")

MSG_AUTHENTICATED = "Voter Authenticated"
MSG_RECORDED = "Vote Recorded"
MSG_DENIED = "Access Denied"

TELEMETRY_MAGIC = b"BVT1"
_TELEMETRY_COUNTERS = struct.Struct("<IIIQI")


# ---------------------------------------------------------
# 1. BALLOT AND TIMING MODEL
# ---------------------------------------------------------
class Candidate(BaseModel):
    model_config = ConfigDict(frozen=True)

    candidate_id: int = Field(ge=0, le=0xFFFF, description="Identifier written into the vote packet (u16)")
    name: str = Field(min_length=1, description="Name shown on the selection screen")


class Ballot(BaseModel):
    """Ordered candidate list, fixed for an election."""
    model_config = ConfigDict(frozen=True)

    candidates: tuple[Candidate, ...] = Field(min_length=1, description="Candidates in display order")

    @model_validator(mode="after")
    def _unique_ids(self):
        ids = [c.candidate_id for c in self.candidates]
        if len(ids) != len(set(ids)):
            raise ValueError("candidate_ids must be unique")
        return self

    @property
    def candidate_ids(self) -> list[int]:
        return [c.candidate_id for c in self.candidates]

    def candidate_at(self, index: int) -> Optional[Candidate]:
        if 0 <= index < len(self.candidates):
            return self.candidates[index]
        return None

    def contains(self, candidate_id: int) -> bool:
        return candidate_id in self.candidate_ids


class StepDurations(BaseModel):
    """Simulated duration of each phase of a voting cycle."""
    model_config = ConfigDict(frozen=True)

    card_read_ms: int = Field(default=DEFAULT_STEP_DURATIONS["card_read_ms"], ge=0)
    auth_ms: int = Field(default=DEFAULT_STEP_DURATIONS["auth_ms"], ge=0)
    selection_ms: int = Field(default=DEFAULT_STEP_DURATIONS["selection_ms"], ge=0)
    confirmation_ms: int = Field(default=DEFAULT_STEP_DURATIONS["confirmation_ms"], ge=0)
    encryption_ms: int = Field(default=DEFAULT_STEP_DURATIONS["encryption_ms"], ge=0)
    append_ms: int = Field(default=DEFAULT_STEP_DURATIONS["append_ms"], ge=0)

    @property
    def total_ms(self) -> int:
        return (self.card_read_ms + self.auth_ms + self.selection_ms
                + self.confirmation_ms + self.encryption_ms + self.append_ms)


# ---------------------------------------------------------
# 2. STATES, EVENTS, EFFECTS
# ---------------------------------------------------------
@dataclass(frozen=True)
class Idle:
    pass


@dataclass(frozen=True)
class AwaitingSelection:
    uid: bytes
    since: int        # authentication time, start of the session timeout
    started_at: int   # card scan start, start of the voting cycle


@dataclass(frozen=True)
class AwaitingConfirmation:
    uid: bytes
    candidate_id: int
    since: int
    started_at: int


@dataclass(frozen=True)
class Denied:
    reason: AuthResult
    until: int


@dataclass(frozen=True)
class Committed:
    uid: bytes
    until: int


SessionState = Union[Idle, AwaitingSelection, AwaitingConfirmation, Denied, Committed]


@dataclass(frozen=True)
class CardPresented:
    card: CardImage


@dataclass(frozen=True)
class SelectCandidate:
    index: int


@dataclass(frozen=True)
class Confirm:
    pass


@dataclass(frozen=True)
class Cancel:
    pass


@dataclass(frozen=True)
class Tick:
    now: int


TerminalEvent = Union[CardPresented, SelectCandidate, Confirm, Cancel, Tick]


@dataclass(frozen=True)
class Display:
    message: str
    latency_ms: int = 0


@dataclass(frozen=True)
class AppendEntry:
    packet: bytes
    uid: bytes


@dataclass(frozen=True)
class MarkVoted:
    uid: bytes


@dataclass(frozen=True)
class RecordCycle:
    duration_ms: int


Effect = Union[Display, AppendEntry, MarkVoted, RecordCycle]


# ---------------------------------------------------------
# 3. VOTE PACKETS
# ---------------------------------------------------------
@dataclass(frozen=True)
class VotePacket:
    uid: bytes
    candidate_id: int
    timestamp: int


def build_vote_packet(uid: bytes, candidate_id: int, timestamp: int) -> bytes:
    """uid_len:u8 ∥ uid ∥ candidate_id:u16 ∥ timestamp:u64, little-endian."""
    uid = validate_uid(uid)
    if not 0 <= candidate_id <= 0xFFFF or timestamp < 0:
        raise ContractError("candidate_id must fit u16 and timestamp must be non-negative")
    return struct.pack("<B", len(uid)) + uid + struct.pack("<HQ", candidate_id, timestamp)


def parse_vote_packet(data: bytes) -> VotePacket:
    if not data:
        raise MalformedPacket("empty packet")
    uid_len = data[0]
    if uid_len not in (4, 7, 10):
        raise MalformedPacket(f"invalid uid length {uid_len}")
    if len(data) != 1 + uid_len + 10:
        raise MalformedPacket(f"packet length {len(data)} does not match uid length {uid_len}")
    candidate_id, timestamp = struct.unpack_from("<HQ", data, 1 + uid_len)
    return VotePacket(uid=bytes(data[1:1 + uid_len]), candidate_id=candidate_id, timestamp=timestamp)


# ---------------------------------------------------------
# 4. TRANSITION FUNCTION
# ---------------------------------------------------------
class Clock(Protocol):
    @property
    def now(self) -> int: ...


class VoteLog(Protocol):
    def append(self, timestamp: int, iv: bytes, ciphertext: bytes) -> int: ...
    def entry(self, seq_no: int): ...


@dataclass
class TerminalContext:
    """Everything a terminal needs after system initialization."""
    device_id: bytes
    registry: VoterRegistry
    ballot: Ballot
    card_key: Aes128Key
    vote_key: Aes128Key
    clock: Clock
    log: VoteLog
    iv_source: IvGenerator
    step_durations: StepDurations = field(default_factory=StepDurations)
    session_timeout_ms: int = SESSION_TIMEOUT_MS
    dwell_ms: int = DISPLAY_DWELL_MS


def _expire(state: SessionState, now: int, ctx: TerminalContext) -> SessionState:
    if isinstance(state, (Denied, Committed)) and now >= state.until:
        return Idle()
    if isinstance(state, (AwaitingSelection, AwaitingConfirmation)) and now >= state.since + ctx.session_timeout_ms:
        logger.info("Session for %s abandoned after %d ms - nothing recorded", state.uid.hex(), now - state.since)
        return Idle()
    return state


def handle_event(state: SessionState, event: TerminalEvent, ctx: TerminalContext) -> tuple[SessionState, list[Effect]]:
    """
    Applies one event. Denied/Committed dwell and session timeouts are
    resolved against the clock before the event itself is considered.
    """
    now = event.now if isinstance(event, Tick) else ctx.clock.now
    steps = ctx.step_durations
    state = _expire(state, now, ctx)

    if isinstance(event, Tick):
        return state, []

    if isinstance(event, CardPresented):
        if not isinstance(state, Idle):
            return state, []
        result = authenticate(ctx.registry, event.card, ctx.card_key)
        if result is AuthResult.ELIGIBLE:
            return (
                AwaitingSelection(uid=event.card.uid, since=now, started_at=now - steps.card_read_ms),
                [Display(MSG_AUTHENTICATED, steps.auth_ms)],
            )
        return (
            Denied(reason=result, until=now + steps.auth_ms + ctx.dwell_ms),
            [Display(MSG_DENIED, steps.auth_ms)],
        )

    if isinstance(event, SelectCandidate):
        if not isinstance(state, AwaitingSelection):
            return state, []
        candidate = ctx.ballot.candidate_at(event.index)
        if candidate is None:
            return state, [Display(MSG_AUTHENTICATED)]
        return AwaitingConfirmation(state.uid, candidate.candidate_id, state.since, state.started_at), []

    if isinstance(event, Confirm):
        if not isinstance(state, AwaitingConfirmation):
            return state, []
        packet = build_vote_packet(state.uid, state.candidate_id, now)
        work_ms = steps.encryption_ms + steps.append_ms
        done = now + work_ms
        return (
            Committed(uid=state.uid, until=done + ctx.dwell_ms),
            [
                AppendEntry(packet=packet, uid=state.uid),
                MarkVoted(uid=state.uid),
                Display(MSG_RECORDED, work_ms),
                RecordCycle(duration_ms=done - state.started_at),
            ],
        )

    if isinstance(event, Cancel):
        if isinstance(state, AwaitingConfirmation):
            return AwaitingSelection(state.uid, state.since, state.started_at), [Display(MSG_AUTHENTICATED)]
        return state, []

    raise ContractError(f"unknown terminal event {event!r}")


def commit_vote(ctx: TerminalContext, uid: bytes, candidate_id: int, timestamp: int):
    """
    Encrypts the vote packet under the vote key with a fresh IV and appends
    it to the local WORM log. Returns the persisted LogEntry.
    """
    if not ctx.ballot.contains(candidate_id):
        raise ContractError(f"candidate {candidate_id} is not on the ballot")
    packet = build_vote_packet(uid, candidate_id, timestamp)
    iv = ctx.iv_source.next_iv()
    ciphertext = encrypt_packet(ctx.vote_key, iv, packet)
    seq_no = ctx.log.append(timestamp, iv, ciphertext)
    return ctx.log.entry(seq_no)


# ---------------------------------------------------------
# 5. TELEMETRY
# ---------------------------------------------------------
@dataclass
class TerminalTelemetry:
    """Counters a terminal reports to the monitoring server."""
    device_id: bytes
    votes_committed: int = 0
    auth_success: int = 0
    auth_failure: int = 0
    cycle_total_ms: int = 0
    cycle_count: int = 0
    storage_failures: int = 0
    auth_outcomes: Counter = field(default_factory=Counter)
    cycle_times: list[int] = field(default_factory=list)
    display_latencies: list[int] = field(default_factory=list)

    def to_wire(self) -> bytes:
        """BVT1 ∥ device_id ∥ counters ∥ checksum of everything before it."""
        body = TELEMETRY_MAGIC + self.device_id + _TELEMETRY_COUNTERS.pack(
            self.votes_committed, self.auth_success, self.auth_failure,
            self.cycle_total_ms, self.cycle_count,
        )
        return body + checksum(body)

    @classmethod
    def from_wire(cls, data: bytes) -> "TerminalTelemetry":
        size = len(TELEMETRY_MAGIC) + 8 + _TELEMETRY_COUNTERS.size
        if len(data) != size + DIGEST_SIZE or data[:4] != TELEMETRY_MAGIC:
            raise MalformedPacket("not a telemetry message")
        if checksum(data[:size]) != data[size:]:
            raise MalformedPacket("telemetry checksum mismatch")
        votes, ok, failed, total, count = _TELEMETRY_COUNTERS.unpack_from(data, 12)
        return cls(device_id=bytes(data[4:12]), votes_committed=votes, auth_success=ok,
                   auth_failure=failed, cycle_total_ms=total, cycle_count=count)


# ---------------------------------------------------------
# 6. EVENT LOOP
# ---------------------------------------------------------
class VotingTerminal:
    """
    Owns one station's session. Events must be dispatched in clock order from
    a single thread. AppendEntry is applied before MarkVoted; if the append
    fails the session rolls back to AwaitingConfirmation and nothing else of
    the commit is applied.
    """

    def __init__(self, ctx: TerminalContext):
        self.ctx = ctx
        self.state: SessionState = Idle()
        self.telemetry = TerminalTelemetry(device_id=ctx.device_id)
        self.screen: list[str] = []

    @property
    def device_id(self) -> bytes:
        return self.ctx.device_id

    def dispatch(self, event: TerminalEvent) -> list[Effect]:
        """Applies one event and returns the effects that took place."""
        previous = self.state
        new_state, effects = handle_event(previous, event, self.ctx)

        applied: list[Effect] = []
        for effect in effects:
            if isinstance(effect, AppendEntry):
                packet = parse_vote_packet(effect.packet)
                try:
                    commit_vote(self.ctx, packet.uid, packet.candidate_id, packet.timestamp)
                except StorageError as e:
                    logger.error("Vote append failed for %s, returning to confirmation: %s", packet.uid.hex(), e)
                    self.telemetry.storage_failures += 1
                    self.state = previous
                    return applied
            elif isinstance(effect, MarkVoted):
                mark_voted(self.ctx.registry, effect.uid, self.ctx.clock.now)
                self.telemetry.votes_committed += 1
                logger.debug("Vote committed for %s on %s", effect.uid.hex(), self.device_id.hex())
            elif isinstance(effect, RecordCycle):
                self.telemetry.cycle_total_ms += effect.duration_ms
                self.telemetry.cycle_count += 1
                self.telemetry.cycle_times.append(effect.duration_ms)
            elif isinstance(effect, Display):
                self.screen.append(effect.message)
                self.telemetry.display_latencies.append(effect.latency_ms)
            applied.append(effect)

        if isinstance(event, CardPresented) and effects:
            if isinstance(new_state, AwaitingSelection):
                self.telemetry.auth_success += 1
                self.telemetry.auth_outcomes[AuthResult.ELIGIBLE.value] += 1
            elif isinstance(new_state, Denied):
                self.telemetry.auth_failure += 1
                self.telemetry.auth_outcomes[new_state.reason.value] += 1
                logger.info("Access denied on %s: %s", self.device_id.hex(), new_state.reason.value)

        self.state = new_state
        return applied
