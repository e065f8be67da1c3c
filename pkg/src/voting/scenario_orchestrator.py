"""
Scenario Orchestrator - builds a whole election from a scenario file and runs
it on the simulated clock.

    registry + cards → terminals (one simpy process each)
                     → sync agents (one simpy process each) ──link──▶ tally server
    polls close → catch-up sync until every log is acknowledged → report

Every random choice (generated UIDs, IVs, forged tokens, link faults) comes
from numpy generators seeded by the scenario seed and a fixed stream number,
so the same file always yields the same report, byte for byte.
"""

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from card_auth import AuthResult, CardImage, issue_card, load_registry, new_registry, save_registry
from config import (
    DEFAULT_SEED,
    DISPLAY_DWELL_MS,
    DISPLAY_LATENCY_BUDGET_MS,
    MANUAL_CYCLE_RANGE_S,
    MAX_CATCHUP_MS,
    SESSION_TIMEOUT_MS,
    get_logger,
)
from crypto_engine import Aes128Key, IvGenerator, decrypt_packet
from errors import ConfigError
from sim_network import FaultInjector, FaultPlan, LinkSchedule, SimClock, SimulatedTransport, WireTrace
from sync_agent import SyncAgent, SyncReport, SyncSettings
from tally_server import MonitoringSnapshot, TallyResult, TallyServer
from voting_terminal import (
    Ballot,
    CardPresented,
    Cancel,
    Committed,
    Confirm,
    Denied,
    Idle,
    SelectCandidate,
    StepDurations,
    TerminalContext,
    Tick,
    VotingTerminal,
    parse_vote_packet,
)
from worm_log import FileStorage, MemoryStorage, SyncJournal, WormLog, verify_chain

logger = get_logger("voting.orchestrator")

HEX_KEY = r"^[0-9a-fA-F]{32}$"
HEX_DEVICE_ID = r"^[0-9a-fA-F]{16}$"
HEX_UID = r"^([0-9a-fA-F]{8}|[0-9a-fA-F]{14}|[0-9a-fA-F]{20})$"

# rng stream numbers
_STREAM_POPULATION = 1
_STREAM_FORGED = 2
_STREAM_IV = 3
_STREAM_LINK = 4


# ---------------------------------------------------------
# 1. SCENARIO FILE MODEL
# ---------------------------------------------------------
class DeviceConfig(BaseModel):
    device_id: str = Field(pattern=HEX_DEVICE_ID, description="8-byte terminal id, hex")
    device_key: str = Field(pattern=HEX_KEY, description="AES-128 device MAC key, hex")


class ScenarioKeys(BaseModel):
    card_key: str = Field(pattern=HEX_KEY)
    vote_key: str = Field(pattern=HEX_KEY)
    registry_key: str = Field(pattern=HEX_KEY)

    @model_validator(mode="after")
    def _distinct(self):
        if len({self.card_key.lower(), self.vote_key.lower(), self.registry_key.lower()}) != 3:
            raise ValueError("card, vote and registry keys must be distinct")
        return self


class VoterScript(BaseModel):
    uid: str = Field(pattern=HEX_UID)
    candidate_id: Optional[int] = Field(default=None, description="Intended choice; None walks away unvoted")
    device: int = Field(default=0, ge=0, description="Index into devices")
    arrival_ms: int = Field(ge=0)
    registered: bool = True
    cancel_first: bool = Field(default=False, description="Cancels once at the confirmation screen")
    invalid_selection_first: bool = Field(default=False, description="Presses an off-ballot key once")


class PopulationBlock(BaseModel):
    """Generates `count` voters with seeded UIDs arriving every interval_ms."""
    count: int = Field(ge=0)
    device: int = Field(default=0, ge=0)
    start_ms: int = Field(default=0, ge=0)
    interval_ms: int = Field(default=15_000, ge=1)
    uid_length: Literal[4, 7, 10] = 4
    candidates: Literal["round_robin", "random"] = "round_robin"
    registered: bool = True


class ForgedCard(BaseModel):
    """A card whose token does not belong to its UID."""
    uid: str = Field(pattern=HEX_UID)
    device: int = Field(default=0, ge=0)
    arrival_ms: int = Field(ge=0)
    source_uid: Optional[str] = Field(default=None, pattern=HEX_UID,
                                      description="Copy this voter's token onto the altered UID")
    token: Optional[str] = Field(default=None, pattern=HEX_KEY, description="Explicit token; random if absent")


class ClonedCard(BaseModel):
    """A byte-exact copy of a genuine voter's card presented again."""
    source_uid: str = Field(pattern=HEX_UID)
    device: int = Field(default=0, ge=0)
    arrival_ms: int = Field(ge=0)
    candidate_id: Optional[int] = None


class ScenarioConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "scenario"
    seed: int = DEFAULT_SEED
    ballot: Ballot
    devices: list[DeviceConfig] = Field(min_length=1)
    keys: ScenarioKeys
    voters: list[VoterScript] = Field(default_factory=list)
    population: list[PopulationBlock] = Field(default_factory=list)
    forged_cards: list[ForgedCard] = Field(default_factory=list)
    clones: list[ClonedCard] = Field(default_factory=list)
    link_schedule: LinkSchedule = Field(default_factory=LinkSchedule)
    faults: FaultPlan = Field(default_factory=FaultPlan)
    step_durations: StepDurations = Field(default_factory=StepDurations)
    sync: SyncSettings = Field(default_factory=SyncSettings)
    session_timeout_ms: int = Field(default=SESSION_TIMEOUT_MS, ge=1)
    display_dwell_ms: int = Field(default=DISPLAY_DWELL_MS, ge=0)
    max_catchup_ms: int = Field(default=MAX_CATCHUP_MS, ge=0)

    @model_validator(mode="after")
    def _consistent(self):
        ids = [d.device_id.lower() for d in self.devices]
        if len(ids) != len(set(ids)):
            raise ValueError("device ids must be unique")
        n = len(self.devices)
        for group in (self.voters, self.population, self.forged_cards, self.clones):
            for item in group:
                if item.device >= n:
                    raise ValueError(f"device index {item.device} out of range (have {n})")

        uids = [v.uid.lower() for v in self.voters]
        if len(uids) != len(set(uids)):
            raise ValueError("voter uids must be unique")
        last_arrival: dict[int, int] = {}
        for v in self.voters:
            if v.candidate_id is not None and not self.ballot.contains(v.candidate_id):
                raise ValueError(f"voter {v.uid} intends candidate {v.candidate_id}, not on the ballot")
            if v.arrival_ms < last_arrival.get(v.device, 0):
                raise ValueError(f"voter arrivals on device {v.device} must be ascending")
            last_arrival[v.device] = v.arrival_ms
        for c in self.clones:
            if c.source_uid.lower() not in uids:
                raise ValueError(f"clone source {c.source_uid} is not a scripted voter")
            if c.candidate_id is not None and not self.ballot.contains(c.candidate_id):
                raise ValueError(f"clone of {c.source_uid} intends an off-ballot candidate")
        for f in self.forged_cards:
            if f.source_uid is not None and f.source_uid.lower() not in uids:
                raise ValueError(f"forged card source {f.source_uid} is not a scripted voter")
        return self


def validate_scenario(data: Union[dict, str, ScenarioConfig]) -> ScenarioConfig:
    """Validates a dict or JSON text. Any problem is raised as ConfigError."""
    if isinstance(data, ScenarioConfig):
        return data
    try:
        if isinstance(data, str):
            return ScenarioConfig.model_validate_json(data)
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(p) for p in first["loc"]) or None
        raise ConfigError(first["msg"], field=location) from e


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read scenario: {e}") from e
    return validate_scenario(text)


# ---------------------------------------------------------
# 2. REPORT MODEL
# ---------------------------------------------------------
class TimingStats(BaseModel):
    cycles: int = 0
    mean_cycle_ms: float = 0.0
    min_cycle_ms: int = 0
    max_cycle_ms: int = 0
    max_display_latency_ms: int = 0


class AuthStats(BaseModel):
    presentations: int = 0
    outcomes: dict[str, int] = Field(default_factory=dict)
    false_accepts: int = 0
    false_rejects: int = 0
    double_vote_attempts: int = 0
    double_votes_denied: int = 0
    abandoned: int = 0


class Throughput(BaseModel):
    voters_per_hour: float = 0.0
    manual_voters_per_hour: tuple[float, float] = (0.0, 0.0)
    speedup_vs_manual: tuple[float, float] = (0.0, 0.0)


class InvariantCheck(BaseModel):
    ok: bool
    detail: str = ""


class ScenarioReport(BaseModel):
    name: str
    seed: int
    votes_committed: int
    poll_close_ms: int
    finished_at_ms: int
    tally: TallyResult
    expected_tally: Optional[dict[int, int]] = None
    snapshot: MonitoringSnapshot
    sync_reports: dict[str, list[SyncReport]]
    timing: TimingStats
    auth: AuthStats
    throughput: Throughput
    invariants: dict[str, InvariantCheck]

    @property
    def ok(self) -> bool:
        return all(check.ok for check in self.invariants.values())

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    def to_table(self) -> str:
        """Human-readable summary as markdown tables."""
        tally_df = pd.DataFrame(
            [{"candidate_id": cid, "votes": n, "expected": (self.expected_tally or {}).get(cid, "")}
             for cid, n in self.tally.counts.items()]
        )
        auth_df = pd.DataFrame([{"outcome": k, "count": v} for k, v in sorted(self.auth.outcomes.items())])
        inv_df = pd.DataFrame(
            [{"invariant": k, "ok": v.ok, "detail": v.detail} for k, v in self.invariants.items()]
        )
        sync_df = pd.DataFrame([
            {"device": dev, "cycles": len(reps),
             "batches_sent": sum(r.batches_sent for r in reps),
             "acked": sum(r.acked for r in reps), "nacked": sum(r.nacked for r in reps),
             "sync_ms": sum(r.duration_ms for r in reps)}
            for dev, reps in self.sync_reports.items()
        ])
        parts = [
            f"# Scenario `{self.name}` (seed {self.seed})",
            f"votes committed: {self.votes_committed} - received: {self.snapshot.votes_received} - "
            f"excluded: {len(self.tally.excluded)} - anomalies: {len(self.snapshot.anomalies)}",
            f"mean cycle: {self.timing.mean_cycle_ms:.0f} ms - {self.throughput.voters_per_hour:.0f} voters/hour "
            f"(manual {self.throughput.manual_voters_per_hour[0]:.0f}–{self.throughput.manual_voters_per_hour[1]:.0f})",
            "## Tally", tally_df.to_markdown(index=False),
            "## Authentication", auth_df.to_markdown(index=False) if not auth_df.empty else "(none)",
            "## Synchronization", sync_df.to_markdown(index=False),
            "## Invariants", inv_df.to_markdown(index=False),
        ]
        return "\n\n".join(parts) + "\n"


# ---------------------------------------------------------
# 3. ROSTER EXPANSION
# ---------------------------------------------------------
@dataclass(frozen=True)
class Presentation:
    """One card held to one reader at one time, with the expected verdict."""
    arrival_ms: int
    order: int
    device: int
    card: CardImage
    kind: str                        # genuine | unregistered | forged | clone
    candidate_id: Optional[int] = None
    cancel_first: bool = False
    invalid_selection_first: bool = False


def expand_roster(config: ScenarioConfig) -> list[VoterScript]:
    """Scripted voters followed by generated population blocks."""
    roster = list(config.voters)
    taken = {v.uid.lower() for v in roster}
    ballot_ids = config.ballot.candidate_ids
    for index, block in enumerate(config.population):
        rng = np.random.default_rng([config.seed, _STREAM_POPULATION, index])
        for k in range(block.count):
            uid = rng.bytes(block.uid_length).hex()
            while uid in taken:
                uid = rng.bytes(block.uid_length).hex()
            taken.add(uid)
            if block.candidates == "round_robin":
                candidate = ballot_ids[k % len(ballot_ids)]
            else:
                candidate = ballot_ids[int(rng.integers(len(ballot_ids)))]
            roster.append(VoterScript(uid=uid, candidate_id=candidate, device=block.device,
                                      arrival_ms=block.start_ms + k * block.interval_ms,
                                      registered=block.registered))
    return roster


def _presentations(config: ScenarioConfig, roster: list[VoterScript], card_key: Aes128Key) -> list[Presentation]:
    cards = {v.uid.lower(): issue_card(bytes.fromhex(v.uid), card_key) for v in roster}
    out: list[Presentation] = []
    for v in roster:
        out.append(Presentation(v.arrival_ms, len(out), v.device, cards[v.uid.lower()],
                                "genuine" if v.registered else "unregistered", v.candidate_id,
                                v.cancel_first, v.invalid_selection_first))

    rng = np.random.default_rng([config.seed, _STREAM_FORGED])
    default_choice = config.ballot.candidate_ids[0]
    for f in config.forged_cards:
        if f.source_uid is not None:
            token = cards[f.source_uid.lower()].token
        elif f.token is not None:
            token = bytes.fromhex(f.token)
        else:
            token = rng.bytes(16)
        out.append(Presentation(f.arrival_ms, len(out), f.device, CardImage(bytes.fromhex(f.uid), token),
                                "forged", default_choice))
    for c in config.clones:
        out.append(Presentation(c.arrival_ms, len(out), c.device, cards[c.source_uid.lower()], "clone",
                                c.candidate_id if c.candidate_id is not None else default_choice))
    return sorted(out, key=lambda p: (p.arrival_ms, p.order))


# ---------------------------------------------------------
# 4. RUNNER
# ---------------------------------------------------------
@dataclass
class DeviceRuntime:
    index: int
    device_id: bytes
    device_key: Aes128Key
    terminal: VotingTerminal
    log: WormLog
    journal: SyncJournal
    agent: SyncAgent
    sync_reports: list[SyncReport] = field(default_factory=list)
    busy_until: int = 0

    @property
    def fully_synced(self) -> bool:
        return self.journal.head == len(self.log) - 1 and self.agent.telemetry_acked


@dataclass
class PresentationResult:
    presentation: Presentation
    result: Optional[AuthResult] = None
    committed: bool = False
    abandoned: bool = False


class ScenarioRunner:
    """
    Owns every component of one run. Kept after the run so tests can inspect
    logs, the server and the wire trace.
    """

    def __init__(self, config: ScenarioConfig, work_dir: Optional[Union[str, Path]] = None):
        self.config = validate_scenario(config)
        self.work_dir = Path(work_dir) if work_dir is not None else None
        self.clock = SimClock()
        self.trace = WireTrace()
        self.polls_closed = False
        self.results: list[PresentationResult] = []

        cfg = self.config
        self.card_key = Aes128Key(bytes.fromhex(cfg.keys.card_key))
        self.vote_key = Aes128Key(bytes.fromhex(cfg.keys.vote_key))
        self.registry_key = Aes128Key(bytes.fromhex(cfg.keys.registry_key))

        self.roster = expand_roster(cfg)
        self.presentations = _presentations(cfg, self.roster, self.card_key)
        device_keys = {bytes.fromhex(d.device_id): Aes128Key(bytes.fromhex(d.device_key)) for d in cfg.devices}
        self.server = TallyServer(device_keys, self.vote_key, clock=lambda: self.clock.now)

        registry = new_registry([bytes.fromhex(v.uid) for v in self.roster if v.registered], self.registry_key)
        self.registry_blob = save_registry(registry, self.registry_key)
        self.devices = [self._build_device(i, d) for i, d in enumerate(cfg.devices)]

    def _storage(self, name: str):
        if self.work_dir is None:
            return MemoryStorage()
        self.work_dir.mkdir(parents=True, exist_ok=True)
        path = self.work_dir / name
        if path.exists():
            path.unlink()
        return FileStorage(path)

    def _build_device(self, index: int, device: DeviceConfig) -> DeviceRuntime:
        cfg = self.config
        device_id = bytes.fromhex(device.device_id)
        device_key = Aes128Key(bytes.fromhex(device.device_key))
        log = WormLog.open(self._storage(f"{device.device_id}.bvl"), device_key, device_id)
        journal = SyncJournal.open(self._storage(f"{device.device_id}.bvj"))

        ctx = TerminalContext(
            device_id=device_id,
            registry=load_registry(self.registry_blob, self.registry_key),
            ballot=cfg.ballot,
            card_key=self.card_key,
            vote_key=self.vote_key,
            clock=self.clock,
            log=log,
            iv_source=IvGenerator([cfg.seed, _STREAM_IV, index]),
            step_durations=cfg.step_durations,
            session_timeout_ms=cfg.session_timeout_ms,
            dwell_ms=cfg.display_dwell_ms,
        )
        terminal = VotingTerminal(ctx)
        transport = SimulatedTransport(self.clock, cfg.link_schedule,
                                       FaultInjector(cfg.faults, (cfg.seed, _STREAM_LINK, index)),
                                       device_id, self.server.handle_message, self.trace)
        agent = SyncAgent(log, journal, transport, device_key, cfg.sync,
                          telemetry_source=terminal.telemetry.to_wire)
        return DeviceRuntime(index, device_id, device_key, terminal, log, journal, agent)

    # ----- simpy processes -----
    def _wait_until_idle(self, rt: DeviceRuntime):
        while True:
            rt.terminal.dispatch(Tick(self.clock.now))
            state = rt.terminal.state
            if isinstance(state, Idle):
                return
            if isinstance(state, (Denied, Committed)):
                until = state.until
            else:
                until = state.since + self.config.session_timeout_ms
            yield self.clock.timeout(max(until - self.clock.now, 1))

    def _session(self, rt: DeviceRuntime, p: Presentation):
        steps = self.config.step_durations
        outcome = PresentationResult(p)
        self.results.append(outcome)

        yield self.clock.timeout(steps.card_read_ms)
        rt.terminal.dispatch(CardPresented(p.card))
        state = rt.terminal.state
        if isinstance(state, Denied):
            outcome.result = state.reason
            return
        outcome.result = AuthResult.ELIGIBLE
        yield self.clock.timeout(steps.auth_ms)

        if p.candidate_id is None:
            yield self.clock.timeout(self.config.session_timeout_ms)
            rt.terminal.dispatch(Tick(self.clock.now))
            outcome.abandoned = True
            logger.info("Voter %s walked away on %s", p.card.uid.hex(), rt.device_id.hex())
            return

        index = self.config.ballot.candidate_ids.index(p.candidate_id)
        if p.invalid_selection_first:
            rt.terminal.dispatch(SelectCandidate(len(self.config.ballot.candidates)))
        yield self.clock.timeout(steps.selection_ms)
        rt.terminal.dispatch(SelectCandidate(index))
        if p.cancel_first:
            yield self.clock.timeout(steps.confirmation_ms)
            rt.terminal.dispatch(Cancel())
            yield self.clock.timeout(steps.selection_ms)
            rt.terminal.dispatch(SelectCandidate(index))
        yield self.clock.timeout(steps.confirmation_ms)
        rt.terminal.dispatch(Confirm())
        outcome.committed = isinstance(rt.terminal.state, Committed)
        yield self.clock.timeout(steps.encryption_ms + steps.append_ms)

        if outcome.committed and self.config.sync.immediate:
            self._sync(rt)

    def _terminal_process(self, rt: DeviceRuntime, queue: list[Presentation]):
        for p in queue:
            if p.arrival_ms > self.clock.now:
                yield self.clock.timeout(p.arrival_ms - self.clock.now)
            yield from self._wait_until_idle(rt)
            yield from self._session(rt, p)
        yield from self._wait_until_idle(rt)

    def _sync(self, rt: DeviceRuntime) -> Optional[SyncReport]:
        now = self.clock.now
        if now < rt.busy_until:
            return None
        report = rt.agent.sync_cycle(now)
        rt.sync_reports.append(report)
        rt.busy_until = now + report.duration_ms
        return report

    def _sync_process(self, rt: DeviceRuntime):
        interval = self.config.sync.interval_ms
        while True:
            yield self.clock.timeout(interval)
            if self.polls_closed:
                return
            report = self._sync(rt)
            if report is not None and report.duration_ms:
                yield self.clock.timeout(report.duration_ms)

    # ----- run -----
    def _catch_up(self, deadline: int) -> None:
        schedule = self.config.link_schedule
        # counters may have moved since the last acknowledged report
        for rt in self.devices:
            rt.agent.telemetry_acked = False
        while not all(rt.fully_synced for rt in self.devices):
            if self.clock.now > deadline:
                logger.error("Catch-up sync gave up at %d ms", self.clock.now)
                return
            up_at = schedule.next_up_at(self.clock.now)
            if up_at > self.clock.now:
                self.clock.advance_to(min(up_at, deadline + 1))
                continue
            for rt in self.devices:
                if rt.fully_synced:
                    continue
                self.clock.advance_to(max(self.clock.now, rt.busy_until))
                report = self._sync(rt)
                if report is not None:
                    self.clock.advance(report.duration_ms)
            if not all(rt.fully_synced for rt in self.devices):
                self.clock.advance(self.config.sync.interval_ms)

    def run(self) -> ScenarioReport:
        cfg = self.config
        logger.info("=" * 60)
        logger.info("SCENARIO: %s  (seed %d, %d devices, %d presentations)",
                    cfg.name, cfg.seed, len(self.devices), len(self.presentations))
        logger.info("=" * 60)

        terminals = []
        for rt in self.devices:
            queue = [p for p in self.presentations if p.device == rt.index]
            terminals.append(self.clock.process(self._terminal_process(rt, queue)))
            self.clock.process(self._sync_process(rt))

        self.clock.env.run(until=self.clock.env.all_of(terminals))
        self.polls_closed = True
        poll_close = self.clock.now
        logger.info("STAGE: polls closed at %d ms - catch-up sync", poll_close)
        self._catch_up(poll_close + cfg.max_catchup_ms)

        report = self._report(poll_close)
        logger.info("STAGE: done - %d votes received, invariants %s",
                    report.snapshot.votes_received, "OK" if report.ok else "FAILED")
        return report

    # ----- report -----
    def _expected_tally(self) -> Optional[dict[int, int]]:
        """Brute-force recount straight from the script; None when clones make intent ambiguous."""
        home = {v.uid.lower(): v.device for v in self.roster}
        if any(c.device != home[c.source_uid.lower()] for c in self.config.clones):
            return None
        expected = {cid: 0 for cid in self.config.ballot.candidate_ids}
        seen: set[str] = set()
        for v in self.roster:
            if v.registered and v.candidate_id is not None and v.uid not in seen:
                expected[v.candidate_id] += 1
                seen.add(v.uid)
        return expected

    def _auth_stats(self) -> AuthStats:
        stats = AuthStats(presentations=len(self.results))
        outcomes: Counter = Counter()
        voted: dict[int, set[bytes]] = {}
        for r in self.results:
            p = r.presentation
            outcomes[r.result.value] += 1
            device_voted = voted.setdefault(p.device, set())
            eligible = r.result is AuthResult.ELIGIBLE
            if p.kind in ("forged", "unregistered"):
                stats.false_accepts += eligible
            elif p.card.uid in device_voted:
                stats.double_vote_attempts += 1
                stats.double_votes_denied += r.result is AuthResult.ALREADY_VOTED
            elif p.kind == "genuine":
                stats.false_rejects += not eligible
            if r.committed:
                device_voted.add(p.card.uid)
            stats.abandoned += r.abandoned
        stats.outcomes = dict(sorted(outcomes.items()))
        return stats

    def _timing(self) -> TimingStats:
        cycles = pd.Series([t for rt in self.devices for t in rt.terminal.telemetry.cycle_times], dtype="int64")
        latencies = [t for rt in self.devices for t in rt.terminal.telemetry.display_latencies]
        if cycles.empty:
            return TimingStats(max_display_latency_ms=max(latencies, default=0))
        return TimingStats(cycles=int(cycles.size), mean_cycle_ms=float(cycles.mean()),
                           min_cycle_ms=int(cycles.min()), max_cycle_ms=int(cycles.max()),
                           max_display_latency_ms=max(latencies, default=0))

    @staticmethod
    def _throughput(timing: TimingStats) -> Throughput:
        if not timing.mean_cycle_ms:
            return Throughput()
        per_hour = 3_600_000 / timing.mean_cycle_ms
        low_s, high_s = MANUAL_CYCLE_RANGE_S
        manual = (3600 / high_s, 3600 / low_s)
        return Throughput(voters_per_hour=round(per_hour, 2),
                          manual_voters_per_hour=(round(manual[0], 2), round(manual[1], 2)),
                          speedup_vs_manual=(round(low_s * 1000 / timing.mean_cycle_ms, 2),
                                             round(high_s * 1000 / timing.mean_cycle_ms, 2)))

    def _invariants(self, tally: TallyResult, expected: Optional[dict[int, int]], snapshot: MonitoringSnapshot,
                    auth: AuthStats, timing: TimingStats) -> dict[str, InvariantCheck]:
        checks: dict[str, InvariantCheck] = {}

        checks["auth_accuracy"] = InvariantCheck(
            ok=auth.false_accepts == 0 and auth.false_rejects == 0,
            detail=f"false accepts {auth.false_accepts}, false rejects {auth.false_rejects}")
        checks["double_votes_denied"] = InvariantCheck(
            ok=auth.double_votes_denied == auth.double_vote_attempts,
            detail=f"{auth.double_votes_denied}/{auth.double_vote_attempts} denied")

        per_device_dupes = 0
        for rt in self.devices:
            uids = [parse_vote_packet(decrypt_packet(self.vote_key, e.iv, e.ciphertext)).uid
                    for e in rt.log.entries()]
            per_device_dupes += len(uids) - len(set(uids))
        checks["one_vote_per_uid_per_device"] = InvariantCheck(
            ok=per_device_dupes == 0, detail=f"{per_device_dupes} repeated uids in local logs")

        committed = Counter((rt.device_id, e.seq_no, e.ciphertext) for rt in self.devices for e in rt.log.entries())
        received = Counter((d, seq, e.ciphertext) for (d, seq), e in self.server.accepted.items())
        checks["no_loss_no_duplication"] = InvariantCheck(
            ok=committed == received,
            detail=f"committed {sum(committed.values())}, accepted {sum(received.values())}")

        accepted = len(self.server.accepted)
        checks["tally_conservation"] = InvariantCheck(
            ok=tally.total_counted + len(tally.excluded) == accepted,
            detail=f"{tally.total_counted} counted + {len(tally.excluded)} excluded = {accepted} accepted")
        if expected is not None:
            checks["tally_matches_intent"] = InvariantCheck(ok=tally.counts == expected,
                                                            detail=f"expected {expected}")

        broken = [rt.device_id.hex() for rt in self.devices if not verify_chain(rt.log, rt.device_key).ok]
        findings = self.server.audit()
        checks["chains_verify"] = InvariantCheck(
            ok=not broken and not findings,
            detail=f"local failures {broken}, server audit findings {len(findings)}")

        lagging = [rt.device_id.hex() for rt in self.devices
                   if rt.journal.head != self.server.head_seq(rt.device_id)]
        checks["journal_matches_server"] = InvariantCheck(ok=not lagging, detail=f"lagging {lagging}")

        checks["display_latency"] = InvariantCheck(
            ok=timing.max_display_latency_ms <= DISPLAY_LATENCY_BUDGET_MS,
            detail=f"max {timing.max_display_latency_ms} ms, budget {DISPLAY_LATENCY_BUDGET_MS} ms")
        checks["monitoring_consistent"] = InvariantCheck(
            ok=snapshot.votes_received <= snapshot.turnout,
            detail=f"received {snapshot.votes_received}, turnout {snapshot.turnout}")
        return checks

    def _report(self, poll_close: int) -> ScenarioReport:
        tally = self.server.tally(self.config.ballot)
        self.server.detect_anomalies()
        snapshot = self.server.snapshot()
        expected = self._expected_tally()
        auth = self._auth_stats()
        timing = self._timing()
        return ScenarioReport(
            name=self.config.name,
            seed=self.config.seed,
            votes_committed=sum(len(rt.log) for rt in self.devices),
            poll_close_ms=poll_close,
            finished_at_ms=self.clock.now,
            tally=tally,
            expected_tally=expected,
            snapshot=snapshot,
            sync_reports={rt.device_id.hex(): rt.sync_reports for rt in self.devices},
            timing=timing,
            auth=auth,
            throughput=self._throughput(timing),
            invariants=self._invariants(tally, expected, snapshot, auth, timing),
        )


# ---------------------------------------------------------
# 5. PUBLIC API
# ---------------------------------------------------------
def run_scenario(config: Union[ScenarioConfig, dict, str],
                 work_dir: Optional[Union[str, Path]] = None) -> ScenarioReport:
    """Validates the config (ConfigError before any simulation step) and runs it."""
    return ScenarioRunner(validate_scenario(config), work_dir).run()


def replay_check(config: Union[ScenarioConfig, dict, str]) -> bool:
    """True iff two runs of the same config produce byte-identical reports."""
    config = validate_scenario(config)
    first = run_scenario(config).to_json()
    second = run_scenario(config).to_json()
    if first != second:
        logger.error("Replay of %s diverged", config.name)
    return first == second
