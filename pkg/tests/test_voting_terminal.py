"""
Tests for the terminal session machine, vote packets and telemetry.

The clock is a plain object whose `now` the tests move by hand, so every
timestamp below is exact.
"""

import sys
import os

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src', 'voting'))

from card_auth import AuthResult, CardImage, issue_card, new_registry
from crypto_engine import IvGenerator, decrypt_packet
from errors import ContractError, MalformedPacket
from voting_terminal import (
    MSG_AUTHENTICATED,
    MSG_DENIED,
    MSG_RECORDED,
    AppendEntry,
    AwaitingConfirmation,
    AwaitingSelection,
    Ballot,
    Cancel,
    CardPresented,
    Committed,
    Confirm,
    Denied,
    Display,
    Idle,
    MarkVoted,
    RecordCycle,
    SelectCandidate,
    StepDurations,
    TerminalContext,
    TerminalTelemetry,
    Tick,
    VotingTerminal,
    build_vote_packet,
    commit_vote,
    handle_event,
    parse_vote_packet,
)
from worm_log import MemoryStorage, WormLog

CARD_KEY = bytes.fromhex("000102030405060708090a0b0c0d0e0f")
VOTE_KEY = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
REGISTRY_KEY = bytes.fromhex("00112233445566778899aabbccddeeff")
DEVICE_KEY = bytes.fromhex("a0a1a2a3a4a5a6a7a8a9aaabacadaeaf")
DEVICE_ID = bytes.fromhex("0000000000000001")
VOTER = bytes.fromhex("a1b2c3d4")
BALLOT = Ballot.model_validate({"candidates": [
    {"candidate_id": 1, "name": "Candidate A"},
    {"candidate_id": 2, "name": "Candidate B"},
    {"candidate_id": 3, "name": "Candidate C"},
]})


class ManualClock:
    def __init__(self, now: int = 0):
        self.now = now


def _terminal(storage=None):
    clock = ManualClock()
    log = WormLog.open(storage or MemoryStorage(), DEVICE_KEY, DEVICE_ID)
    ctx = TerminalContext(
        device_id=DEVICE_ID,
        registry=new_registry([VOTER, bytes.fromhex("01020304")], REGISTRY_KEY),
        ballot=BALLOT,
        card_key=CARD_KEY,
        vote_key=VOTE_KEY,
        clock=clock,
        log=log,
        iv_source=IvGenerator(0),
    )
    return VotingTerminal(ctx), clock, log


def _vote(terminal, clock, card, index=0, start=0):
    """Drives one full cycle with the default step durations starting at `start`."""
    steps = StepDurations()
    clock.now = start + steps.card_read_ms
    terminal.dispatch(CardPresented(card))
    clock.now += steps.auth_ms + steps.selection_ms
    terminal.dispatch(SelectCandidate(index))
    clock.now += steps.confirmation_ms
    return terminal.dispatch(Confirm())


# ---------------------------------------------------------
# TEST 1: Full voting cycle
# ---------------------------------------------------------
def test_happy_path_commits_one_vote():
    terminal, clock, log = _terminal()
    effects = _vote(terminal, clock, issue_card(VOTER, CARD_KEY), index=1)

    assert [type(e) for e in effects] == [AppendEntry, MarkVoted, Display, RecordCycle]
    assert isinstance(terminal.state, Committed)
    assert len(log) == 1
    assert VOTER in terminal.ctx.registry.voted_uids()
    assert terminal.screen == [MSG_AUTHENTICATED, MSG_RECORDED]

    entry = log.entry(0)
    packet = parse_vote_packet(decrypt_packet(VOTE_KEY, entry.iv, entry.ciphertext))
    assert packet.uid == VOTER
    assert packet.candidate_id == 2
    assert packet.timestamp == 11_300


def test_cycle_time_is_sum_of_steps():
    terminal, clock, _ = _terminal()
    effects = _vote(terminal, clock, issue_card(VOTER, CARD_KEY))
    cycle = [e for e in effects if isinstance(e, RecordCycle)][0]
    assert StepDurations().total_ms == 11_500
    assert cycle.duration_ms == 11_500
    assert terminal.telemetry.cycle_times == [11_500]


def test_display_latencies_within_budget():
    terminal, clock, _ = _terminal()
    _vote(terminal, clock, issue_card(VOTER, CARD_KEY))
    assert terminal.telemetry.display_latencies
    assert max(terminal.telemetry.display_latencies) <= 300


def test_committed_returns_to_idle_after_dwell():
    terminal, clock, _ = _terminal()
    _vote(terminal, clock, issue_card(VOTER, CARD_KEY))
    until = terminal.state.until
    terminal.dispatch(Tick(until - 1))
    assert isinstance(terminal.state, Committed)
    terminal.dispatch(Tick(until))
    assert isinstance(terminal.state, Idle)


# ---------------------------------------------------------
# TEST 2: Denials
# ---------------------------------------------------------
def test_unknown_voter_is_denied():
    terminal, clock, log = _terminal()
    clock.now = 1100
    terminal.dispatch(CardPresented(issue_card(bytes.fromhex("deadbeef"), CARD_KEY)))
    assert isinstance(terminal.state, Denied)
    assert terminal.state.reason is AuthResult.UNKNOWN_VOTER
    assert terminal.screen == [MSG_DENIED]
    assert len(log) == 0


def test_forged_token_is_denied():
    terminal, clock, _ = _terminal()
    genuine = issue_card(VOTER, CARD_KEY)
    terminal.dispatch(CardPresented(CardImage(bytes.fromhex("a1b2c3d5"), genuine.token)))
    assert terminal.state.reason is AuthResult.INVALID_TOKEN
    assert terminal.telemetry.auth_failure == 1


def test_second_presentation_is_already_voted():
    terminal, clock, log = _terminal()
    card = issue_card(VOTER, CARD_KEY)
    _vote(terminal, clock, card)
    clock.now = terminal.state.until
    terminal.dispatch(CardPresented(card))
    assert isinstance(terminal.state, Denied)
    assert terminal.state.reason is AuthResult.ALREADY_VOTED
    assert terminal.screen[-1] == MSG_DENIED
    assert len(log) == 1
    assert terminal.telemetry.auth_outcomes[AuthResult.ALREADY_VOTED.value] == 1


# ---------------------------------------------------------
# TEST 3: Selection, cancel and timeouts
# ---------------------------------------------------------
def test_invalid_selection_keeps_prompt():
    terminal, clock, _ = _terminal()
    terminal.dispatch(CardPresented(issue_card(VOTER, CARD_KEY)))
    effects = terminal.dispatch(SelectCandidate(7))
    assert isinstance(terminal.state, AwaitingSelection)
    assert effects == [Display(MSG_AUTHENTICATED)]


def test_cancel_returns_to_selection():
    terminal, clock, log = _terminal()
    terminal.dispatch(CardPresented(issue_card(VOTER, CARD_KEY)))
    terminal.dispatch(SelectCandidate(0))
    assert isinstance(terminal.state, AwaitingConfirmation)
    terminal.dispatch(Cancel())
    assert isinstance(terminal.state, AwaitingSelection)
    terminal.dispatch(SelectCandidate(2))
    terminal.dispatch(Confirm())
    packet = parse_vote_packet(decrypt_packet(VOTE_KEY, log.entry(0).iv, log.entry(0).ciphertext))
    assert packet.candidate_id == 3


def test_session_timeout_records_nothing():
    terminal, clock, log = _terminal()
    clock.now = 1000
    terminal.dispatch(CardPresented(issue_card(VOTER, CARD_KEY)))
    terminal.dispatch(SelectCandidate(0))
    terminal.dispatch(Tick(1000 + terminal.ctx.session_timeout_ms - 1))
    assert isinstance(terminal.state, AwaitingConfirmation)
    terminal.dispatch(Tick(1000 + terminal.ctx.session_timeout_ms))
    assert isinstance(terminal.state, Idle)
    assert len(log) == 0
    assert terminal.ctx.registry.voted_uids() == set()


def test_confirm_after_timeout_is_ignored():
    terminal, clock, log = _terminal()
    terminal.dispatch(CardPresented(issue_card(VOTER, CARD_KEY)))
    terminal.dispatch(SelectCandidate(0))
    clock.now = terminal.ctx.session_timeout_ms + 1
    assert terminal.dispatch(Confirm()) == []
    assert isinstance(terminal.state, Idle)
    assert len(log) == 0


def test_card_ignored_mid_session():
    terminal, clock, _ = _terminal()
    terminal.dispatch(CardPresented(issue_card(VOTER, CARD_KEY)))
    effects = terminal.dispatch(CardPresented(issue_card(bytes.fromhex("01020304"), CARD_KEY)))
    assert effects == []
    assert terminal.state.uid == VOTER


def test_handle_event_has_no_side_effects():
    terminal, clock, log = _terminal()
    ctx = terminal.ctx
    state, _ = handle_event(Idle(), CardPresented(issue_card(VOTER, CARD_KEY)), ctx)
    state, _ = handle_event(state, SelectCandidate(0), ctx)
    state, effects = handle_event(state, Confirm(), ctx)
    assert isinstance(state, Committed)
    assert any(isinstance(e, AppendEntry) for e in effects)
    assert len(log) == 0
    assert ctx.registry.voted_uids() == set()


# ---------------------------------------------------------
# TEST 4: Storage failure rolls back
# ---------------------------------------------------------
def test_failed_append_leaves_voter_eligible():
    storage = MemoryStorage()
    terminal, clock, log = _terminal(storage)
    terminal.dispatch(CardPresented(issue_card(VOTER, CARD_KEY)))
    terminal.dispatch(SelectCandidate(0))
    storage.fail_next_writes = 1

    assert terminal.dispatch(Confirm()) == []
    assert isinstance(terminal.state, AwaitingConfirmation)
    assert len(log) == 0
    assert terminal.ctx.registry.voted_uids() == set()
    assert terminal.telemetry.storage_failures == 1

    terminal.dispatch(Confirm())
    assert isinstance(terminal.state, Committed)
    assert len(log) == 1


# ---------------------------------------------------------
# TEST 5: Packets and telemetry
# ---------------------------------------------------------
def test_packet_layout():
    packet = build_vote_packet(VOTER, 513, 0x0102030405060708)
    assert packet == b"\x04" + VOTER + b"\x01\x02" + bytes.fromhex("0807060504030201")
    parsed = parse_vote_packet(packet)
    assert (parsed.uid, parsed.candidate_id, parsed.timestamp) == (VOTER, 513, 0x0102030405060708)


def test_packet_ciphertext_sizes():
    terminal, clock, log = _terminal()
    entry = commit_vote(terminal.ctx, VOTER, 1, 5)
    assert len(entry.ciphertext) == 16
    entry = commit_vote(terminal.ctx, bytes(10), 1, 6)
    assert len(entry.ciphertext) == 32


@pytest.mark.parametrize("data", [b"", b"\x04\x01\x02", b"\x05" + bytes(14), b"\x04" + bytes(14) + b"\x00"])
def test_malformed_packets(data):
    with pytest.raises(MalformedPacket):
        parse_vote_packet(data)


def test_commit_rejects_off_ballot_candidate():
    terminal, _, _ = _terminal()
    with pytest.raises(ContractError):
        commit_vote(terminal.ctx, VOTER, 99, 0)


def test_ballot_rejects_duplicate_ids():
    with pytest.raises(ValueError):
        Ballot.model_validate({"candidates": [{"candidate_id": 1, "name": "A"}, {"candidate_id": 1, "name": "B"}]})


def test_telemetry_wire_format():
    terminal, clock, _ = _terminal()
    _vote(terminal, clock, issue_card(VOTER, CARD_KEY))
    wire = terminal.telemetry.to_wire()
    assert len(wire) == 68
    decoded = TerminalTelemetry.from_wire(wire)
    assert decoded.votes_committed == 1
    assert decoded.auth_success == 1
    assert decoded.cycle_total_ms == 11_500

    damaged = bytearray(wire)
    damaged[20] ^= 0xFF
    with pytest.raises(MalformedPacket):
        TerminalTelemetry.from_wire(bytes(damaged))
