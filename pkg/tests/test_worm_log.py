"""
Tests for the append-only vote log and the sync journal: persistence,
chain verification, tamper detection, torn-write healing.
"""

import sys
import os

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src', 'voting'))

from crypto_engine import encrypt_packet
from errors import ContractError, JournalCorrupt, StorageError, TamperedError
from voting_terminal import build_vote_packet
from worm_log import (
    LOG_HEADER_SIZE,
    RECORD_OVERHEAD,
    ChainOk,
    FileStorage,
    MemoryStorage,
    SyncJournal,
    TamperedAt,
    WormLog,
    append,
    read_unsynced,
    record_batch_assignment,
    verify_chain,
)

VOTE_KEY = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
DEVICE_KEY = bytes.fromhex("a0a1a2a3a4a5a6a7a8a9aaabacadaeaf")
DEVICE_ID = bytes.fromhex("0000000000000001")
RECORD_SIZE = 4 + RECORD_OVERHEAD + 16   # one-block ciphertext


def _fill(log: WormLog, count: int, seed: int = 0) -> None:
    rng = np.random.default_rng(seed)
    for i in range(count):
        iv = rng.bytes(16)
        packet = build_vote_packet(i.to_bytes(4, "big"), i % 3 + 1, 1000 * i)
        log.append(1000 * i, iv, encrypt_packet(VOTE_KEY, iv, packet))


def _file_log(tmp_path, count: int):
    path = tmp_path / "device.bvl"
    log = WormLog.open(path, DEVICE_KEY, DEVICE_ID)
    _fill(log, count)
    return path, log


# ---------------------------------------------------------
# TEST 1: Append, reopen, verify
# ---------------------------------------------------------
def test_entries_survive_reopen(tmp_path):
    path, log = _file_log(tmp_path, 5)
    reopened = WormLog.open(path, DEVICE_KEY)
    assert len(reopened) == 5
    assert reopened.device_id == DEVICE_ID
    assert reopened.entries() == log.entries()
    assert reopened.head_hash == log.head_hash


def test_seq_numbers_and_links(tmp_path):
    _, log = _file_log(tmp_path, 4)
    entries = log.entries()
    assert [e.seq_no for e in entries] == [0, 1, 2, 3]
    assert entries[0].prev_hash == bytes(32)
    for prev, entry in zip(entries, entries[1:]):
        assert entry.prev_hash == prev.entry_hash
    assert all(e.verify(DEVICE_KEY) is None for e in entries)


def test_verify_chain_ok(tmp_path):
    path, log = _file_log(tmp_path, 10)
    assert verify_chain(path, DEVICE_KEY) == ChainOk(10)
    assert verify_chain(log, DEVICE_KEY) == ChainOk(10)


def test_empty_log_verifies(tmp_path):
    path = tmp_path / "empty.bvl"
    WormLog.open(path, DEVICE_KEY, DEVICE_ID)
    assert path.stat().st_size == LOG_HEADER_SIZE
    assert verify_chain(path, DEVICE_KEY) == ChainOk(0)


def test_wrong_device_key_fails_verification(tmp_path):
    path, _ = _file_log(tmp_path, 3)
    verdict = verify_chain(path, bytes(16))
    assert isinstance(verdict, TamperedAt) and verdict.seq_no == 0
    with pytest.raises(TamperedError):
        WormLog.open(path, bytes(16))


def test_same_inputs_build_byte_identical_logs():
    first, second, other = MemoryStorage(), MemoryStorage(), MemoryStorage()
    for storage in (first, second):
        _fill(WormLog.open(storage, DEVICE_KEY, DEVICE_ID), 20, seed=4)
    _fill(WormLog.open(other, DEVICE_KEY, DEVICE_ID), 20, seed=5)
    assert first.read_all() == second.read_all()
    assert first.read_all() != other.read_all()


def test_ten_thousand_entries():
    storage = MemoryStorage()
    log = WormLog.open(storage, DEVICE_KEY, DEVICE_ID)
    rng = np.random.default_rng(9)
    for i in range(10_000):
        log.append(i, rng.bytes(16), rng.bytes(16))
    reopened = WormLog.open(MemoryStorage(storage.read_all()), DEVICE_KEY)
    assert len(reopened) == 10_000
    assert verify_chain(reopened, DEVICE_KEY) == ChainOk(10_000)


# ---------------------------------------------------------
# TEST 2: Tamper evidence
# ---------------------------------------------------------
def test_every_flipped_body_byte_is_detected(tmp_path):
    path, _ = _file_log(tmp_path, 50)
    original = path.read_bytes()
    assert len(original) == LOG_HEADER_SIZE + 50 * RECORD_SIZE

    damaged_path = tmp_path / "damaged.bvl"
    for offset in range(LOG_HEADER_SIZE, len(original)):
        damaged = bytearray(original)
        damaged[offset] ^= 0xFF
        damaged_path.write_bytes(bytes(damaged))
        verdict = verify_chain(damaged_path, DEVICE_KEY)
        assert not verdict.ok, f"flip at byte {offset} went unnoticed"
        assert verdict.seq_no == (offset - LOG_HEADER_SIZE) // RECORD_SIZE


def test_device_id_in_header_is_bound(tmp_path):
    path, _ = _file_log(tmp_path, 2)
    data = bytearray(path.read_bytes())
    data[5] ^= 0x01
    path.write_bytes(bytes(data))
    assert verify_chain(path, DEVICE_KEY) == TamperedAt(0, "entry hash mismatch")


def test_tampered_log_refuses_to_open(tmp_path):
    path, _ = _file_log(tmp_path, 3)
    data = bytearray(path.read_bytes())
    data[LOG_HEADER_SIZE + RECORD_SIZE + 40] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(TamperedError) as exc:
        WormLog.open(path, DEVICE_KEY)
    assert exc.value.seq_no == 1


def test_missing_header(tmp_path):
    path = tmp_path / "junk.bvl"
    path.write_bytes(b"JUNK" + bytes(20))
    with pytest.raises(StorageError):
        verify_chain(path, DEVICE_KEY)
    with pytest.raises(StorageError):
        WormLog.open(path, DEVICE_KEY, DEVICE_ID)


# ---------------------------------------------------------
# TEST 3: Torn writes and truncation
# ---------------------------------------------------------
def test_torn_tail_is_reported_then_healed(tmp_path):
    path, _ = _file_log(tmp_path, 5)
    data = path.read_bytes()
    path.write_bytes(data[:-30])

    assert verify_chain(path, DEVICE_KEY) == TamperedAt(4, "incomplete final record")
    healed = WormLog.open(path, DEVICE_KEY)
    assert len(healed) == 4
    assert path.stat().st_size == len(data) - RECORD_SIZE
    _fill(healed, 1, seed=3)
    assert verify_chain(path, DEVICE_KEY) == ChainOk(5)


def test_torn_tail_at_every_offset_heals_to_the_pre_append_state(tmp_path):
    path, log = _file_log(tmp_path, 4)
    before = path.read_bytes()
    entries_before, head_before = log.entries(), log.head_hash
    _fill(log, 1, seed=3)
    full = path.read_bytes()
    assert len(full) == len(before) + RECORD_SIZE

    torn = tmp_path / "torn.bvl"
    for kept in range(1, RECORD_SIZE):
        torn.write_bytes(full[:len(before) + kept])
        assert verify_chain(torn, DEVICE_KEY) == TamperedAt(4, "incomplete final record"), kept
        healed = WormLog.open(torn, DEVICE_KEY)
        assert healed.entries() == entries_before
        assert healed.head_hash == head_before
        assert torn.read_bytes() == before, f"heal after {kept} bytes left a different file"


def test_removed_final_record_shortens_the_chain(tmp_path):
    path, _ = _file_log(tmp_path, 5)
    path.write_bytes(path.read_bytes()[:-RECORD_SIZE])
    # undetectable from the log alone; the sync journal catches it
    assert verify_chain(path, DEVICE_KEY) == ChainOk(4)


def test_torn_header_recreates_the_log(tmp_path):
    path = tmp_path / "torn.bvl"
    path.write_bytes(b"BVL")
    log = WormLog.open(path, DEVICE_KEY, DEVICE_ID)
    assert len(log) == 0
    assert path.stat().st_size == LOG_HEADER_SIZE


def test_failed_file_append_is_rolled_back(tmp_path):
    path = tmp_path / "device.bvl"
    storage = FileStorage(path, fsync=False)
    log = WormLog.open(storage, DEVICE_KEY, DEVICE_ID)
    _fill(log, 2)
    size = path.stat().st_size

    storage.fail_next_writes = 1
    with pytest.raises(StorageError):
        log.append(5000, bytes(16), bytes(16))
    assert path.stat().st_size == size
    assert len(log) == 2

    log.append(5000, bytes(16), bytes(16))
    assert verify_chain(path, DEVICE_KEY) == ChainOk(3)


# ---------------------------------------------------------
# TEST 4: Append contract
# ---------------------------------------------------------
def test_create_requires_device_id():
    with pytest.raises(ContractError):
        WormLog.open(MemoryStorage(), DEVICE_KEY)


def test_device_id_mismatch(tmp_path):
    path, _ = _file_log(tmp_path, 1)
    with pytest.raises(ContractError):
        WormLog.open(path, DEVICE_KEY, bytes.fromhex("0000000000000002"))


@pytest.mark.parametrize("iv,ciphertext", [(bytes(15), bytes(16)), (bytes(16), b""), (bytes(16), bytes(17))])
def test_append_rejects_bad_shapes(iv, ciphertext):
    log = WormLog.open(MemoryStorage(), DEVICE_KEY, DEVICE_ID)
    with pytest.raises(ContractError):
        log.append(0, iv, ciphertext)
    assert len(log) == 0


def test_function_append_checks_identity():
    log = WormLog.open(MemoryStorage(), DEVICE_KEY, DEVICE_ID)
    assert append(log, DEVICE_ID, 1, bytes(16), bytes(16), DEVICE_KEY) == 0
    with pytest.raises(ContractError):
        append(log, DEVICE_ID, 2, bytes(16), bytes(16), bytes(16))


# ---------------------------------------------------------
# TEST 5: Sync journal
# ---------------------------------------------------------
def test_journal_records_and_reopens(tmp_path):
    path = tmp_path / "device.bvj"
    journal = SyncJournal.open(path)
    assert journal.head == -1
    record_batch_assignment(journal, 0, 0, 19, 100)
    journal.record_batch_assignment(1, 20, 24, 200)
    reopened = SyncJournal.open(path)
    assert reopened.head == 24
    assert reopened.next_batch_id == 2
    assert [e.batch_id for e in reopened.entries()] == [0, 1]


def test_identical_assignment_is_a_no_op(tmp_path):
    path = tmp_path / "device.bvj"
    journal = SyncJournal.open(path)
    journal.record_batch_assignment(0, 0, 9, 100)
    size = path.stat().st_size
    journal.record_batch_assignment(0, 0, 9, 999)
    assert path.stat().st_size == size
    assert len(journal.entries()) == 1


@pytest.mark.parametrize("batch_id,first,last", [(1, 11, 20), (1, 5, 20), (0, 0, 5), (1, 10, 9), (3, 10, 20)])
def test_journal_rejects_gaps_and_overlaps(batch_id, first, last):
    journal = SyncJournal.open(MemoryStorage())
    journal.record_batch_assignment(0, 0, 9, 1)
    with pytest.raises(JournalCorrupt):
        journal.record_batch_assignment(batch_id, first, last, 2)
    assert journal.head == 9


def test_journal_torn_record_is_healed(tmp_path):
    path = tmp_path / "device.bvj"
    journal = SyncJournal.open(path)
    journal.record_batch_assignment(0, 0, 9, 1)
    journal.record_batch_assignment(1, 10, 19, 2)
    path.write_bytes(path.read_bytes()[:-7])
    reopened = SyncJournal.open(path)
    assert reopened.head == 9


def test_journal_checksum_mismatch(tmp_path):
    path = tmp_path / "device.bvj"
    SyncJournal.open(path).record_batch_assignment(0, 0, 9, 1)
    data = bytearray(path.read_bytes())
    data[10] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(JournalCorrupt):
        SyncJournal.open(path)


def test_read_unsynced(tmp_path):
    _, log = _file_log(tmp_path, 8)
    journal = SyncJournal.open(MemoryStorage())
    assert [e.seq_no for e in read_unsynced(log, journal)] == list(range(8))
    journal.record_batch_assignment(0, 0, 4, 1)
    assert [e.seq_no for e in read_unsynced(log, journal)] == [5, 6, 7]
    journal.record_batch_assignment(1, 5, 7, 2)
    assert read_unsynced(log, journal) == []


def test_journal_ahead_of_log(tmp_path):
    _, log = _file_log(tmp_path, 3)
    journal = SyncJournal.open(MemoryStorage())
    journal.record_batch_assignment(0, 0, 5, 1)
    with pytest.raises(JournalCorrupt):
        read_unsynced(log, journal)


def test_pending_range_survives_reopen(tmp_path):
    path = tmp_path / "device.bvj"
    journal = SyncJournal.open(path)
    journal.record_pending(0, 0, 4)
    reopened = SyncJournal.open(path)
    assert reopened.head == -1
    assert reopened.frontier == 4
    assert [(p.batch_id, p.first_seq, p.last_seq) for p in reopened.pending()] == [(0, 0, 4)]

    reopened.record_batch_assignment(0, 0, 4, 7)
    assert reopened.pending() == ()
    again = SyncJournal.open(path)
    assert (again.head, again.next_batch_id, again.pending()) == (4, 1, ())


def test_repeated_pending_range_is_a_no_op(tmp_path):
    path = tmp_path / "device.bvj"
    journal = SyncJournal.open(path)
    journal.record_pending(0, 0, 4)
    journal.record_pending(1, 5, 9)
    size = path.stat().st_size
    journal.record_pending(0, 0, 4)
    assert path.stat().st_size == size
    assert len(journal.pending()) == 2


def test_ack_must_match_the_pinned_range():
    journal = SyncJournal.open(MemoryStorage())
    journal.record_pending(0, 0, 4)
    with pytest.raises(JournalCorrupt):
        journal.record_batch_assignment(0, 0, 9, 1)
    assert journal.head == -1
    assert len(journal.pending()) == 1


@pytest.mark.parametrize("batch_id,first,last", [(1, 6, 9), (1, 3, 9), (2, 5, 9), (0, 0, 4), (1, 5, 4)])
def test_pending_ranges_stay_contiguous(batch_id, first, last):
    journal = SyncJournal.open(MemoryStorage())
    journal.record_pending(0, 0, 4)
    journal.record_batch_assignment(0, 0, 4, 1)
    with pytest.raises(JournalCorrupt):
        journal.record_pending(batch_id, first, last)
    assert journal.pending() == ()


def test_pending_range_beyond_log(tmp_path):
    _, log = _file_log(tmp_path, 3)
    journal = SyncJournal.open(MemoryStorage())
    journal.record_pending(0, 0, 3)
    with pytest.raises(JournalCorrupt):
        read_unsynced(log, journal)
