"""
WORM Log - append-only, hash-chained, device-MAC'd vote log and the separate
sync journal that maps acknowledged sequence ranges to batch ids.

Log file (little-endian):
    "BVL1" ∥ device_id(8)
    { record_len:u32 ∥ seq_no:u32 ∥ timestamp:u64 ∥ iv(16) ∥ ct_len:u16 ∥ ciphertext
      ∥ prev_hash(32) ∥ entry_hash(32) ∥ mac(32) }*

Journal file:
    "BVJ1" ∥ { batch_id:u32 ∥ first_seq:u32 ∥ last_seq:u32 ∥ acked_at:u64 ∥ checksum(32) }*
    A record with acked_at = 2^64-1 pins the range of a batch that was sent but
    not yet acknowledged; the acknowledged record for that range comes later.

Only an incomplete final record is treated as a crash artifact and healed on
open. Anything wrong before it is tampering.
"""

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Union

from config import LOG_FSYNC, get_logger
from crypto_engine import (
    BLOCK_SIZE,
    DIGEST_SIZE,
    ZERO_DIGEST,
    Aes128Key,
    Digest256,
    chain_hash,
    checksum,
    device_mac,
    verify_device_mac,
)
from errors import ContractError, JournalCorrupt, MalformedPacket, StorageError, TamperedError

logger = get_logger("voting.wormlog")

LOG_MAGIC = b"BVL1"
JOURNAL_MAGIC = b"BVJ1"
DEVICE_ID_SIZE = 8
LOG_HEADER_SIZE = len(LOG_MAGIC) + DEVICE_ID_SIZE

_ENTRY_HEAD = struct.Struct("<IQ")       # seq_no, timestamp
_CT_LEN = struct.Struct("<H")
_PREFIX_SIZE = _ENTRY_HEAD.size + BLOCK_SIZE + _CT_LEN.size
_SUFFIX_SIZE = 3 * DIGEST_SIZE
RECORD_OVERHEAD = _PREFIX_SIZE + _SUFFIX_SIZE
MAX_CIPHERTEXT = 0xFFFF - 0xFFFF % BLOCK_SIZE

_JOURNAL_RECORD = struct.Struct("<IIIQ")
JOURNAL_RECORD_SIZE = _JOURNAL_RECORD.size + DIGEST_SIZE
PENDING_ACKED_AT = 0xFFFF_FFFF_FFFF_FFFF   # acked_at of a sent, unacknowledged range


def validate_device_id(device_id: bytes) -> bytes:
    if not isinstance(device_id, (bytes, bytearray)) or len(device_id) != DEVICE_ID_SIZE:
        raise ContractError(f"device_id must be exactly {DEVICE_ID_SIZE} bytes")
    return bytes(device_id)


# ---------------------------------------------------------
# 1. ENTRIES
# ---------------------------------------------------------
@dataclass(frozen=True)
class LogEntry:
    device_id: bytes
    seq_no: int
    timestamp: int
    iv: bytes
    ciphertext: bytes
    prev_hash: Digest256
    entry_hash: Digest256
    mac: Digest256

    def hashed_bytes(self) -> bytes:
        return hashed_bytes(self.device_id, self.seq_no, self.timestamp, self.iv, self.ciphertext)

    def body(self) -> bytes:
        """Record layout without the record_len prefix; also the wire layout."""
        return (
            _ENTRY_HEAD.pack(self.seq_no, self.timestamp) + self.iv
            + _CT_LEN.pack(len(self.ciphertext)) + self.ciphertext
            + self.prev_hash + self.entry_hash + self.mac
        )

    def record(self) -> bytes:
        body = self.body()
        return struct.pack("<I", len(body)) + body

    def verify(self, device_key: Aes128Key) -> Optional[str]:
        """Returns None when the entry is self-consistent, else the reason."""
        if chain_hash(self.prev_hash, self.hashed_bytes()) != self.entry_hash:
            return "entry hash mismatch"
        if not verify_device_mac(device_key, self.entry_hash, self.mac):
            return "device MAC mismatch"
        return None


def hashed_bytes(device_id: bytes, seq_no: int, timestamp: int, iv: bytes, ciphertext: bytes) -> bytes:
    return device_id + _ENTRY_HEAD.pack(seq_no, timestamp) + iv + _CT_LEN.pack(len(ciphertext)) + ciphertext


def make_entry(device_id: bytes, seq_no: int, timestamp: int, iv: bytes, ciphertext: bytes,
               prev_hash: Digest256, device_key: Aes128Key) -> LogEntry:
    entry_hash = chain_hash(prev_hash, hashed_bytes(device_id, seq_no, timestamp, iv, ciphertext))
    return LogEntry(
        device_id=device_id, seq_no=seq_no, timestamp=timestamp, iv=bytes(iv),
        ciphertext=bytes(ciphertext), prev_hash=prev_hash, entry_hash=entry_hash,
        mac=device_mac(device_key, entry_hash),
    )


def parse_entry_body(device_id: bytes, body: bytes) -> LogEntry:
    """Parses one serialized entry (no record_len). Raises MalformedPacket."""
    if len(body) < RECORD_OVERHEAD:
        raise MalformedPacket(f"entry body too short ({len(body)} bytes)")
    seq_no, timestamp = _ENTRY_HEAD.unpack_from(body, 0)
    iv = bytes(body[_ENTRY_HEAD.size:_ENTRY_HEAD.size + BLOCK_SIZE])
    (ct_len,) = _CT_LEN.unpack_from(body, _ENTRY_HEAD.size + BLOCK_SIZE)
    if len(body) != RECORD_OVERHEAD + ct_len:
        raise MalformedPacket(f"entry length {len(body)} does not match ciphertext length {ct_len}")
    offset = _PREFIX_SIZE
    ciphertext = bytes(body[offset:offset + ct_len])
    offset += ct_len
    prev_hash, entry_hash, mac = (
        Digest256(bytes(body[offset + i * DIGEST_SIZE:offset + (i + 1) * DIGEST_SIZE])) for i in range(3)
    )
    return LogEntry(device_id, seq_no, timestamp, iv, ciphertext, prev_hash, entry_hash, mac)


# ---------------------------------------------------------
# 2. STORAGE BACK ENDS
# ---------------------------------------------------------
class Storage(Protocol):
    def read_all(self) -> bytes: ...
    def append(self, data: bytes) -> None: ...
    def truncate(self, size: int) -> None: ...


class MemoryStorage:
    """In-memory byte store. `fail_next_writes` makes the next N appends fail."""

    def __init__(self, data: bytes = b""):
        self._buffer = bytearray(data)
        self.fail_next_writes = 0

    def read_all(self) -> bytes:
        return bytes(self._buffer)

    def append(self, data: bytes) -> None:
        if self.fail_next_writes > 0:
            self.fail_next_writes -= 1
            raise StorageError("injected write failure")
        self._buffer += data

    def truncate(self, size: int) -> None:
        del self._buffer[size:]

    def __len__(self) -> int:
        return len(self._buffer)


class FileStorage:
    """Append-only file. A failed append is rolled back to the previous size."""

    def __init__(self, path: Union[str, Path], fsync: bool = LOG_FSYNC):
        self.path = Path(path)
        self.fsync = fsync
        self.fail_next_writes = 0

    def read_all(self) -> bytes:
        if not self.path.exists():
            return b""
        try:
            return self.path.read_bytes()
        except OSError as e:
            raise StorageError(f"cannot read {self.path}: {e}") from e

    def append(self, data: bytes) -> None:
        size = self.path.stat().st_size if self.path.exists() else 0
        try:
            if self.fail_next_writes > 0:
                self.fail_next_writes -= 1
                # partial write, then the failure
                with open(self.path, "ab") as fh:
                    fh.write(data[:len(data) // 2])
                raise OSError("injected write failure")
            with open(self.path, "ab") as fh:
                fh.write(data)
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
        except OSError as e:
            self.truncate(size)
            raise StorageError(f"append to {self.path} failed: {e}") from e

    def truncate(self, size: int) -> None:
        try:
            with open(self.path, "r+b") as fh:
                fh.truncate(size)
        except FileNotFoundError:
            pass
        except OSError as e:
            raise StorageError(f"cannot truncate {self.path}: {e}") from e


def _as_storage(target) -> Storage:
    if hasattr(target, "read_all"):
        return target
    return FileStorage(target)


# ---------------------------------------------------------
# 3. CHAIN SCAN AND VERIFICATION
# ---------------------------------------------------------
@dataclass(frozen=True)
class ChainOk:
    entry_count: int
    ok: bool = True


@dataclass(frozen=True)
class TamperedAt:
    seq_no: int
    reason: str = ""
    ok: bool = False


ChainVerdict = Union[ChainOk, TamperedAt]


@dataclass
class _Scan:
    entries: list[LogEntry]
    valid_size: int
    failure: Optional[TamperedAt] = None
    torn: bool = False


def _scan(data: bytes, device_key: Aes128Key) -> _Scan:
    device_id = bytes(data[len(LOG_MAGIC):LOG_HEADER_SIZE])
    entries: list[LogEntry] = []
    prev = ZERO_DIGEST
    offset = LOG_HEADER_SIZE

    while offset < len(data):
        seq_no = len(entries)
        remaining = len(data) - offset
        if remaining < 4:
            return _Scan(entries, offset, torn=True)
        (record_len,) = struct.unpack_from("<I", data, offset)
        if remaining < 4 + _PREFIX_SIZE:
            return _Scan(entries, offset, torn=True)
        (ct_len,) = _CT_LEN.unpack_from(data, offset + 4 + _ENTRY_HEAD.size + BLOCK_SIZE)
        if record_len != RECORD_OVERHEAD + ct_len:
            return _Scan(entries, offset, TamperedAt(seq_no, "record length inconsistent"))
        if remaining < 4 + record_len:
            return _Scan(entries, offset, torn=True)

        try:
            entry = parse_entry_body(device_id, data[offset + 4:offset + 4 + record_len])
        except MalformedPacket as e:
            return _Scan(entries, offset, TamperedAt(seq_no, str(e)))
        if entry.seq_no != seq_no:
            return _Scan(entries, offset, TamperedAt(seq_no, f"sequence gap (found {entry.seq_no})"))
        if entry.prev_hash != prev:
            return _Scan(entries, offset, TamperedAt(seq_no, "broken prev-hash link"))
        if not entry.ciphertext or len(entry.ciphertext) % BLOCK_SIZE:
            return _Scan(entries, offset, TamperedAt(seq_no, "ciphertext not block aligned"))
        reason = entry.verify(device_key)
        if reason:
            return _Scan(entries, offset, TamperedAt(seq_no, reason))

        entries.append(entry)
        prev = entry.entry_hash
        offset += 4 + record_len

    return _Scan(entries, offset)


def _read_log_bytes(target) -> bytes:
    if isinstance(target, WormLog):
        data = target.storage.read_all()
    else:
        path = Path(target)
        try:
            data = path.read_bytes()
        except OSError as e:
            raise StorageError(f"cannot read log {path}: {e}") from e
    if len(data) < LOG_HEADER_SIZE or data[:len(LOG_MAGIC)] != LOG_MAGIC:
        raise StorageError("missing BVL1 header")
    return data


def verify_chain(log, device_key: Aes128Key) -> ChainVerdict:
    """
    Recomputes every link, entry hash and MAC of a log handle or log file.
    Strict: an incomplete final record is reported at the seq it would have had.
    """
    scan = _scan(_read_log_bytes(log), device_key)
    if scan.failure:
        logger.error("Chain verification failed at seq %d: %s", scan.failure.seq_no, scan.failure.reason)
        return scan.failure
    if scan.torn:
        logger.error("Chain verification failed at seq %d: incomplete final record", len(scan.entries))
        return TamperedAt(len(scan.entries), "incomplete final record")
    return ChainOk(len(scan.entries))


# ---------------------------------------------------------
# 4. LOG HANDLE
# ---------------------------------------------------------
class WormLog:
    """
    Single-writer handle bound to one device id and device key. Entries are
    persisted before append returns; nothing on the handle rewrites them.
    """

    def __init__(self, storage: Storage, device_id: bytes, device_key: Aes128Key, entries: list[LogEntry]):
        self.storage = storage
        self.device_id = device_id
        self._device_key = device_key
        self._entries = entries

    @classmethod
    def open(cls, target, device_key: Aes128Key, device_id: Optional[bytes] = None) -> "WormLog":
        """
        Opens or creates a log at a path or on a storage object. Creating
        requires device_id. A torn final record is truncated away; any other
        damage raises TamperedError.
        """
        storage = _as_storage(target)
        data = storage.read_all()

        if len(data) < LOG_HEADER_SIZE:
            magic_part = data[:len(LOG_MAGIC)]
            if magic_part != LOG_MAGIC[:len(magic_part)]:
                raise StorageError("missing BVL1 header")
            if device_id is None:
                raise ContractError("device_id is required to create a log")
            device_id = validate_device_id(device_id)
            storage.truncate(0)
            storage.append(LOG_MAGIC + device_id)
            logger.info("Created log for device %s", device_id.hex())
            return cls(storage, device_id, device_key, [])

        if data[:len(LOG_MAGIC)] != LOG_MAGIC:
            raise StorageError("missing BVL1 header")
        stored_id = bytes(data[len(LOG_MAGIC):LOG_HEADER_SIZE])
        if device_id is not None and validate_device_id(device_id) != stored_id:
            raise ContractError(f"log belongs to device {stored_id.hex()}, not {device_id.hex()}")

        scan = _scan(data, device_key)
        if scan.failure:
            logger.error("Refusing to open log of %s: %s at seq %d",
                         stored_id.hex(), scan.failure.reason, scan.failure.seq_no)
            raise TamperedError(scan.failure.seq_no, scan.failure.reason)
        if scan.torn:
            logger.warning("Healing torn final record of %s - dropping %d bytes",
                           stored_id.hex(), len(data) - scan.valid_size)
            storage.truncate(scan.valid_size)

        logger.info("Opened log of %s - %d entries", stored_id.hex(), len(scan.entries))
        return cls(storage, stored_id, device_key, scan.entries)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def head_hash(self) -> Digest256:
        return self._entries[-1].entry_hash if self._entries else ZERO_DIGEST

    def entries(self) -> tuple[LogEntry, ...]:
        return tuple(self._entries)

    def entry(self, seq_no: int) -> LogEntry:
        if not 0 <= seq_no < len(self._entries):
            raise ContractError(f"no entry with seq {seq_no}")
        return self._entries[seq_no]

    def append(self, timestamp: int, iv: bytes, ciphertext: bytes) -> int:
        """Chains, tags and persists one entry. Returns its seq_no."""
        if len(iv) != BLOCK_SIZE:
            raise ContractError(f"iv must be {BLOCK_SIZE} bytes")
        if not ciphertext or len(ciphertext) % BLOCK_SIZE or len(ciphertext) > MAX_CIPHERTEXT:
            raise ContractError("ciphertext must be a positive multiple of the block size")
        if not 0 <= timestamp < 2 ** 64:
            raise ContractError("timestamp must fit u64")

        entry = make_entry(self.device_id, len(self._entries), timestamp, iv, ciphertext,
                           self.head_hash, self._device_key)
        self.storage.append(entry.record())
        self._entries.append(entry)
        logger.debug("Appended seq %d on %s", entry.seq_no, self.device_id.hex())
        return entry.seq_no


def append(log: WormLog, device_id: bytes, timestamp: int, iv: bytes, ciphertext: bytes,
           device_key: Aes128Key) -> int:
    """Function form of WormLog.append; device_id and key must match the handle."""
    if bytes(device_id) != log.device_id or bytes(device_key) != bytes(log._device_key):
        raise ContractError("device_id/device_key do not match the open log")
    return log.append(timestamp, iv, ciphertext)


# ---------------------------------------------------------
# 5. SYNC JOURNAL
# ---------------------------------------------------------
@dataclass(frozen=True)
class SyncJournalEntry:
    batch_id: int
    first_seq: int
    last_seq: int
    acked_at: int

    @property
    def is_pending(self) -> bool:
        """Sent under this batch id, not yet acknowledged."""
        return self.acked_at == PENDING_ACKED_AT

    def to_bytes(self) -> bytes:
        packed = _JOURNAL_RECORD.pack(self.batch_id, self.first_seq, self.last_seq, self.acked_at)
        return packed + checksum(packed)

    def same_assignment(self, other: "SyncJournalEntry") -> bool:
        return (self.batch_id, self.first_seq, self.last_seq) == (other.batch_id, other.first_seq, other.last_seq)


class SyncJournal:
    """
    Append-only map from acknowledged seq ranges to batch ids.

    A range is first journaled as pending when its batch is sent, then as
    acknowledged once the server confirms it. Pending ranges pin batch
    boundaries across restarts: a batch is always resent over the same range
    under the same id, whoever builds it.
    """

    def __init__(self, storage: Storage, entries: list[SyncJournalEntry],
                 pending: Optional[list[SyncJournalEntry]] = None):
        self.storage = storage
        self._entries = entries
        self._pending = pending or []

    @classmethod
    def open(cls, target) -> "SyncJournal":
        storage = _as_storage(target)
        data = storage.read_all()
        if len(data) < len(JOURNAL_MAGIC):
            storage.truncate(0)
            storage.append(JOURNAL_MAGIC)
            return cls(storage, [])
        if data[:len(JOURNAL_MAGIC)] != JOURNAL_MAGIC:
            raise JournalCorrupt("missing BVJ1 header")

        journal = cls(storage, [])
        offset = len(JOURNAL_MAGIC)
        records = 0
        while len(data) - offset >= JOURNAL_RECORD_SIZE:
            packed = data[offset:offset + _JOURNAL_RECORD.size]
            if checksum(packed) != data[offset + _JOURNAL_RECORD.size:offset + JOURNAL_RECORD_SIZE]:
                raise JournalCorrupt(f"journal record {records} checksum mismatch")
            journal._apply(SyncJournalEntry(*_JOURNAL_RECORD.unpack(packed)))
            offset += JOURNAL_RECORD_SIZE
            records += 1
        if offset < len(data):
            logger.warning("Healing torn journal record - dropping %d bytes", len(data) - offset)
            storage.truncate(offset)
        return journal

    @property
    def head(self) -> int:
        """Highest acknowledged seq_no, -1 when nothing is acknowledged."""
        return self._entries[-1].last_seq if self._entries else -1

    @property
    def frontier(self) -> int:
        """Highest seq_no sent under a batch id, acknowledged or not."""
        return self._pending[-1].last_seq if self._pending else self.head

    @property
    def next_batch_id(self) -> int:
        return len(self._entries)

    def entries(self) -> tuple[SyncJournalEntry, ...]:
        return tuple(self._entries)

    def pending(self) -> tuple[SyncJournalEntry, ...]:
        """Sent but unacknowledged ranges, oldest first."""
        return tuple(self._pending)

    def _apply(self, entry: SyncJournalEntry) -> None:
        if entry.is_pending:
            self._check_pending(entry)
        else:
            self._check_next(entry)
        self._push(entry)

    def _push(self, entry: SyncJournalEntry) -> None:
        if entry.is_pending:
            self._pending.append(entry)
            return
        self._entries.append(entry)
        if self._pending:
            self._pending.pop(0)

    def _check_range(self, entry: SyncJournalEntry, batch_id: int, after: int) -> None:
        if entry.last_seq < entry.first_seq:
            raise JournalCorrupt(f"batch {entry.batch_id} has an empty range")
        if entry.batch_id != batch_id:
            raise JournalCorrupt(f"batch {entry.batch_id} out of order (expected {batch_id})")
        if entry.first_seq != after + 1:
            kind = "gap" if entry.first_seq > after + 1 else "overlap"
            raise JournalCorrupt(f"batch {entry.batch_id} range {entry.first_seq}..{entry.last_seq} "
                                 f"leaves a {kind} after seq {after}")

    def _check_next(self, entry: SyncJournalEntry) -> None:
        self._check_range(entry, self.next_batch_id, self.head)
        if self._pending and not self._pending[0].same_assignment(entry):
            sent = self._pending[0]
            raise JournalCorrupt(f"batch {entry.batch_id} acked as {entry.first_seq}..{entry.last_seq} "
                                 f"but was sent as {sent.first_seq}..{sent.last_seq}")

    def _check_pending(self, entry: SyncJournalEntry) -> None:
        self._check_range(entry, self.next_batch_id + len(self._pending), self.frontier)

    def record_pending(self, batch_id: int, first_seq: int, last_seq: int) -> "SyncJournal":
        """Durably pins a batch's range before it is first sent. Repeats are no-ops."""
        entry = SyncJournalEntry(batch_id, first_seq, last_seq, PENDING_ACKED_AT)
        if any(p.same_assignment(entry) for p in self._pending):
            return self
        self._check_pending(entry)
        self.storage.append(entry.to_bytes())
        self._push(entry)
        logger.debug("Pinned batch %d → seq %d..%d", batch_id, first_seq, last_seq)
        return self

    def record_batch_assignment(self, batch_id: int, first_seq: int, last_seq: int, acked_at: int) -> "SyncJournal":
        """Durably journals an acked range. Repeating an identical assignment is a no-op."""
        if not 0 <= acked_at < PENDING_ACKED_AT:
            raise ContractError("acked_at must fit u64 below the pending marker")
        entry = SyncJournalEntry(batch_id, first_seq, last_seq, acked_at)
        if batch_id < len(self._entries) and self._entries[batch_id].same_assignment(entry):
            return self
        self._check_next(entry)
        self.storage.append(entry.to_bytes())
        self._push(entry)
        logger.debug("Journaled batch %d → seq %d..%d", batch_id, first_seq, last_seq)
        return self


def record_batch_assignment(journal: SyncJournal, batch_id: int, first_seq: int, last_seq: int,
                            acked_at: int) -> SyncJournal:
    return journal.record_batch_assignment(batch_id, first_seq, last_seq, acked_at)


def read_unsynced(log: WormLog, journal: SyncJournal) -> list[LogEntry]:
    """Entries after the journal head, in seq order."""
    if journal.frontier >= len(log):
        raise JournalCorrupt(f"journal covers seq {journal.frontier}, beyond the log ({len(log)} entries)")
    return list(log.entries()[journal.head + 1:])
