"""
Tally Server - central ingest, verification, deduplication, tally, anomaly
detection and the monitoring snapshot.

Ingest checks, in order: manifest framing, manifest checksum, entry parsing,
batch idempotency key (device_id, batch_id), per-entry hash and device MAC,
chain continuity against the stored head. Only then are new entries committed,
all at once. Rejections never touch accepted data; they only add anomalies.

Archive file (little-endian):
    "BVA1" ∥ { device_id(8) ∥ record_len:u32 ∥ entry body }*   in accepted order
"""

import struct
import threading
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from config import get_logger
from crypto_engine import ZERO_DIGEST, Aes128Key, decrypt_packet
from errors import MalformedCiphertext, MalformedPacket, PaddingError, StorageError
from sync_agent import (
    NackReason,
    OutcomeKind,
    UploadOutcome,
    encode_response,
    split_manifest,
)
from voting_terminal import TELEMETRY_MAGIC, Ballot, TerminalTelemetry, parse_vote_packet
from worm_log import DEVICE_ID_SIZE, LogEntry, parse_entry_body

logger = get_logger("voting.server")

ARCHIVE_MAGIC = b"BVA1"
TELEMETRY_ACK = b"\x00"


# ---------------------------------------------------------
# 1. REPORT TYPES
# ---------------------------------------------------------
class AnomalyKind(str, Enum):
    DUPLICATE_UID_ACROSS_DEVICES = "DuplicateUidAcrossDevices"
    CHECKSUM_FAILURE = "ChecksumFailure"
    CHAIN_BREAK = "ChainBreak"
    REPLAYED_BATCH = "ReplayedBatch"
    TIMESTAMP_REGRESSION = "TimestampRegression"


class Anomaly(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: AnomalyKind
    device_id: Optional[str] = Field(default=None, description="Hex device id the evidence belongs to")
    seq_no: Optional[int] = None
    batch_id: Optional[int] = None
    uid: Optional[str] = Field(default=None, description="Hex voter UID, for duplicate-UID anomalies")
    details: str = ""
    detected_at: int = 0

    def key(self) -> tuple:
        return (self.kind, self.device_id, self.seq_no, self.batch_id, self.uid)


class ExclusionReason(str, Enum):
    UNDECRYPTABLE_ENTRY = "UndecryptableEntry"
    MALFORMED_PACKET = "MalformedPacket"
    UNKNOWN_CANDIDATE = "UnknownCandidate"
    DUPLICATE_UID = "DuplicateUid"


class Exclusion(BaseModel):
    reason: ExclusionReason
    device_id: str
    seq_no: int


class TallyResult(BaseModel):
    counts: dict[int, int] = Field(description="candidate_id → counted votes")
    excluded: list[Exclusion] = Field(default_factory=list)

    @property
    def total_counted(self) -> int:
        return sum(self.counts.values())


class MonitoringSnapshot(BaseModel):
    turnout: int = 0
    auth_success: int = 0
    auth_failure: int = 0
    votes_received: int = 0
    anomalies: list[Anomaly] = Field(default_factory=list)
    avg_cycle_ms: float = 0.0
    last_sync_at: dict[str, int] = Field(default_factory=dict)


class AuditFinding(BaseModel):
    device_id: str
    seq_no: int
    reason: str


# ---------------------------------------------------------
# 2. SERVER
# ---------------------------------------------------------
class TallyServer:
    """
    Server state. `accepted` preserves acceptance order, which is the order the
    duplicate-UID policy uses (first accepted wins).
    """

    def __init__(self, device_keys: dict[bytes, Aes128Key], vote_key: Aes128Key,
                 clock: Optional[Callable[[], int]] = None):
        self.device_keys = {bytes(k): v for k, v in device_keys.items()}
        self.vote_key = vote_key
        self._clock = clock or (lambda: 0)
        self._received_at: Optional[int] = None
        self._lock = threading.Lock()

        self.accepted: dict[tuple[bytes, int], LogEntry] = {}
        self.chains: dict[bytes, list[LogEntry]] = {}
        self.batch_index: dict[tuple[bytes, int], bytes] = {}
        self.last_sync_at: dict[bytes, int] = {}
        self.telemetry: dict[bytes, TerminalTelemetry] = {}
        self._anomalies: dict[tuple, Anomaly] = {}

    # ----- helpers -----
    def _flag(self, kind: AnomalyKind, **fields) -> None:
        anomaly = Anomaly(kind=kind, detected_at=self._now(), **fields)
        if anomaly.key() not in self._anomalies:
            self._anomalies[anomaly.key()] = anomaly
            logger.warning("Anomaly %s: %s", kind.value, fields)

    def _now(self) -> int:
        return self._received_at if self._received_at is not None else self._clock()

    def _nack(self, reason: NackReason, batch_id: int) -> UploadOutcome:
        return UploadOutcome(OutcomeKind.NACK, batch_id, reason)

    def head_seq(self, device_id: bytes) -> int:
        """Highest contiguous accepted seq for a device, -1 if none."""
        return len(self.chains.get(bytes(device_id), [])) - 1

    # ----- ingest -----
    def ingest(self, manifest_bytes: bytes) -> UploadOutcome:
        with self._lock:
            return self._ingest(manifest_bytes)

    def _ingest(self, data: bytes) -> UploadOutcome:
        try:
            frame = split_manifest(data)
        except MalformedPacket as e:
            logger.warning("Rejected manifest: %s", e)
            return self._nack(NackReason.MALFORMED_MANIFEST, 0)

        device_hex = frame.device_id.hex()
        if not frame.checksum_matches():
            self._flag(AnomalyKind.CHECKSUM_FAILURE, device_id=device_hex, batch_id=frame.batch_id,
                       details="manifest checksum mismatch")
            return self._nack(NackReason.CHECKSUM_MISMATCH, frame.batch_id)

        device_key = self.device_keys.get(frame.device_id)
        if device_key is None:
            logger.warning("Manifest from unknown device %s", device_hex)
            return self._nack(NackReason.MALFORMED_MANIFEST, frame.batch_id)
        try:
            entries = frame.entries()
        except MalformedPacket as e:
            logger.warning("Manifest %s/%d does not parse: %s", device_hex, frame.batch_id, e)
            return self._nack(NackReason.MALFORMED_MANIFEST, frame.batch_id)
        if not entries:
            return self._nack(NackReason.MALFORMED_MANIFEST, frame.batch_id)

        key = (frame.device_id, frame.batch_id)
        if key in self.batch_index:
            if self.batch_index[key] == frame.manifest_checksum:
                logger.info("Batch %s/%d already accepted - AckDuplicate", device_hex, frame.batch_id)
                return UploadOutcome(OutcomeKind.ACK_DUPLICATE, frame.batch_id)
            self._flag(AnomalyKind.REPLAYED_BATCH, device_id=device_hex, batch_id=frame.batch_id,
                       details="batch id reused with different contents")
            return self._nack(NackReason.CHAIN_BREAK, frame.batch_id)

        for entry in entries:
            reason = entry.verify(device_key)
            if reason:
                self._flag(AnomalyKind.CHECKSUM_FAILURE, device_id=device_hex, batch_id=frame.batch_id,
                           seq_no=entry.seq_no, details=reason)
                return self._nack(NackReason.CHECKSUM_MISMATCH, frame.batch_id)

        chain = self.chains.get(frame.device_id, [])
        break_reason = self._continuity(chain, entries)
        if break_reason:
            self._flag(AnomalyKind.CHAIN_BREAK, device_id=device_hex, batch_id=frame.batch_id,
                       seq_no=entries[0].seq_no, details=break_reason)
            return self._nack(NackReason.CHAIN_BREAK, frame.batch_id)

        fresh = [e for e in entries if e.seq_no >= len(chain)]
        self.chains.setdefault(frame.device_id, []).extend(fresh)
        for entry in fresh:
            self.accepted[(frame.device_id, entry.seq_no)] = entry
        self.batch_index[key] = frame.manifest_checksum
        self.last_sync_at[frame.device_id] = self._now()
        logger.info("Accepted batch %s/%d - %d new entries (head %d)", device_hex, frame.batch_id,
                    len(fresh), self.head_seq(frame.device_id))
        return UploadOutcome(OutcomeKind.ACK, frame.batch_id)

    @staticmethod
    def _continuity(chain: list[LogEntry], entries: list[LogEntry]) -> Optional[str]:
        for prev, entry in zip(entries, entries[1:]):
            if entry.seq_no != prev.seq_no + 1 or entry.prev_hash != prev.entry_hash:
                return f"manifest not contiguous at seq {entry.seq_no}"
        first = entries[0].seq_no
        if first > len(chain):
            return f"gap: manifest starts at seq {first}, head is {len(chain) - 1}"
        for entry in entries:
            if entry.seq_no < len(chain):
                if chain[entry.seq_no].entry_hash != entry.entry_hash:
                    return f"seq {entry.seq_no} conflicts with the accepted entry"
            elif entry.seq_no == len(chain):
                head = chain[-1].entry_hash if chain else ZERO_DIGEST
                if entry.prev_hash != head:
                    return f"seq {entry.seq_no} does not link to the accepted head"
        return None

    # ----- telemetry -----
    def record_telemetry(self, telemetry: TerminalTelemetry) -> bool:
        """Keeps the newest report per device. Stale (decreasing) reports are ignored."""
        with self._lock:
            previous = self.telemetry.get(telemetry.device_id)
            if previous is not None and (
                telemetry.votes_committed < previous.votes_committed
                or telemetry.auth_success < previous.auth_success
                or telemetry.auth_failure < previous.auth_failure
                or telemetry.cycle_count < previous.cycle_count
            ):
                logger.debug("Ignoring stale telemetry from %s", telemetry.device_id.hex())
                return False
            self.telemetry[telemetry.device_id] = telemetry
            return True

    def handle_message(self, data: bytes, at_ms: Optional[int] = None) -> Optional[bytes]:
        """
        Routes one wire message, telemetry or a batch manifest, and returns the
        response bytes. at_ms is the delivery time used for timestamps.
        """
        self._received_at = at_ms
        try:
            if data[:len(TELEMETRY_MAGIC)] == TELEMETRY_MAGIC:
                try:
                    self.record_telemetry(TerminalTelemetry.from_wire(data))
                except MalformedPacket as e:
                    logger.warning("Dropping malformed telemetry: %s", e)
                    return None
                return TELEMETRY_ACK
            return encode_response(self.ingest(data))
        finally:
            self._received_at = None

    # ----- tally and anomalies -----
    def _decode_all(self, ballot: Optional[Ballot], vote_key: Optional[Aes128Key] = None):
        """Yields (device_id, entry, packet or None, exclusion reason or None) in accepted order."""
        for (device_id, _), entry in self.accepted.items():
            try:
                packet = parse_vote_packet(decrypt_packet(vote_key or self.vote_key, entry.iv, entry.ciphertext))
            except (PaddingError, MalformedCiphertext):
                yield device_id, entry, None, ExclusionReason.UNDECRYPTABLE_ENTRY
                continue
            except MalformedPacket:
                yield device_id, entry, None, ExclusionReason.MALFORMED_PACKET
                continue
            if ballot is not None and not ballot.contains(packet.candidate_id):
                yield device_id, entry, packet, ExclusionReason.UNKNOWN_CANDIDATE
                continue
            yield device_id, entry, packet, None

    def _scan_duplicates(self, ballot: Optional[Ballot], vote_key: Optional[Aes128Key] = None) -> dict[tuple[bytes, int], ExclusionReason]:
        """Decides every entry's fate and flags cross-device duplicate UIDs."""
        fates: dict[tuple[bytes, int], ExclusionReason] = {}
        first_seen: dict[bytes, bytes] = {}
        for device_id, entry, packet, reason in self._decode_all(ballot, vote_key):
            if reason is not None:
                fates[(device_id, entry.seq_no)] = reason
                continue
            if packet.uid in first_seen:
                fates[(device_id, entry.seq_no)] = ExclusionReason.DUPLICATE_UID
                if first_seen[packet.uid] != device_id:
                    self._flag(AnomalyKind.DUPLICATE_UID_ACROSS_DEVICES, device_id=device_id.hex(),
                               seq_no=entry.seq_no, uid=packet.uid.hex(),
                               details=f"first counted on {first_seen[packet.uid].hex()}")
                continue
            first_seen[packet.uid] = device_id
        return fates

    def tally(self, ballot: Ballot, vote_key: Optional[Aes128Key] = None) -> TallyResult:
        """
        Decrypts and counts every accepted entry. Undecryptable, malformed,
        off-ballot and duplicate-UID entries become exclusions.
        """
        with self._lock:
            counts = {cid: 0 for cid in ballot.candidate_ids}
            excluded: list[Exclusion] = []
            fates = self._scan_duplicates(ballot, vote_key)
            for device_id, entry, packet, _ in self._decode_all(ballot, vote_key):
                reason = fates.get((device_id, entry.seq_no))
                if reason is not None:
                    excluded.append(Exclusion(reason=reason, device_id=device_id.hex(), seq_no=entry.seq_no))
                else:
                    counts[packet.candidate_id] += 1
        logger.info("Tally - %d counted, %d excluded", sum(counts.values()), len(excluded))
        return TallyResult(counts=counts, excluded=excluded)

    def detect_anomalies(self) -> list[Anomaly]:
        """Accumulated anomalies plus a fresh scan. Repeated calls never duplicate entries."""
        with self._lock:
            self._scan_duplicates(None)
            for device_id, chain in self.chains.items():
                for prev, entry in zip(chain, chain[1:]):
                    if entry.timestamp < prev.timestamp:
                        self._flag(AnomalyKind.TIMESTAMP_REGRESSION, device_id=device_id.hex(),
                                   seq_no=entry.seq_no,
                                   details=f"{entry.timestamp} < {prev.timestamp}")
            return list(self._anomalies.values())

    def snapshot(self) -> MonitoringSnapshot:
        with self._lock:
            reports = list(self.telemetry.values())
            cycles = sum(t.cycle_count for t in reports)
            return MonitoringSnapshot(
                turnout=sum(t.votes_committed for t in reports),
                auth_success=sum(t.auth_success for t in reports),
                auth_failure=sum(t.auth_failure for t in reports),
                votes_received=len(self.accepted),
                anomalies=list(self._anomalies.values()),
                avg_cycle_ms=sum(t.cycle_total_ms for t in reports) / cycles if cycles else 0.0,
                last_sync_at={d.hex(): t for d, t in sorted(self.last_sync_at.items())},
            )

    def audit(self) -> list[AuditFinding]:
        """Re-verifies hash, MAC and links of every accepted entry."""
        findings = []
        for device_id, chain in self.chains.items():
            key = self.device_keys.get(device_id)
            prev = ZERO_DIGEST
            for seq_no, entry in enumerate(chain):
                reason = None
                if entry.seq_no != seq_no:
                    reason = "sequence gap"
                elif entry.prev_hash != prev:
                    reason = "broken prev-hash link"
                elif key is None:
                    reason = "no key for device"
                else:
                    reason = entry.verify(key)
                if reason:
                    findings.append(AuditFinding(device_id=device_id.hex(), seq_no=seq_no, reason=reason))
                prev = entry.entry_hash
        if findings:
            logger.error("Audit found %d problems", len(findings))
        return findings

    # ----- archive -----
    def save_archive(self, path: Union[str, Path]) -> int:
        parts = [ARCHIVE_MAGIC]
        for (device_id, _), entry in self.accepted.items():
            body = entry.body()
            parts.append(device_id + struct.pack("<I", len(body)) + body)
        data = b"".join(parts)
        try:
            Path(path).write_bytes(data)
        except OSError as e:
            raise StorageError(f"cannot write archive {path}: {e}") from e
        logger.info("Archived %d entries to %s", len(self.accepted), path)
        return len(self.accepted)

    @classmethod
    def load_archive(cls, path: Union[str, Path], device_keys: dict[bytes, Aes128Key],
                     vote_key: Aes128Key) -> "TallyServer":
        """Rebuilds accepted entries from an archive, re-verifying every chain."""
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise StorageError(f"cannot read archive {path}: {e}") from e
        if data[:len(ARCHIVE_MAGIC)] != ARCHIVE_MAGIC:
            raise StorageError("missing BVA1 header")

        server = cls(device_keys, vote_key)
        offset = len(ARCHIVE_MAGIC)
        while offset < len(data):
            if len(data) - offset < DEVICE_ID_SIZE + 4:
                raise StorageError("truncated archive record")
            device_id = bytes(data[offset:offset + DEVICE_ID_SIZE])
            (record_len,) = struct.unpack_from("<I", data, offset + DEVICE_ID_SIZE)
            start = offset + DEVICE_ID_SIZE + 4
            if start + record_len > len(data):
                raise StorageError("truncated archive record")
            try:
                entry = parse_entry_body(device_id, data[start:start + record_len])
            except MalformedPacket as e:
                raise StorageError(f"archive record at byte {offset} invalid: {e}") from e
            chain = server.chains.setdefault(device_id, [])
            if server._continuity(chain, [entry]) or entry.seq_no != len(chain):
                raise StorageError(f"archive chain broken for {device_id.hex()} at seq {entry.seq_no}")
            chain.append(entry)
            server.accepted[(device_id, entry.seq_no)] = entry
            offset = start + record_len

        findings = server.audit()
        if findings:
            raise StorageError(f"archive fails audit: {findings[0].reason} at "
                               f"{findings[0].device_id}/{findings[0].seq_no}")
        logger.info("Loaded archive %s - %d entries", path, len(server.accepted))
        return server
