"""
Sync Agent - batches unsynced log entries into checksummed manifests and
uploads them idempotently over an unreliable transport.

One sync cycle is a small LangGraph workflow:

    probe ──down──▶ END
      │
      ▼
    build ──nothing to send──▶ END
      │
      ▼
    upload ──ack──▶ record ──more──▶ upload
      │                └──done──▶ END
      ├──checksum/malformed nack──▶ rebuild ──▶ upload   (bounded retries)
      └──chain nack / transport down / retries spent──▶ END

Manifest wire format (little-endian):
    "BVM1" ∥ device_id(8) ∥ batch_id:u32 ∥ count:u16 ∥ entry bodies ∥ checksum(32)
    checksum = checksum(device_id ∥ batch_id ∥ entry bodies)
Response:
    code:u8 (0 Ack, 1 AckDuplicate, 2 NackChecksum, 3 NackChain, 4 NackMalformed) ∥ batch_id:u32
"""

import struct
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable, Optional, Protocol, TypedDict

from langgraph.graph import END, StateGraph
from pydantic import BaseModel, ConfigDict, Field

from config import (
    BATCH_SIZE,
    BATCH_TRANSMIT_MS,
    MAX_UPLOAD_RETRIES,
    SYNC_INTERVAL_MS,
    SYNC_RECURSION_LIMIT,
    get_logger,
)
from crypto_engine import BLOCK_SIZE, DIGEST_SIZE, Aes128Key, Digest256, checksum
from errors import ContractError, MalformedPacket
from worm_log import (
    DEVICE_ID_SIZE,
    RECORD_OVERHEAD,
    LogEntry,
    SyncJournal,
    WormLog,
    parse_entry_body,
    read_unsynced,
)

logger = get_logger("voting.sync")

MANIFEST_MAGIC = b"BVM1"
_MANIFEST_HEAD = struct.Struct("<IH")   # batch_id, count
MANIFEST_MIN_SIZE = len(MANIFEST_MAGIC) + DEVICE_ID_SIZE + _MANIFEST_HEAD.size + DIGEST_SIZE
RESPONSE_SIZE = 5
_CT_LEN_OFFSET = 12 + BLOCK_SIZE   # within an entry body


# ---------------------------------------------------------
# 1. MANIFESTS
# ---------------------------------------------------------
def manifest_checksum(device_id: bytes, batch_id: int, bodies: bytes) -> Digest256:
    return checksum(device_id + struct.pack("<I", batch_id) + bodies)


@dataclass(frozen=True)
class BatchManifest:
    device_id: bytes
    batch_id: int
    entries: tuple[LogEntry, ...]
    manifest_checksum: Digest256

    @property
    def first_seq(self) -> int:
        return self.entries[0].seq_no

    @property
    def last_seq(self) -> int:
        return self.entries[-1].seq_no

    def to_wire(self) -> bytes:
        bodies = b"".join(e.body() for e in self.entries)
        return (MANIFEST_MAGIC + self.device_id + _MANIFEST_HEAD.pack(self.batch_id, len(self.entries))
                + bodies + self.manifest_checksum)


@dataclass(frozen=True)
class ManifestFrame:
    """A manifest split at the framing level, before any entry is trusted."""
    device_id: bytes
    batch_id: int
    count: int
    bodies: bytes
    manifest_checksum: bytes

    def checksum_matches(self) -> bool:
        return manifest_checksum(self.device_id, self.batch_id, self.bodies) == self.manifest_checksum

    def entry_bodies(self) -> list[bytes]:
        """Splits the body region into per-entry bodies. Raises MalformedPacket."""
        out, offset = [], 0
        while offset < len(self.bodies):
            if len(self.bodies) - offset < RECORD_OVERHEAD:
                raise MalformedPacket("truncated entry in manifest")
            (ct_len,) = struct.unpack_from("<H", self.bodies, offset + _CT_LEN_OFFSET)
            size = RECORD_OVERHEAD + ct_len
            if offset + size > len(self.bodies):
                raise MalformedPacket("entry overruns manifest")
            out.append(self.bodies[offset:offset + size])
            offset += size
        if len(out) != self.count:
            raise MalformedPacket(f"manifest declares {self.count} entries, carries {len(out)}")
        return out

    def entries(self) -> list[LogEntry]:
        return [parse_entry_body(self.device_id, body) for body in self.entry_bodies()]


def split_manifest(data: bytes) -> ManifestFrame:
    if len(data) < MANIFEST_MIN_SIZE or data[:len(MANIFEST_MAGIC)] != MANIFEST_MAGIC:
        raise MalformedPacket("not a BVM1 manifest")
    device_id = bytes(data[4:12])
    batch_id, count = _MANIFEST_HEAD.unpack_from(data, 12)
    return ManifestFrame(device_id, batch_id, count, bytes(data[18:-DIGEST_SIZE]), bytes(data[-DIGEST_SIZE:]))


def build_batches(unsynced: list[LogEntry], device_id: bytes, next_batch_id: int,
                  batch_size: int = BATCH_SIZE) -> list[BatchManifest]:
    """Greedy fill: every batch full except possibly the last; ids dense from next_batch_id."""
    if batch_size < 1:
        raise ContractError("batch_size must be at least 1")
    for a, b in zip(unsynced, unsynced[1:]):
        if b.seq_no != a.seq_no + 1:
            raise ContractError(f"unsynced entries not contiguous at seq {a.seq_no} → {b.seq_no}")

    batches = []
    for i in range(0, len(unsynced), batch_size):
        chunk = tuple(unsynced[i:i + batch_size])
        batch_id = next_batch_id + len(batches)
        bodies = b"".join(e.body() for e in chunk)
        batches.append(BatchManifest(device_id, batch_id, chunk, manifest_checksum(device_id, batch_id, bodies)))
    return batches


# ---------------------------------------------------------
# 2. TRANSPORT AND OUTCOMES
# ---------------------------------------------------------
class LinkState(str, Enum):
    UP = "Up"
    DOWN = "Down"


@dataclass(frozen=True)
class Exchange:
    """Result of one request on a transport: the response (None if lost) and time spent."""
    response: Optional[bytes]
    elapsed_ms: int = 0
    link_down: bool = False


class Transport(Protocol):
    def probe(self, at_ms: Optional[int] = None) -> LinkState: ...
    def request(self, payload: bytes, at_ms: Optional[int] = None) -> Exchange: ...


class ResponseCode(IntEnum):
    ACK = 0
    ACK_DUPLICATE = 1
    NACK_CHECKSUM = 2
    NACK_CHAIN = 3
    NACK_MALFORMED = 4


class OutcomeKind(str, Enum):
    ACK = "Ack"
    ACK_DUPLICATE = "AckDuplicate"
    NACK = "Nack"
    TRANSPORT_DOWN = "TransportDown"


class NackReason(str, Enum):
    CHECKSUM_MISMATCH = "ChecksumMismatch"
    CHAIN_BREAK = "ChainBreak"
    MALFORMED_MANIFEST = "MalformedManifest"


_NACK_BY_CODE = {
    ResponseCode.NACK_CHECKSUM: NackReason.CHECKSUM_MISMATCH,
    ResponseCode.NACK_CHAIN: NackReason.CHAIN_BREAK,
    ResponseCode.NACK_MALFORMED: NackReason.MALFORMED_MANIFEST,
}
_CODE_BY_NACK = {reason: code for code, reason in _NACK_BY_CODE.items()}


@dataclass(frozen=True)
class UploadOutcome:
    kind: OutcomeKind
    batch_id: Optional[int] = None
    reason: Optional[NackReason] = None
    elapsed_ms: int = 0
    transmitted: bool = True

    @property
    def acked(self) -> bool:
        return self.kind in (OutcomeKind.ACK, OutcomeKind.ACK_DUPLICATE)

    def label(self) -> str:
        return f"Nack{{{self.reason.value}}}" if self.kind is OutcomeKind.NACK else self.kind.value


def encode_response(outcome: UploadOutcome) -> bytes:
    if outcome.kind is OutcomeKind.ACK:
        code = ResponseCode.ACK
    elif outcome.kind is OutcomeKind.ACK_DUPLICATE:
        code = ResponseCode.ACK_DUPLICATE
    elif outcome.kind is OutcomeKind.NACK:
        code = _CODE_BY_NACK[outcome.reason]
    else:
        raise ContractError("TransportDown has no wire form")
    return struct.pack("<BI", code, outcome.batch_id or 0)


def decode_response(data: bytes) -> UploadOutcome:
    if len(data) != RESPONSE_SIZE:
        raise MalformedPacket(f"response must be {RESPONSE_SIZE} bytes")
    code, batch_id = struct.unpack("<BI", data)
    try:
        code = ResponseCode(code)
    except ValueError as e:
        raise MalformedPacket(f"unknown response code {code}") from e
    if code is ResponseCode.ACK:
        return UploadOutcome(OutcomeKind.ACK, batch_id)
    if code is ResponseCode.ACK_DUPLICATE:
        return UploadOutcome(OutcomeKind.ACK_DUPLICATE, batch_id)
    return UploadOutcome(OutcomeKind.NACK, batch_id, _NACK_BY_CODE[code])


def probe(transport: Transport, at_ms: Optional[int] = None) -> LinkState:
    return transport.probe(at_ms)


def upload(transport: Transport, manifest: BatchManifest, at_ms: Optional[int] = None) -> UploadOutcome:
    """
    Sends one manifest and interprets the server's verdict. A lost response,
    or one that is garbled or names another batch, counts as TransportDown.
    """
    exchange = transport.request(manifest.to_wire(), at_ms)
    if exchange.response is None:
        return UploadOutcome(OutcomeKind.TRANSPORT_DOWN, manifest.batch_id, elapsed_ms=exchange.elapsed_ms,
                             transmitted=not exchange.link_down)
    try:
        outcome = decode_response(exchange.response)
    except MalformedPacket as e:
        logger.warning("Garbled response for batch %d: %s", manifest.batch_id, e)
        return UploadOutcome(OutcomeKind.TRANSPORT_DOWN, manifest.batch_id, elapsed_ms=exchange.elapsed_ms)
    # a malformed manifest may not carry a readable batch id
    if outcome.batch_id != manifest.batch_id and outcome.reason is not NackReason.MALFORMED_MANIFEST:
        logger.warning("Response names batch %d, expected %d", outcome.batch_id, manifest.batch_id)
        return UploadOutcome(OutcomeKind.TRANSPORT_DOWN, manifest.batch_id, elapsed_ms=exchange.elapsed_ms)
    return UploadOutcome(outcome.kind, manifest.batch_id, outcome.reason, exchange.elapsed_ms)


# ---------------------------------------------------------
# 3. SETTINGS AND REPORTS
# ---------------------------------------------------------
class SyncSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    batch_size: int = Field(default=BATCH_SIZE, ge=1, le=0xFFFF, description="Entries per full batch")
    batch_transmit_ms: int = Field(default=BATCH_TRANSMIT_MS, ge=0,
                                   description="Transmission time of one full batch; short batches pro rata")
    interval_ms: int = Field(default=SYNC_INTERVAL_MS, ge=1, description="Time between sync cycles")
    max_upload_retries: int = Field(default=MAX_UPLOAD_RETRIES, ge=0,
                                    description="Rebuild-and-resend attempts after a checksum or framing nack")
    immediate: bool = Field(default=False, description="Run a sync cycle right after every committed vote")

    def transmit_ms(self, entry_count: int) -> int:
        return self.batch_transmit_ms * entry_count // self.batch_size


class UploadAttempt(BaseModel):
    batch_id: int
    first_seq: int
    last_seq: int
    at_ms: int
    outcome: str


class SyncReport(BaseModel):
    device_id: str
    started_at: int
    link: str
    batches_sent: int = 0
    acked: int = 0
    nacked: int = 0
    duration_ms: int = 0
    stopped: Optional[str] = None
    attempts: list[UploadAttempt] = Field(default_factory=list)


# ---------------------------------------------------------
# 4. THE CYCLE GRAPH
# ---------------------------------------------------------
class SyncState(TypedDict):
    started_at: int
    elapsed_ms: int
    link: str
    pending: list
    retries: int
    outcome: Optional[UploadOutcome]
    batches_sent: int
    acked: int
    nacked: int
    stopped: Optional[str]
    attempts: list


class SyncAgent:
    """
    Drives sync cycles for one device. A batch is pinned in the journal before
    it is first sent, so it is resent byte-identically under its original id
    until acknowledged, even by a fresh agent after a restart.
    """

    def __init__(self, log: WormLog, journal: SyncJournal, transport: Transport, device_key: Aes128Key,
                 settings: Optional[SyncSettings] = None,
                 telemetry_source: Optional[Callable[[], bytes]] = None):
        self.log = log
        self.journal = journal
        self.transport = transport
        self.device_key = device_key
        self.settings = settings or SyncSettings()
        self.telemetry_source = telemetry_source
        self.telemetry_acked = False
        self.app = self._build_graph()

    @property
    def device_id(self) -> bytes:
        return self.log.device_id

    def _manifest_for(self, batch_id: int, first_seq: int, last_seq: int) -> BatchManifest:
        entries = [self.log.entry(seq) for seq in range(first_seq, last_seq + 1)]
        return build_batches(entries, self.device_id, batch_id, len(entries))[0]

    # ----- nodes -----
    def _probe_node(self, state: SyncState):
        link = probe(self.transport, state["started_at"])
        if link is LinkState.DOWN:
            logger.info("Link down on %s at %d ms - sync deferred", self.device_id.hex(), state["started_at"])
        return {"link": link.value}

    def _build_node(self, state: SyncState):
        unsynced = read_unsynced(self.log, self.journal)
        for entry in unsynced:
            reason = entry.verify(self.device_key)
            if reason:
                logger.error("Local entry %d fails verification (%s) - not uploading", entry.seq_no, reason)
                return {"pending": [], "stopped": "LocalTamper"}

        # ranges already sent keep their boundaries and ids
        pending = [self._manifest_for(p.batch_id, p.first_seq, p.last_seq) for p in self.journal.pending()]
        offset = sum(len(m.entries) for m in pending)
        pending += build_batches(unsynced[offset:], self.device_id, self.journal.next_batch_id + len(pending),
                                 self.settings.batch_size)
        if pending:
            logger.info("Sync %s: %d unsynced entries in %d batches", self.device_id.hex(), len(unsynced), len(pending))
        return {"pending": pending}

    def _upload_node(self, state: SyncState):
        manifest: BatchManifest = state["pending"][0]
        at_ms = state["started_at"] + state["elapsed_ms"]
        self.journal.record_pending(manifest.batch_id, manifest.first_seq, manifest.last_seq)
        outcome = upload(self.transport, manifest, at_ms)

        charge = outcome.elapsed_ms
        if outcome.transmitted:
            charge += self.settings.transmit_ms(len(manifest.entries))
        logger.info("Batch %d (seq %d..%d) → %s", manifest.batch_id, manifest.first_seq,
                    manifest.last_seq, outcome.label())
        attempt = UploadAttempt(batch_id=manifest.batch_id, first_seq=manifest.first_seq,
                                last_seq=manifest.last_seq, at_ms=at_ms, outcome=outcome.label())
        return {
            "outcome": outcome,
            "elapsed_ms": state["elapsed_ms"] + charge,
            "batches_sent": state["batches_sent"] + 1,
            "nacked": state["nacked"] + (outcome.kind is OutcomeKind.NACK),
            "attempts": state["attempts"] + [attempt],
        }

    def _record_node(self, state: SyncState):
        manifest: BatchManifest = state["pending"][0]
        self.journal.record_batch_assignment(manifest.batch_id, manifest.first_seq, manifest.last_seq,
                                             state["started_at"] + state["elapsed_ms"])
        return {"pending": state["pending"][1:], "acked": state["acked"] + 1, "retries": 0}

    def _rebuild_node(self, state: SyncState):
        manifest: BatchManifest = state["pending"][0]
        logger.warning("Rebuilding batch %d from the log (retry %d/%d)", manifest.batch_id,
                       state["retries"] + 1, self.settings.max_upload_retries)
        rebuilt = self._manifest_for(manifest.batch_id, manifest.first_seq, manifest.last_seq)
        return {"pending": [rebuilt] + state["pending"][1:], "retries": state["retries"] + 1}

    # ----- routers -----
    @staticmethod
    def _after_probe(state: SyncState):
        return "up" if state["link"] == LinkState.UP.value else "down"

    @staticmethod
    def _after_build(state: SyncState):
        return "send" if state["pending"] else "done"

    def _after_upload(self, state: SyncState):
        outcome: UploadOutcome = state["outcome"]
        if outcome.acked:
            return "record"
        if outcome.kind is OutcomeKind.NACK and outcome.reason is not NackReason.CHAIN_BREAK:
            if state["retries"] < self.settings.max_upload_retries:
                return "rebuild"
            logger.warning("Max retries (%d) reached for batch %d. Giving up this cycle.",
                           self.settings.max_upload_retries, outcome.batch_id)
        return "stop"

    @staticmethod
    def _after_record(state: SyncState):
        return "more" if state["pending"] else "done"

    def _build_graph(self):
        workflow = StateGraph(SyncState)
        workflow.add_node("probe", self._probe_node)
        workflow.add_node("build", self._build_node)
        workflow.add_node("upload", self._upload_node)
        workflow.add_node("record", self._record_node)
        workflow.add_node("rebuild", self._rebuild_node)

        workflow.set_entry_point("probe")
        workflow.add_conditional_edges("probe", self._after_probe, {"up": "build", "down": END})
        workflow.add_conditional_edges("build", self._after_build, {"send": "upload", "done": END})
        workflow.add_conditional_edges("upload", self._after_upload,
                                       {"record": "record", "rebuild": "rebuild", "stop": END})
        workflow.add_conditional_edges("record", self._after_record, {"more": "upload", "done": END})
        workflow.add_edge("rebuild", "upload")
        return workflow.compile()

    # ----- API -----
    def sync_cycle(self, started_at: int) -> SyncReport:
        """
        Runs one cycle starting at simulated time `started_at`. A batch range is
        pinned before its first send and marked acknowledged only on
        Ack/AckDuplicate; a StorageError from the journal propagates and the
        batch stays outstanding under the same id.
        """
        initial_state: SyncState = {
            "started_at": started_at,
            "elapsed_ms": 0,
            "link": LinkState.DOWN.value,
            "pending": [],
            "retries": 0,
            "outcome": None,
            "batches_sent": 0,
            "acked": 0,
            "nacked": 0,
            "stopped": None,
            "attempts": [],
        }
        final_state = self.app.invoke(initial_state, {"recursion_limit": SYNC_RECURSION_LIMIT})

        stopped = final_state["stopped"]
        outcome: Optional[UploadOutcome] = final_state["outcome"]
        if stopped is None and final_state["pending"] and outcome is not None:
            stopped = outcome.label()

        report = SyncReport(
            device_id=self.device_id.hex(),
            started_at=started_at,
            link=final_state["link"],
            batches_sent=final_state["batches_sent"],
            acked=final_state["acked"],
            nacked=final_state["nacked"],
            duration_ms=final_state["elapsed_ms"],
            stopped=stopped,
            attempts=final_state["attempts"],
        )
        if report.link == LinkState.UP.value:
            self.send_telemetry(started_at + report.duration_ms)
        return report

    def send_telemetry(self, at_ms: int) -> bool:
        """Piggybacks terminal counters after an online cycle. Loss only affects monitoring."""
        if self.telemetry_source is None:
            return True
        exchange = self.transport.request(self.telemetry_source(), at_ms)
        self.telemetry_acked = exchange.response is not None
        return self.telemetry_acked


def sync_cycle(log: WormLog, journal: SyncJournal, transport: Transport, device_key: Aes128Key,
               config: Optional[SyncSettings] = None, started_at: int = 0) -> SyncReport:
    """One-shot cycle; un-acked batches are recovered from the journal."""
    return SyncAgent(log, journal, transport, device_key, config).sync_cycle(started_at)
