"""
Card Auth - card issuance, encrypted-UID verification, and the encrypted
voter whitelist with voted-status tracking.

A card is (uid, token) where token = AES(card_key, canonical_uid_block(uid)).
A cloner who rewrites the UID cannot produce the matching token without the
card key, so altered cards fail verification before the registry is consulted.

Registry file (little-endian):
    "BVR1" ∥ iv(16) ∥ AES-CBC(registry_key, iv, plaintext)
    plaintext = count:u32 ∥ {uid_len:u8, uid, status:u8, voted_at:u64}* ∥ checksum(preceding plaintext)
"""

import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, Optional

from config import get_logger
from crypto_engine import (
    BLOCK_SIZE,
    DIGEST_SIZE,
    Aes128Key,
    aes128_encrypt_block,
    checksum,
    decrypt_packet,
    encrypt_packet,
)
from errors import (
    AlreadyVotedError,
    ContractError,
    MalformedCiphertext,
    PaddingError,
    RegistryCorrupt,
    UnknownVoterError,
)

logger = get_logger("voting.card_auth")

VALID_UID_LENGTHS = (4, 7, 10)
REGISTRY_MAGIC = b"BVR1"
TOKEN_SIZE = 16


# ---------------------------------------------------------
# 1. TYPES
# ---------------------------------------------------------
def validate_uid(uid: bytes) -> bytes:
    """Returns the uid as bytes if its length is a valid ISO 14443 size."""
    if not isinstance(uid, (bytes, bytearray)) or len(uid) not in VALID_UID_LENGTHS:
        raise ContractError(f"UID must be 4, 7 or 10 bytes, got {len(uid) if uid is not None else None}")
    return bytes(uid)


@dataclass(frozen=True)
class CardImage:
    """What a voter's RFID card stores."""
    uid: bytes
    token: bytes

    def __post_init__(self):
        validate_uid(self.uid)
        if len(self.token) != TOKEN_SIZE:
            raise ContractError(f"card token must be {TOKEN_SIZE} bytes")


class VoterStatus(IntEnum):
    NOT_VOTED = 0
    VOTED = 1


@dataclass(frozen=True)
class VoterRecord:
    status: VoterStatus = VoterStatus.NOT_VOTED
    voted_at: Optional[int] = None


class AuthResult(str, Enum):
    ELIGIBLE = "Eligible"
    ALREADY_VOTED = "AlreadyVoted"
    UNKNOWN_VOTER = "UnknownVoter"
    INVALID_TOKEN = "InvalidToken"


@dataclass
class VoterRegistry:
    """
    Whitelist of eligible UIDs. Confined to one terminal; only mark_voted
    mutates it and statuses only ever move NotVoted → Voted.
    """
    key_fingerprint: bytes
    entries: dict[bytes, VoterRecord] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, uid: bytes) -> bool:
        return bytes(uid) in self.entries

    def status_of(self, uid: bytes) -> Optional[VoterStatus]:
        record = self.entries.get(bytes(uid))
        return record.status if record else None

    def voted_uids(self) -> set[bytes]:
        return {uid for uid, rec in self.entries.items() if rec.status is VoterStatus.VOTED}


def key_fingerprint(registry_key: Aes128Key) -> bytes:
    return checksum(b"registry-key:" + bytes(registry_key))


def new_registry(uids: Iterable[bytes], registry_key: Aes128Key) -> VoterRegistry:
    """Builds a registry with every uid NotVoted. Duplicate uids are rejected."""
    registry = VoterRegistry(key_fingerprint=key_fingerprint(registry_key))
    for uid in uids:
        uid = validate_uid(uid)
        if uid in registry.entries:
            raise ContractError(f"duplicate UID {uid.hex()} in registry")
        registry.entries[uid] = VoterRecord()
    return registry


# ---------------------------------------------------------
# 2. CARDS
# ---------------------------------------------------------
def canonical_uid_block(uid: bytes) -> bytes:
    """Length byte, uid, zero fill to 16 bytes. Injective over valid uids."""
    uid = validate_uid(uid)
    return bytes([len(uid)]) + uid + bytes(BLOCK_SIZE - 1 - len(uid))


def issue_card(uid: bytes, card_key: Aes128Key) -> CardImage:
    uid = validate_uid(uid)
    return CardImage(uid=uid, token=aes128_encrypt_block(card_key, canonical_uid_block(uid)))


def verify_card(card: CardImage, card_key: Aes128Key) -> bool:
    return aes128_encrypt_block(card_key, canonical_uid_block(card.uid)) == card.token


def authenticate(registry: VoterRegistry, card: CardImage, card_key: Aes128Key) -> AuthResult:
    """
    Read-only eligibility check. Precedence:
    InvalidToken > UnknownVoter > AlreadyVoted > Eligible.
    """
    if not verify_card(card, card_key):
        return AuthResult.INVALID_TOKEN
    status = registry.status_of(card.uid)
    if status is None:
        return AuthResult.UNKNOWN_VOTER
    if status is VoterStatus.VOTED:
        return AuthResult.ALREADY_VOTED
    return AuthResult.ELIGIBLE


def mark_voted(registry: VoterRegistry, uid: bytes, at: int) -> VoterRegistry:
    """Moves uid to Voted in place and returns the same registry."""
    uid = validate_uid(uid)
    record = registry.entries.get(uid)
    if record is None:
        raise UnknownVoterError(f"UID {uid.hex()} is not registered")
    if record.status is VoterStatus.VOTED:
        raise AlreadyVotedError(f"UID {uid.hex()} already voted at {record.voted_at}")
    registry.entries[uid] = VoterRecord(status=VoterStatus.VOTED, voted_at=at)
    return registry


# ---------------------------------------------------------
# 3. AT-REST FORMAT
# ---------------------------------------------------------
def _serialize_entries(registry: VoterRegistry) -> bytes:
    parts = [struct.pack("<I", len(registry.entries))]
    for uid, record in registry.entries.items():
        voted_at = record.voted_at if record.voted_at is not None else 0
        parts.append(struct.pack("<B", len(uid)) + uid + struct.pack("<BQ", int(record.status), voted_at))
    body = b"".join(parts)
    return body + checksum(body)


def save_registry(registry: VoterRegistry, registry_key: Aes128Key, iv: Optional[bytes] = None) -> bytes:
    """
    Serializes and encrypts the registry. Without an explicit iv a synthetic
    one is derived from the plaintext, so identical registries produce
    identical files.
    """
    if registry.key_fingerprint != key_fingerprint(registry_key):
        raise ContractError("registry was created under a different registry key")

    plaintext = _serialize_entries(registry)
    if iv is None:
        iv = checksum(REGISTRY_MAGIC + bytes(registry_key) + plaintext)[:BLOCK_SIZE]
    blob = REGISTRY_MAGIC + bytes(iv) + encrypt_packet(registry_key, iv, plaintext)
    logger.info("Registry saved - %d voters, %d bytes", len(registry), len(blob))
    return blob


def load_registry(data: bytes, registry_key: Aes128Key) -> VoterRegistry:
    """Decrypts and validates a registry blob produced by save_registry."""
    if len(data) < len(REGISTRY_MAGIC) + 2 * BLOCK_SIZE or data[:4] != REGISTRY_MAGIC:
        raise RegistryCorrupt("missing BVR1 header")

    iv = data[4:4 + BLOCK_SIZE]
    try:
        plaintext = decrypt_packet(registry_key, iv, data[4 + BLOCK_SIZE:])
    except (PaddingError, MalformedCiphertext) as e:
        raise RegistryCorrupt(f"registry does not decrypt: {e}") from e

    if len(plaintext) < 4 + DIGEST_SIZE:
        raise RegistryCorrupt("registry plaintext too short")
    body, digest = plaintext[:-DIGEST_SIZE], plaintext[-DIGEST_SIZE:]
    if checksum(body) != digest:
        raise RegistryCorrupt("registry checksum mismatch")

    registry = VoterRegistry(key_fingerprint=key_fingerprint(registry_key))
    try:
        (count,) = struct.unpack_from("<I", body, 0)
        offset = 4
        for _ in range(count):
            (uid_len,) = struct.unpack_from("<B", body, offset)
            offset += 1
            uid = body[offset:offset + uid_len]
            offset += uid_len
            status, voted_at = struct.unpack_from("<BQ", body, offset)
            offset += 9
            uid = validate_uid(uid)
            if uid in registry.entries:
                raise RegistryCorrupt(f"duplicate UID {uid.hex()}")
            status = VoterStatus(status)
            registry.entries[uid] = VoterRecord(
                status=status,
                voted_at=voted_at if status is VoterStatus.VOTED else None,
            )
    except (struct.error, ValueError) as e:
        raise RegistryCorrupt(f"registry structure invalid: {e}") from e
    if offset != len(body):
        raise RegistryCorrupt("trailing bytes after registry entries")

    logger.info("Registry loaded - %d voters (%d already voted)", len(registry), len(registry.voted_uids()))
    return registry
