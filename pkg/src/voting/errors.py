"""
Exception hierarchy shared by every voting module.

Outcomes of verification (authentication results, upload verdicts, chain
verdicts) are returned as values. The exceptions below are for contract
violations, unreadable input and failed storage.
"""

from typing import Optional


class VotingError(Exception):
    """Base exception for the voting pipeline."""


class ContractError(VotingError, ValueError):
    """A caller broke a documented precondition (lengths, ranges, call order)."""


class MalformedCiphertext(VotingError):
    """Ciphertext is empty or not a multiple of the AES block size."""


class PaddingError(VotingError):
    """PKCS#7 tail is invalid: tampering or the wrong key."""


class RegistryCorrupt(VotingError):
    """Registry file failed magic, padding, checksum or structure checks."""


class UnknownVoterError(VotingError):
    """UID is not in the registry."""


class AlreadyVotedError(VotingError):
    """UID is already marked as voted."""


class MalformedPacket(VotingError):
    """Vote packet bytes do not follow the packet layout."""


class StorageError(VotingError):
    """A log, journal or archive could not be read or written."""


class JournalCorrupt(VotingError):
    """Sync journal is inconsistent with itself or with its log."""


class TamperedError(VotingError):
    """A persisted log failed chain verification at `seq_no`."""

    def __init__(self, seq_no: int, reason: str = ""):
        self.seq_no = seq_no
        self.reason = reason
        super().__init__(f"log tampered at seq {seq_no}: {reason}" if reason else f"log tampered at seq {seq_no}")


class ConfigError(VotingError):
    """Scenario configuration is invalid."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)
