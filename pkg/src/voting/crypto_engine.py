"""
Crypto Engine - AES-128 block cipher, CBC packet encryption with PKCS#7
padding, and the SHA-256 checksum / hash-chain / device-MAC primitives that
the registry, the vote log and the sync manifests are built on.

The cipher is implemented here from its round structure:
  SubBytes → ShiftRows → MixColumns → AddRoundKey, 10 rounds for a 128-bit key,
with the final round skipping MixColumns. Decryption runs the inverse steps in
reverse order. Everything in this module is a pure function of its inputs
(IvGenerator excepted), so it is safe to share between threads.
"""

import hashlib
import hmac
import struct
from functools import lru_cache
from typing import NewType

import numpy as np

from errors import ContractError, MalformedCiphertext, PaddingError

BLOCK_SIZE = 16
KEY_SIZE = 16
DIGEST_SIZE = 32
ROUNDS = 10

_IV_COUNTER = struct.Struct(">I")
IV_COUNTER_LIMIT = 1 << 32

Aes128Key = NewType("Aes128Key", bytes)
Digest256 = NewType("Digest256", bytes)
Iv128 = NewType("Iv128", bytes)

ZERO_DIGEST = Digest256(bytes(DIGEST_SIZE))


# ---------------------------------------------------------
# 1. FIELD ARITHMETIC AND TABLES
# ---------------------------------------------------------
def _xtime(a: int) -> int:
    """Multiply by x (0x02) in GF(2^8) modulo x^8 + x^4 + x^3 + x + 1."""
    a <<= 1
    return (a ^ 0x11B) if a & 0x100 else a


def _gmul(a: int, b: int) -> int:
    product = 0
    while b:
        if b & 1:
            product ^= a
        a = _xtime(a)
        b >>= 1
    return product


def _rotl8(x: int, shift: int) -> int:
    return ((x << shift) | (x >> (8 - shift))) & 0xFF


def _build_sbox() -> tuple[list[int], list[int]]:
    """
    Walks the multiplicative group with generator 3, pairing each p with its
    inverse q, then applies the affine transform.
    """
    sbox = [0] * 256
    p = q = 1
    while True:
        p = p ^ ((p << 1) & 0xFF) ^ (0x1B if p & 0x80 else 0)
        q ^= q << 1
        q ^= q << 2
        q ^= q << 4
        q &= 0xFF
        if q & 0x80:
            q ^= 0x09
        sbox[p] = q ^ _rotl8(q, 1) ^ _rotl8(q, 2) ^ _rotl8(q, 3) ^ _rotl8(q, 4) ^ 0x63
        if p == 1:
            break
    sbox[0] = 0x63

    inv_sbox = [0] * 256
    for i, s in enumerate(sbox):
        inv_sbox[s] = i
    return sbox, inv_sbox


SBOX, INV_SBOX = _build_sbox()
MUL2 = [_gmul(i, 2) for i in range(256)]
MUL3 = [_gmul(i, 3) for i in range(256)]
MUL9 = [_gmul(i, 9) for i in range(256)]
MUL11 = [_gmul(i, 11) for i in range(256)]
MUL13 = [_gmul(i, 13) for i in range(256)]
MUL14 = [_gmul(i, 14) for i in range(256)]
RCON = (0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36)

# State is a flat list in column-major order: index = row + 4 * column.
# ShiftRows moves row r left by r columns.
_SHIFT_ROWS = [(i % 4) + 4 * (((i // 4) + (i % 4)) % 4) for i in range(16)]
_INV_SHIFT_ROWS = [(i % 4) + 4 * (((i // 4) - (i % 4)) % 4) for i in range(16)]


# ---------------------------------------------------------
# 2. KEY SCHEDULE
# ---------------------------------------------------------
def _require_key(key: bytes) -> None:
    if not isinstance(key, (bytes, bytearray)) or len(key) != KEY_SIZE:
        raise ContractError(f"AES-128 key must be exactly {KEY_SIZE} bytes")


@lru_cache(maxsize=256)
def _expand_key(key: bytes) -> tuple[tuple[int, ...], ...]:
    """Returns the 11 round keys, 16 bytes each."""
    words = [list(key[i:i + 4]) for i in range(0, KEY_SIZE, 4)]
    for i in range(4, 4 * (ROUNDS + 1)):
        temp = list(words[i - 1])
        if i % 4 == 0:
            temp = temp[1:] + temp[:1]
            temp = [SBOX[b] for b in temp]
            temp[0] ^= RCON[i // 4 - 1]
        words.append([a ^ b for a, b in zip(words[i - 4], temp)])
    return tuple(
        tuple(b for word in words[4 * r:4 * r + 4] for b in word)
        for r in range(ROUNDS + 1)
    )


# ---------------------------------------------------------
# 3. ROUND TRANSFORMATIONS
# ---------------------------------------------------------
def _mix_columns(s: list[int]) -> list[int]:
    out = [0] * 16
    for c in range(0, 16, 4):
        a0, a1, a2, a3 = s[c], s[c + 1], s[c + 2], s[c + 3]
        out[c] = MUL2[a0] ^ MUL3[a1] ^ a2 ^ a3
        out[c + 1] = a0 ^ MUL2[a1] ^ MUL3[a2] ^ a3
        out[c + 2] = a0 ^ a1 ^ MUL2[a2] ^ MUL3[a3]
        out[c + 3] = MUL3[a0] ^ a1 ^ a2 ^ MUL2[a3]
    return out


def _inv_mix_columns(s: list[int]) -> list[int]:
    out = [0] * 16
    for c in range(0, 16, 4):
        a0, a1, a2, a3 = s[c], s[c + 1], s[c + 2], s[c + 3]
        out[c] = MUL14[a0] ^ MUL11[a1] ^ MUL13[a2] ^ MUL9[a3]
        out[c + 1] = MUL9[a0] ^ MUL14[a1] ^ MUL11[a2] ^ MUL13[a3]
        out[c + 2] = MUL13[a0] ^ MUL9[a1] ^ MUL14[a2] ^ MUL11[a3]
        out[c + 3] = MUL11[a0] ^ MUL13[a1] ^ MUL9[a2] ^ MUL14[a3]
    return out


def aes128_encrypt_block(key: Aes128Key, block: bytes) -> bytes:
    """Encrypts one 16-byte block."""
    _require_key(key)
    if len(block) != BLOCK_SIZE:
        raise ContractError(f"AES block must be exactly {BLOCK_SIZE} bytes, got {len(block)}")

    round_keys = _expand_key(bytes(key))
    state = [b ^ k for b, k in zip(block, round_keys[0])]
    for rnd in range(1, ROUNDS + 1):
        state = [SBOX[b] for b in state]
        state = [state[i] for i in _SHIFT_ROWS]
        if rnd < ROUNDS:
            state = _mix_columns(state)
        state = [b ^ k for b, k in zip(state, round_keys[rnd])]
    return bytes(state)


def aes128_decrypt_block(key: Aes128Key, block: bytes) -> bytes:
    """Exact inverse of aes128_encrypt_block under the same key."""
    _require_key(key)
    if len(block) != BLOCK_SIZE:
        raise ContractError(f"AES block must be exactly {BLOCK_SIZE} bytes, got {len(block)}")

    round_keys = _expand_key(bytes(key))
    state = [b ^ k for b, k in zip(block, round_keys[ROUNDS])]
    for rnd in range(ROUNDS - 1, -1, -1):
        state = [state[i] for i in _INV_SHIFT_ROWS]
        state = [INV_SBOX[b] for b in state]
        state = [b ^ k for b, k in zip(state, round_keys[rnd])]
        if rnd > 0:
            state = _inv_mix_columns(state)
    return bytes(state)


# ---------------------------------------------------------
# 4. CBC PACKETS
# ---------------------------------------------------------
def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def _require_iv(iv: bytes) -> None:
    if not isinstance(iv, (bytes, bytearray)) or len(iv) != BLOCK_SIZE:
        raise ContractError(f"IV must be exactly {BLOCK_SIZE} bytes")


def padded_length(plaintext_len: int) -> int:
    """Ciphertext length for a plaintext of the given length."""
    return (plaintext_len // BLOCK_SIZE + 1) * BLOCK_SIZE


def encrypt_packet(key: Aes128Key, iv: Iv128, plaintext: bytes) -> bytes:
    """AES-128-CBC over the PKCS#7-padded plaintext."""
    _require_key(key)
    _require_iv(iv)
    if not plaintext:
        raise ContractError("cannot encrypt an empty packet")

    pad = BLOCK_SIZE - len(plaintext) % BLOCK_SIZE
    padded = bytes(plaintext) + bytes([pad]) * pad

    out = bytearray()
    previous = bytes(iv)
    for offset in range(0, len(padded), BLOCK_SIZE):
        previous = aes128_encrypt_block(key, _xor(padded[offset:offset + BLOCK_SIZE], previous))
        out += previous
    return bytes(out)


def decrypt_packet(key: Aes128Key, iv: Iv128, ciphertext: bytes) -> bytes:
    """Inverts encrypt_packet; validates and strips the padding."""
    _require_key(key)
    _require_iv(iv)
    if not ciphertext or len(ciphertext) % BLOCK_SIZE:
        raise MalformedCiphertext(f"ciphertext length {len(ciphertext)} is not a positive multiple of {BLOCK_SIZE}")

    out = bytearray()
    previous = bytes(iv)
    for offset in range(0, len(ciphertext), BLOCK_SIZE):
        block = bytes(ciphertext[offset:offset + BLOCK_SIZE])
        out += _xor(aes128_decrypt_block(key, block), previous)
        previous = block

    pad = out[-1]
    if pad < 1 or pad > BLOCK_SIZE or out[-pad:] != bytes([pad]) * pad:
        raise PaddingError("invalid PKCS#7 padding")
    return bytes(out[:-pad])


# ---------------------------------------------------------
# 5. CHECKSUMS, CHAIN LINKS, DEVICE TAGS
# ---------------------------------------------------------
def checksum(data: bytes) -> Digest256:
    return Digest256(hashlib.sha256(data).digest())


def chain_hash(prev: Digest256, entry_bytes: bytes) -> Digest256:
    """Link hash: checksum(prev ∥ entry_bytes). Genesis uses ZERO_DIGEST as prev."""
    if len(prev) != DIGEST_SIZE:
        raise ContractError(f"previous hash must be {DIGEST_SIZE} bytes")
    return checksum(bytes(prev) + bytes(entry_bytes))


def device_mac(device_key: Aes128Key, entry_hash: Digest256) -> Digest256:
    """HMAC-SHA-256 tag binding an entry hash to the device that wrote it."""
    _require_key(device_key)
    return Digest256(hmac.new(bytes(device_key), bytes(entry_hash), hashlib.sha256).digest())


def verify_device_mac(device_key: Aes128Key, entry_hash: Digest256, tag: bytes) -> bool:
    return hmac.compare_digest(device_mac(device_key, entry_hash), bytes(tag))


# ---------------------------------------------------------
# 6. DETERMINISTIC IV SOURCE
# ---------------------------------------------------------
class IvGenerator:
    """
    Seeded IV source. Two generators with the same seed produce the same
    sequence, so scenarios replay bit-identically.

    Each IV is 12 seeded random bytes followed by a big-endian u32 draw
    counter, so one generator never repeats an IV in 2^32 draws and keeps no
    record of what it issued.
    """

    def __init__(self, seed):
        self._rng = np.random.default_rng(seed)
        self._count = 0

    @property
    def issued(self) -> int:
        return self._count

    def next_iv(self) -> Iv128:
        if self._count >= IV_COUNTER_LIMIT:
            raise ContractError("IV counter exhausted; start a generator with a new seed")
        iv = self._rng.bytes(BLOCK_SIZE - _IV_COUNTER.size) + _IV_COUNTER.pack(self._count)
        self._count += 1
        return Iv128(iv)
