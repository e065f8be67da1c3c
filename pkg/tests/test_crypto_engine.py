"""
Tests for the crypto engine: AES-128 known answers, CBC/PKCS#7 packets, and
the SHA-256 / HMAC primitives, checked against pycryptodome as an
independent reference.
"""

import sys
import os

import numpy as np
import pytest
from Crypto.Cipher import AES
from Crypto.Hash import HMAC, SHA256
from Crypto.Util.Padding import pad

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src', 'voting'))

from crypto_engine import (
    ZERO_DIGEST,
    IV_COUNTER_LIMIT,
    IvGenerator,
    aes128_decrypt_block,
    aes128_encrypt_block,
    chain_hash,
    checksum,
    decrypt_packet,
    device_mac,
    encrypt_packet,
    padded_length,
    verify_device_mac,
)
from errors import ContractError, MalformedCiphertext, PaddingError

FIPS_KEY = bytes.fromhex("000102030405060708090a0b0c0d0e0f")
FIPS_PLAINTEXT = bytes.fromhex("00112233445566778899aabbccddeeff")
FIPS_CIPHERTEXT = bytes.fromhex("69c4e0d86a7b0430d8cdb78070b4c55a")


# ---------------------------------------------------------
# TEST 1: Known-answer vectors
# ---------------------------------------------------------
def test_fips_197_known_answer():
    assert aes128_encrypt_block(FIPS_KEY, FIPS_PLAINTEXT) == FIPS_CIPHERTEXT
    assert aes128_decrypt_block(FIPS_KEY, FIPS_CIPHERTEXT) == FIPS_PLAINTEXT


def test_all_zero_key_and_block():
    assert aes128_encrypt_block(bytes(16), bytes(16)).hex() == "66e94bd4ef8a2c3b884cfa59ca342b2e"


def test_block_cipher_matches_reference():
    rng = np.random.default_rng(1)
    for _ in range(200):
        key, block = rng.bytes(16), rng.bytes(16)
        expected = AES.new(key, AES.MODE_ECB).encrypt(block)
        assert aes128_encrypt_block(key, block) == expected
        assert aes128_decrypt_block(key, expected) == block


def test_block_rejects_bad_lengths():
    with pytest.raises(ContractError):
        aes128_encrypt_block(bytes(15), bytes(16))
    with pytest.raises(ContractError):
        aes128_encrypt_block(bytes(16), bytes(17))
    with pytest.raises(ContractError):
        aes128_decrypt_block(bytes(16), b"")


# ---------------------------------------------------------
# TEST 2: CBC packets
# ---------------------------------------------------------
def test_padded_length():
    assert padded_length(1) == 16
    assert padded_length(15) == 16
    assert padded_length(16) == 32
    assert padded_length(21) == 32


def test_packet_matches_reference_cbc():
    rng = np.random.default_rng(2)
    for length in range(1, 1025):
        key, iv, data = rng.bytes(16), rng.bytes(16), rng.bytes(length)
        expected = AES.new(key, AES.MODE_CBC, iv).encrypt(pad(data, 16))
        ciphertext = encrypt_packet(key, iv, data)
        assert len(ciphertext) == 16 * (length // 16 + 1)
        assert ciphertext == expected


def test_packet_inverse_over_random_cases():
    rng = np.random.default_rng(3)
    for _ in range(10_000):
        key, iv = rng.bytes(16), rng.bytes(16)
        data = rng.bytes(int(rng.integers(1, 40)))
        ciphertext = encrypt_packet(key, iv, data)
        assert len(ciphertext) == padded_length(len(data))
        assert decrypt_packet(key, iv, ciphertext) == data


def test_empty_packet_is_a_contract_error():
    with pytest.raises(ContractError):
        encrypt_packet(FIPS_KEY, bytes(16), b"")


def test_ciphertext_length_must_be_block_multiple():
    with pytest.raises(MalformedCiphertext):
        decrypt_packet(FIPS_KEY, bytes(16), bytes(15))
    with pytest.raises(MalformedCiphertext):
        decrypt_packet(FIPS_KEY, bytes(16), b"")


def test_zero_pad_byte_is_a_padding_error():
    iv = bytes(range(16))
    # one block that decrypts to sixteen zero bytes
    ciphertext = aes128_encrypt_block(FIPS_KEY, iv)
    with pytest.raises(PaddingError):
        decrypt_packet(FIPS_KEY, iv, ciphertext)


def test_inconsistent_padding_is_rejected():
    iv = bytes(16)
    plaintext = bytes(14) + b"\x01\x02"
    ciphertext = aes128_encrypt_block(FIPS_KEY, plaintext)
    with pytest.raises(PaddingError):
        decrypt_packet(FIPS_KEY, iv, ciphertext)


def test_forced_bad_pad_byte_is_a_padding_error():
    rng = np.random.default_rng(5)
    for length in range(1, 100):
        key, iv, data = rng.bytes(16), rng.bytes(16), rng.bytes(length)
        ciphertext = encrypt_packet(key, iv, data)
        # steer the final plaintext byte to 0xff through the previous block
        mask = (len(ciphertext) - length) ^ 0xFF
        if len(ciphertext) == 16:
            iv = iv[:15] + bytes([iv[15] ^ mask])
        else:
            damaged = bytearray(ciphertext)
            damaged[-17] ^= mask
            ciphertext = bytes(damaged)
        with pytest.raises(PaddingError):
            decrypt_packet(key, iv, ciphertext)


def _garbled_decrypts(pairs):
    """Count of PaddingErrors; any plaintext that does come back must differ from the original."""
    padding_errors = 0
    for key, iv, ciphertext, data in pairs:
        try:
            assert decrypt_packet(key, iv, ciphertext) != data
        except PaddingError:
            padding_errors += 1
    return padding_errors


def test_last_block_flip_never_returns_the_plaintext():
    rng = np.random.default_rng(6)
    cases = []
    for _ in range(300):
        key, iv, data = rng.bytes(16), rng.bytes(16), rng.bytes(int(rng.integers(1, 60)))
        damaged = bytearray(encrypt_packet(key, iv, data))
        damaged[-int(rng.integers(1, 17))] ^= 1 << int(rng.integers(0, 8))
        cases.append((key, iv, bytes(damaged), data))
    assert _garbled_decrypts(cases) > 250


def test_wrong_key_never_returns_the_plaintext():
    rng = np.random.default_rng(7)
    cases = []
    for _ in range(300):
        key, other, iv = rng.bytes(16), rng.bytes(16), rng.bytes(16)
        data = rng.bytes(int(rng.integers(1, 60)))
        cases.append((other, iv, encrypt_packet(key, iv, data), data))
    assert _garbled_decrypts(cases) > 250


def test_bad_iv_length():
    with pytest.raises(ContractError):
        encrypt_packet(FIPS_KEY, bytes(8), b"vote")


# ---------------------------------------------------------
# TEST 3: Hashes, chain links and device tags
# ---------------------------------------------------------
def test_checksum_and_mac_match_reference():
    rng = np.random.default_rng(4)
    for _ in range(100):
        data = rng.bytes(int(rng.integers(0, 200)))
        key = rng.bytes(16)
        assert checksum(data) == SHA256.new(data).digest()
        digest = checksum(data)
        assert device_mac(key, digest) == HMAC.new(key, digest, digestmod=SHA256).digest()


def test_chain_hash_links_previous_digest():
    first = chain_hash(ZERO_DIGEST, b"entry-0")
    assert first == checksum(bytes(32) + b"entry-0")
    second = chain_hash(first, b"entry-1")
    assert second != chain_hash(ZERO_DIGEST, b"entry-1")
    with pytest.raises(ContractError):
        chain_hash(bytes(31), b"x")


def test_verify_device_mac():
    digest = checksum(b"entry")
    tag = device_mac(FIPS_KEY, digest)
    assert verify_device_mac(FIPS_KEY, digest, tag)
    assert not verify_device_mac(bytes(16), digest, tag)
    assert not verify_device_mac(FIPS_KEY, digest, bytes(32))


# ---------------------------------------------------------
# TEST 4: IV source
# ---------------------------------------------------------
def test_iv_generator_is_seeded_and_unique():
    gen_a, gen_b = IvGenerator([5, 1]), IvGenerator([5, 1])
    seq_a = [gen_a.next_iv() for _ in range(500)]
    seq_b = [gen_b.next_iv() for _ in range(500)]
    assert seq_a == seq_b
    assert len(set(seq_a)) == 500
    assert all(len(iv) == 16 for iv in seq_a)
    assert IvGenerator([6, 1]).next_iv() != seq_a[0]


def test_iv_generator_keeps_constant_state():
    gen = IvGenerator(0)
    ivs = [gen.next_iv() for _ in range(3)]
    assert [iv[-4:] for iv in ivs] == [bytes(3) + bytes([i]) for i in range(3)]
    assert gen.issued == 3

    gen._count = IV_COUNTER_LIMIT - 1
    assert gen.next_iv()[-4:] == b"\xff\xff\xff\xff"
    with pytest.raises(ContractError):
        gen.next_iv()
