"""Symmetric primitives and XOR key algebra shared by the protocol modules.

Everything here is either pure or works on caller-owned state (a NonceSource),
so distinct callers never share mutable data.
"""
import hashlib
import hmac
import logging
import os
from dataclasses import dataclass, field
from functools import reduce

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESCCM, AESGCM

from config import KEY_BITS, KEY_WIDTHS, NONCE_BITS

logger = logging.getLogger(__name__)

AEAD_NONCE_BYTES = 12
AEAD_TAG_BYTES = 16
NONCE_BYTES = NONCE_BITS // 8
NONCE_LIMIT = 2 ** NONCE_BITS - 1
MAX_NONCE_DRAWS = 64

_AEADS = {
    'aes-gcm': AESGCM,
    'aes-ccm': AESCCM,
}

_HASHES = {
    'sha256': hashlib.sha256,
    'sha3-256': hashlib.sha3_256,
    'blake2s': hashlib.blake2s,
}


class CryptoError(Exception):
    pass


class KeyWidthMismatch(CryptoError):
    pass


class EmptyKeyList(CryptoError):
    pass


class IntegrityFailure(CryptoError):
    """Authenticated decryption failed: wrong key or tampered ciphertext."""


class NonceOverflow(CryptoError):
    pass


class NonceExhausted(CryptoError):
    pass


@dataclass(frozen=True)
class CryptoSuite:
    key_bits: int = KEY_BITS
    cipher: str = 'aes-gcm'
    hash_name: str = 'sha256'

    def __post_init__(self):
        if self.key_bits not in KEY_WIDTHS:
            raise CryptoError(f"Unsupported key width {self.key_bits}")
        if self.cipher not in _AEADS:
            raise CryptoError(f"Unknown cipher {self.cipher}")
        if self.hash_name not in _HASHES:
            raise CryptoError(f"Unknown hash {self.hash_name}")

    @property
    def key_bytes(self):
        return self.key_bits // 8

    @property
    def digest_size(self):
        return _HASHES[self.hash_name]().digest_size

    @classmethod
    def from_config(cls, protocol_config):
        return cls(protocol_config.key_bits, protocol_config.cipher, protocol_config.hash_name)


DEFAULT_SUITE = CryptoSuite()


@dataclass(frozen=True)
class KeyMaterial:
    bits: bytes

    @property
    def width(self):
        return len(self.bits) * 8

    @classmethod
    def zero(cls, width=KEY_BITS):
        return cls(bytes(width // 8))

    @classmethod
    def random(cls, rng, width=KEY_BITS):
        return cls(rng.bytes(width // 8))

    @classmethod
    def from_hex(cls, text):
        return cls(bytes.fromhex(text))

    def hex(self):
        return self.bits.hex()

    def is_zero(self):
        return not any(self.bits)

    def __xor__(self, other):
        if self.width != other.width:
            raise KeyWidthMismatch(f"Cannot XOR {self.width}-bit and {other.width}-bit keys")
        value = int.from_bytes(self.bits, 'big') ^ int.from_bytes(other.bits, 'big')
        return KeyMaterial(value.to_bytes(len(self.bits), 'big'))

    def __repr__(self):
        return f"KeyMaterial({self.width} bits, {self.bits[:4].hex()}..)"


@dataclass(frozen=True)
class Nonce:
    value: int
    issuer: int

    def to_bytes(self):
        return self.value.to_bytes(NONCE_BYTES, 'big')


def succ(nonce):
    """The "nonce + 1" reply value; wrapping past 2^64 - 1 is an error."""
    if nonce.value >= NONCE_LIMIT:
        raise NonceOverflow(f"Nonce of node {nonce.issuer} cannot be incremented")
    return Nonce(nonce.value + 1, nonce.issuer)


@dataclass
class NonceSource:
    """Per-node seeded nonce generator with its used-set."""
    issuer: int
    rng: np.random.Generator
    issued: set = field(default_factory=set)


def fresh_nonce(source):
    # the top value is never drawn so that its successor always exists
    for _ in range(MAX_NONCE_DRAWS):
        value = int(source.rng.integers(0, NONCE_LIMIT, dtype=np.uint64))
        if value not in source.issued:
            source.issued.add(value)
            return Nonce(value, source.issuer)
    raise NonceExhausted(f"Node {source.issuer} could not draw an unused nonce")


def xor_combine(parts):
    parts = list(parts)
    if not parts:
        raise EmptyKeyList("xor_combine needs at least one key")
    width = parts[0].width
    for part in parts[1:]:
        if part.width != width:
            raise KeyWidthMismatch(f"Mixed key widths {width} and {part.width}")
    return reduce(lambda a, b: a ^ b, parts)


def _check_width(key, suite):
    if key.width != suite.key_bits:
        raise KeyWidthMismatch(f"Key is {key.width} bits, suite expects {suite.key_bits}")


def encrypt(key, plaintext, *, suite=DEFAULT_SUITE, rng=None, associated_data=None):
    """AEAD-encrypt; the output is aead_nonce || ciphertext || tag.

    A seeded rng makes the AEAD nonce, and thus the ciphertext, reproducible.
    """
    _check_width(key, suite)
    aead_nonce = rng.bytes(AEAD_NONCE_BYTES) if rng is not None else os.urandom(AEAD_NONCE_BYTES)
    aead = _AEADS[suite.cipher](key.bits)
    return aead_nonce + aead.encrypt(aead_nonce, bytes(plaintext), associated_data)


def decrypt(key, ciphertext, *, suite=DEFAULT_SUITE, associated_data=None):
    _check_width(key, suite)
    if len(ciphertext) < AEAD_NONCE_BYTES + AEAD_TAG_BYTES:
        raise IntegrityFailure("Ciphertext too short")
    aead = _AEADS[suite.cipher](key.bits)
    try:
        return aead.decrypt(ciphertext[:AEAD_NONCE_BYTES], ciphertext[AEAD_NONCE_BYTES:], associated_data)
    except InvalidTag as e:
        raise IntegrityFailure("Authentication tag mismatch") from e


def hash_digest(data, *, suite=DEFAULT_SUITE):
    return _HASHES[suite.hash_name](bytes(data)).digest()


def keyed_hash(key, data, *, suite=DEFAULT_SUITE):
    # HMAC: two-pass keyed construction over the suite hash
    return hmac.new(key.bits, bytes(data), _HASHES[suite.hash_name]).digest()


def verify_keyed_hash(key, data, digest, *, suite=DEFAULT_SUITE):
    return hmac.compare_digest(keyed_hash(key, data, suite=suite), bytes(digest))


def derive_key(data, *, suite=DEFAULT_SUITE):
    """Truncate hash(data) to one key width."""
    return KeyMaterial(hash_digest(data, suite=suite)[:suite.key_bytes])
