"""Encrypted parameter updates and their wire format.

Wire layout (big-endian integers)::

    "FLUP" | version u8 | round u32 | party_id u32 | nonce[24]
           | aad_digest[32] | ct_len u32 | ciphertext

The whole header up to ``ct_len`` is authenticated as AEAD associated data.
The ciphertext field is the cipher suite's KEM encapsulation followed by the
AEAD output.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from teefl.enclave import SecretHandle
from teefl.errors import EnvelopeKeyError, InvalidInputError, StaleUpdateError, TamperError
from teefl.params import ParameterVector, as_vector

MAGIC = b"FLUP"
VERSION = 1
NONCE_LEN = 24
_HEADER = struct.Struct(">4sBII24s32sI")

RandBytes = Callable[[int], bytes]


def encode_vector(v) -> bytes:
    """``dim`` as u32 LE, then each value as little-endian binary64."""
    v = as_vector(v)
    return struct.pack("<I", v.size) + v.astype("<f8").tobytes()


def decode_vector(raw: bytes) -> ParameterVector:
    if len(raw) < 4:
        raise InvalidInputError("encoded vector truncated")
    (dim,) = struct.unpack("<I", raw[:4])
    if dim < 1 or len(raw) != 4 + 8 * dim:
        raise InvalidInputError("encoded vector has inconsistent length")
    return as_vector(np.frombuffer(raw, dtype="<f8", offset=4).astype(np.float64))


class CipherSuite(Protocol):
    """Key agreement plus AEAD; a post-quantum KEM would slot in here."""

    enc_len: int

    def encapsulate(self, public_key: bytes, rand: RandBytes) -> tuple[bytes, bytes]: ...

    def decapsulate(self, handle: SecretHandle, encapsulation: bytes) -> bytes: ...

    def seal(self, key: bytes, nonce: bytes, plaintext: bytes, aad: bytes) -> bytes: ...

    def open(self, key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes) -> bytes: ...


class X25519AesGcm:
    """Ephemeral X25519 + HKDF-SHA256 + AES-256-GCM (24-byte nonce)."""

    enc_len = 32

    @staticmethod
    def _kdf(shared: bytes, enc: bytes, pk: bytes) -> bytes:
        return HKDF(algorithm=hashes.SHA256(), length=32, salt=None,
                    info=b"teefl update v1" + enc + pk).derive(shared)

    def encapsulate(self, public_key: bytes, rand: RandBytes) -> tuple[bytes, bytes]:
        try:
            peer = X25519PublicKey.from_public_bytes(public_key)
        except ValueError as exc:
            raise EnvelopeKeyError(f"malformed public key: {exc}") from None
        eph = X25519PrivateKey.from_private_bytes(rand(32))
        enc = eph.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return enc, self._kdf(eph.exchange(peer), enc, public_key)

    def decapsulate(self, handle: SecretHandle, encapsulation: bytes) -> bytes:
        try:
            shared = handle.exchange(encapsulation)
        except ValueError:
            raise TamperError("invalid key encapsulation") from None
        return self._kdf(shared, encapsulation, handle.public_key)

    def seal(self, key, nonce, plaintext, aad):
        return AESGCM(key).encrypt(nonce, plaintext, aad)

    def open(self, key, nonce, ciphertext, aad):
        try:
            return AESGCM(key).decrypt(nonce, ciphertext, aad)
        except InvalidTag:
            raise TamperError("authentication failed") from None


DEFAULT_SUITE = X25519AesGcm()


def aad_digest(round_: int, party_id: int, sender_measurement: bytes) -> bytes:
    return hashlib.sha256(struct.pack(">II", round_, party_id) + sender_measurement).digest()


@dataclass(frozen=True)
class EncryptedUpdate:
    round: int
    party_id: int
    nonce: bytes
    ciphertext: bytes
    aad_digest: bytes

    def header(self) -> bytes:
        return _HEADER.pack(MAGIC, VERSION, self.round, self.party_id, self.nonce,
                            self.aad_digest, len(self.ciphertext))

    def to_bytes(self) -> bytes:
        return self.header() + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EncryptedUpdate":
        if len(raw) < _HEADER.size:
            raise TamperError("envelope truncated")
        magic, version, rnd, pid, nonce, digest, ct_len = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise TamperError("bad envelope magic")
        if version != VERSION:
            raise TamperError(f"unsupported envelope version {version}")
        if len(raw) - _HEADER.size != ct_len:
            raise TamperError("ciphertext length mismatch")
        return cls(rnd, pid, nonce, raw[_HEADER.size:], digest)


def encrypt_update(server_pk: bytes, v, round_: int, party_id: int,
                   sender_measurement: bytes, rng: RandBytes = os.urandom,
                   suite: CipherSuite = DEFAULT_SUITE) -> EncryptedUpdate:
    plaintext = encode_vector(v)
    enc, key = suite.encapsulate(server_pk, rng)
    nonce = rng(NONCE_LEN)
    digest = aad_digest(round_, party_id, sender_measurement)
    # ct_len is known before sealing: encapsulation + plaintext + 16-byte tag
    shell = EncryptedUpdate(round_, party_id, nonce, b"\0" * (len(enc) + len(plaintext) + 16), digest)
    sealed = suite.seal(key, nonce, plaintext, shell.header())
    return EncryptedUpdate(round_, party_id, nonce, enc + sealed, digest)


def decrypt_update(handle: SecretHandle, u, current_round: int | None = None,
                   sender_measurement: bytes | None = None,
                   suite: CipherSuite = DEFAULT_SUITE) -> tuple[ParameterVector, int, int]:
    """Open an update inside the holder's enclave.

    Raises :class:`TamperError` on any authentication failure and
    :class:`StaleUpdateError` if an authentic update is for another round.
    """
    if isinstance(u, (bytes, bytearray)):
        u = EncryptedUpdate.from_bytes(bytes(u))
    if len(u.nonce) != NONCE_LEN or len(u.ciphertext) <= suite.enc_len:
        raise TamperError("malformed envelope")
    enc, body = u.ciphertext[:suite.enc_len], u.ciphertext[suite.enc_len:]
    key = suite.decapsulate(handle, enc)
    plaintext = suite.open(key, u.nonce, body, u.header())
    if sender_measurement is not None and u.aad_digest != aad_digest(u.round, u.party_id, sender_measurement):
        raise TamperError("sender measurement does not match authenticated digest")
    if current_round is not None and u.round != current_round:
        raise StaleUpdateError(f"update for round {u.round}, current round is {current_round}")
    try:
        vec = decode_vector(plaintext)
    except InvalidInputError as exc:
        raise TamperError(f"authentic but undecodable payload: {exc}") from None
    return vec, u.round, u.party_id
