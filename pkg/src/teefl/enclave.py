"""Software model of a trusted execution environment.

An :class:`Enclave` goes through ``Created -> Loaded -> Initialized ->
Removed``. Each lifecycle function mutates the enclave in place and raises
:class:`LifecycleError` on an out-of-order call. The secret half of the
enclave key pair is wrapped in :class:`SecretHandle`, which refuses every
serialization path.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
from dataclasses import dataclass
from typing import Callable

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from teefl.errors import ForbiddenOperationError, LifecycleError

DIGEST_LEN = 32
REPORT_MAGIC = b"FLAT"
REPORT_VERSION = 1


class Phase(enum.Enum):
    CREATED = "Created"
    LOADED = "Loaded"
    INITIALIZED = "Initialized"
    REMOVED = "Removed"


def measure(data: bytes, code: bytes) -> bytes:
    """SHA-256 over length-prefixed ``data`` then ``code``."""
    h = hashlib.sha256()
    h.update(struct.pack(">Q", len(data)))
    h.update(data)
    h.update(struct.pack(">Q", len(code)))
    h.update(code)
    return h.digest()


class SecretHandle:
    """Opaque reference to an enclave's private key.

    Only code that goes through :meth:`exchange` can use the key, and only
    while the owning enclave is still initialized.
    """

    __slots__ = ("_key", "_owner")

    def __init__(self, key: X25519PrivateKey, owner: "Enclave"):
        self._key = key
        self._owner = owner

    def exchange(self, peer_public: bytes) -> bytes:
        if self._owner.phase is not Phase.INITIALIZED or self._owner._handle is not self:
            raise LifecycleError("secret handle used outside an initialized enclave")
        return self._key.exchange(X25519PublicKey.from_public_bytes(peer_public))

    @property
    def owner_id(self) -> int:
        return id(self._owner)

    @property
    def public_key(self) -> bytes | None:
        return self._owner.public_key

    def _forbid(self, *args, **kwargs):
        raise ForbiddenOperationError("enclave secret keys never leave the enclave")

    __reduce__ = __reduce_ex__ = __getstate__ = __bytes__ = _forbid
    __copy__ = __deepcopy__ = _forbid

    def __repr__(self) -> str:
        return "<SecretHandle sealed>"


class Enclave:
    """Software enclave ``E(data, code)``.

    ``instance_seed`` stands in for the per-CPU fused key material, so two
    enclaves running the same code still derive different key pairs.
    """

    def __init__(self, instance_seed: bytes = b""):
        self.phase = Phase.CREATED
        self.data = b""
        self.code = b""
        self.measurement: bytes | None = None
        self.init_token: bytes | None = None
        self.public_key: bytes | None = None
        self._instance_seed = bytes(instance_seed)
        self._handle: SecretHandle | None = None

    def __repr__(self) -> str:
        m = self.measurement.hex()[:12] if self.measurement else None
        return f"Enclave(phase={self.phase.value}, measurement={m})"

    def __reduce_ex__(self, protocol):
        raise ForbiddenOperationError("enclaves cannot be serialized")

    def _require(self, *phases: Phase) -> None:
        if self.phase not in phases:
            allowed = "/".join(p.value for p in phases)
            raise LifecycleError(f"operation requires phase {allowed}, enclave is {self.phase.value}")

    def run(self, fn: Callable, *args, **kwargs):
        """Execute loaded code; only an initialized enclave may run anything."""
        self._require(Phase.INITIALIZED)
        return fn(*args, **kwargs)


def create(instance_seed: bytes = b"") -> Enclave:
    return Enclave(instance_seed)


def add(e: Enclave, data: bytes, code: bytes) -> Enclave:
    e._require(Phase.CREATED)
    e.data = bytes(data)
    e.code = bytes(code)
    e.phase = Phase.LOADED
    return e


def extend(e: Enclave) -> bytes:
    e._require(Phase.LOADED)
    e.measurement = measure(e.data, e.code)
    return e.measurement


def init(e: Enclave, attestation_root: bytes) -> tuple[Enclave, bytes]:
    e._require(Phase.LOADED)
    if e.measurement is None:
        raise LifecycleError("enclave must be measured (extend) before init")
    e.init_token = hmac.new(attestation_root, e.measurement, hashlib.sha256).digest()
    e.phase = Phase.INITIALIZED
    return e, e.init_token


def key_derive(e: Enclave) -> tuple[bytes, SecretHandle]:
    """Derive the enclave key pair from (measurement, instance seed).

    Repeated calls return the same public key and handle.
    """
    e._require(Phase.INITIALIZED)
    if e._handle is None:
        raw = HKDF(algorithm=hashes.SHA256(), length=32, salt=e.measurement,
                   info=b"teefl enclave x25519").derive(e._instance_seed or b"\x00")
        sk = X25519PrivateKey.from_private_bytes(raw)
        e.public_key = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        e._handle = SecretHandle(sk, e)
    return e.public_key, e._handle


def remove(e: Enclave) -> Enclave:
    e._require(Phase.CREATED, Phase.LOADED, Phase.INITIALIZED)
    e.data = b""
    e.code = b""
    e.measurement = None
    e.init_token = None
    e.public_key = None
    e._handle = None
    e.phase = Phase.REMOVED
    return e


@dataclass(frozen=True)
class AttestationReport:
    signer_id: int
    measurement: bytes
    init_token: bytes
    enclave_pk: bytes

    def to_bytes(self) -> bytes:
        return (REPORT_MAGIC + struct.pack(">BI", REPORT_VERSION, self.signer_id)
                + self.measurement + self.init_token
                + struct.pack(">H", len(self.enclave_pk)) + self.enclave_pk)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AttestationReport":
        fixed = 4 + 1 + 4 + DIGEST_LEN + DIGEST_LEN + 2
        if len(raw) < fixed:
            raise ValueError("report truncated")
        if raw[:4] != REPORT_MAGIC:
            raise ValueError("bad magic")
        version, signer = struct.unpack(">BI", raw[4:9])
        if version != REPORT_VERSION:
            raise ValueError(f"unsupported version {version}")
        meas = raw[9:41]
        token = raw[41:73]
        (pk_len,) = struct.unpack(">H", raw[73:75])
        if len(raw) != fixed + pk_len:
            raise ValueError("length mismatch")
        return cls(signer, meas, token, raw[75:])


def _report_mac(root: bytes, measurement: bytes, pk: bytes, signer_id: int) -> bytes:
    msg = measurement + pk + struct.pack(">I", signer_id)
    return hmac.new(root, msg, hashlib.sha256).digest()


def make_report(e: Enclave, attestation_root: bytes, signer_id: int) -> AttestationReport:
    """Quote an initialized, keyed enclave under the attestation root."""
    e._require(Phase.INITIALIZED)
    if e.public_key is None:
        raise LifecycleError("key_derive must run before a report is produced")
    token = _report_mac(attestation_root, e.measurement, e.public_key, signer_id)
    return AttestationReport(signer_id, e.measurement, token, e.public_key)


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str = "ok"

    def __bool__(self) -> bool:
        return self.accepted


def attest(report, expected: bytes, attestation_root: bytes) -> Verdict:
    """Check a report (object or wire bytes) against an expected measurement."""
    if isinstance(report, (bytes, bytearray)):
        try:
            report = AttestationReport.from_bytes(bytes(report))
        except ValueError as exc:
            return Verdict(False, f"parse failure: {exc}")
    if (len(report.measurement) != DIGEST_LEN or len(report.init_token) != DIGEST_LEN
            or not report.enclave_pk):
        return Verdict(False, "parse failure: malformed fields")
    want = _report_mac(attestation_root, report.measurement, report.enclave_pk, report.signer_id)
    mac_ok = hmac.compare_digest(want, report.init_token)
    if not hmac.compare_digest(report.measurement, expected):
        return Verdict(False, "measurement mismatch")
    if not mac_ok:
        return Verdict(False, "bad token")
    return Verdict(True)
