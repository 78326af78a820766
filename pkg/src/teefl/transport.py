"""In-process message bus between simulated workers.

Every message is raw bytes of a known wire format. Parameter vectors may
only travel as encrypted envelopes; anything else is refused at send time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

from teefl.enclave import AttestationReport
from teefl.envelope import EncryptedUpdate, encode_vector
from teefl.errors import PlaintextLeakError, TamperError

MODEL_HASH = "model-hash"
ENROLLMENT = "enrollment"
ATTESTATION = "attestation-report"
UPDATE = "encrypted-update"
GLOBAL = "encrypted-global"
KINDS = (MODEL_HASH, ENROLLMENT, ATTESTATION, UPDATE, GLOBAL)
ENCRYPTED_KINDS = (UPDATE, GLOBAL)

SERVER = "server"


def party_name(pid: int) -> str:
    return f"party-{pid}"


@dataclass(frozen=True)
class Message:
    round: int
    sender: str
    receiver: str
    kind: str
    payload: bytes


class MessageBus:
    """Ordered transcript plus per-receiver delivery.

    ``interceptor`` may rewrite a payload in flight (used to model a hostile
    network); it sees and returns bytes.
    """

    def __init__(self, interceptor: Callable[[Message], bytes] | None = None):
        self.transcript: list[Message] = []
        self.interceptor = interceptor
        self._nonces: set[bytes] = set()

    def send(self, round_: int, sender: str, receiver: str, kind: str, payload: bytes) -> None:
        if kind not in KINDS:
            raise PlaintextLeakError(f"message kind {kind!r} is not an allowed wire type")
        if not isinstance(payload, (bytes, bytearray)):
            raise PlaintextLeakError(f"{kind} payload must be serialized bytes, got {type(payload).__name__}")
        payload = bytes(payload)
        if kind in ENCRYPTED_KINDS:
            nonce = EncryptedUpdate.from_bytes(payload).nonce
            if nonce in self._nonces:
                raise PlaintextLeakError("envelope nonce reused within the experiment")
            self._nonces.add(nonce)
        msg = Message(round_, sender, receiver, kind, payload)
        if self.interceptor is not None:
            msg = Message(round_, sender, receiver, kind, bytes(self.interceptor(msg)))
        self.transcript.append(msg)

    def inbox(self, receiver: str, round_: int, kind: str) -> list[Message]:
        return [m for m in self.transcript
                if m.receiver == receiver and m.round == round_ and m.kind == kind]

    @property
    def nonce_count(self) -> int:
        return len(self._nonces)

    def export(self) -> list[dict]:
        return [{"round": m.round, "sender": m.sender, "receiver": m.receiver,
                 "type": m.kind, "bytes": len(m.payload)} for m in self.transcript]


def audit_transcript(transcript: Iterable[Message], plaintexts: Iterable) -> list[str]:
    """List every message that could carry plaintext parameters.

    Checks that each message has an allowed kind and parses as its wire
    format, and that no payload contains the raw binary64 encoding of any
    known plaintext vector.
    """
    needles = [encode_vector(p)[4:] for p in plaintexts]
    problems = []
    for i, m in enumerate(transcript):
        where = f"#{i} {m.sender}->{m.receiver} {m.kind}"
        if m.kind not in KINDS:
            problems.append(f"{where}: unknown kind")
            continue
        if m.kind in ENCRYPTED_KINDS:
            try:
                EncryptedUpdate.from_bytes(m.payload)
            except TamperError as exc:
                problems.append(f"{where}: not an envelope ({exc})")
        elif m.kind == ATTESTATION:
            try:
                AttestationReport.from_bytes(m.payload)
            except ValueError as exc:
                problems.append(f"{where}: not a report ({exc})")
        elif len(m.payload) > 64:
            problems.append(f"{where}: oversized metadata payload")
        for needle in needles:
            if needle and needle in m.payload:
                problems.append(f"{where}: contains a plaintext parameter vector")
                break
    return problems
