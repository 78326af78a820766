"""Round state machine: setup, mutual attestation, training, submission,
in-enclave aggregation, loss-gated continuation and dropout handling.

The server and each party are separate logical workers that exchange only
serialized messages through a :class:`~teefl.transport.MessageBus`.
"""

from __future__ import annotations

import hashlib
import logging
import secrets
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from teefl import enclave as tee
from teefl.adversary import AdversarySpec, backdoor_success_rate, model_replacement, poison_dataset
from teefl.config import ExperimentConfig
from teefl.envelope import EncryptedUpdate, decrypt_update, encrypt_update
from teefl.errors import InsufficientQuorumError, LifecycleError, StaleUpdateError, TamperError
from teefl.metrics import MetricsLog
from teefl.model import Dataset, ModelSpec, evaluate, gen_synthetic, init_model, local_train
from teefl.params import ParameterVector
from teefl.privacy import PIPELINE_STAGES, privatize
from teefl.robust_agg import AggregationOutcome, KrumScore, check_resiliency, robust_aggregate
from teefl.transport import (ATTESTATION, ENROLLMENT, GLOBAL, MODEL_HASH, SERVER, UPDATE,
                              MessageBus, party_name)

log = logging.getLogger(__name__)

TRAIN_CODE_TAG = b"teefl-local-train/v1\x00"
AGG_CODE_TAG = b"teefl-aggregate/v1\x00"

ACTIVE, DROPPED, REJECTED = "active", "dropped", "rejected"

# seed stream identifiers
(STREAM_DATA, STREAM_POISON, STREAM_TRAIN, STREAM_DP, STREAM_ENCLAVE, STREAM_EVAL,
 STREAM_INIT) = range(7)


def derive_seed(master: int, *tags: int) -> int:
    """Independent 63-bit seed for one (stream, round, party, ...) tuple."""
    state = np.random.SeedSequence([master, *tags]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def party_code(spec: ModelSpec) -> bytes:
    return TRAIN_CODE_TAG + spec.canonical_bytes()


def server_code(spec: ModelSpec) -> bytes:
    return AGG_CODE_TAG + spec.canonical_bytes()


def dataset_commitment(data: Dataset) -> bytes:
    return hashlib.sha256(data.to_bytes()).digest()


def flip_byte(blob: bytes, position: int = 0, mask: int = 0x01) -> bytes:
    b = bytearray(blob)
    b[position % len(b)] ^= mask
    return bytes(b)


@dataclass
class PartyState:
    id: int
    enclave: tee.Enclave
    dataset: Dataset
    train_data: Dataset
    adversary: AdversarySpec
    spec: ModelSpec
    status: str = ACTIVE
    verified_model_hash: bool = False
    server_pk: bytes | None = None
    handle: tee.SecretHandle | None = field(default=None, repr=False)
    reject_reason: str | None = None


@dataclass
class ServerState:
    enclave: tee.Enclave
    handle: tee.SecretHandle = field(repr=False)
    spec: ModelSpec
    eval_data: Dataset
    attestation_root: bytes = field(repr=False)
    expected_party: dict[int, bytes] = field(default_factory=dict)
    dataset_sizes: dict[int, int] = field(default_factory=dict)
    global_params: ParameterVector | None = None


@dataclass
class RoundState:
    round_index: int
    round_start_global: ParameterVector
    received: dict[int, bytes] = field(default_factory=dict)
    outcome: AggregationOutcome | None = None
    global_loss: float | None = None
    global_accuracy: float | None = None
    backdoor_success: float | None = None
    party_status: dict[int, str] = field(default_factory=dict)
    excluded: dict[int, str] = field(default_factory=dict)
    wall_clock_ms: float = 0.0


class Simulation:
    """One experiment: a server worker, party workers and the bus between them."""

    def __init__(self, config: ExperimentConfig, bus: MessageBus | None = None):
        self.config = config
        self.bus = bus or MessageBus()
        self.dp = config.dp.build()
        self.rounds: list[RoundState] = []
        self.pipeline_traces: dict[tuple[int, int], list[str]] = {}
        self.plaintexts: list[ParameterVector] = []
        self._pending_rejoin: dict[int, int] = {}
        self._in_round = False
        self.server: ServerState | None = None
        self.parties: list[PartyState] = []
        self.broadcast_verified: bool | None = None

    # -- setup -------------------------------------------------------------

    def setup(self) -> tuple[ServerState, list[PartyState]]:
        cfg = self.config
        agg = cfg.aggregation
        if agg.krum_enabled:
            check_resiliency(cfg.n_parties, agg.krum_k)
        master = cfg.master_seed
        spec = ModelSpec(cfg.model.dim, cfg.model.kind)
        root = secrets.token_bytes(32)

        e = tee.create(struct.pack(">QI", master, STREAM_ENCLAVE) + b"server")
        tee.add(e, b"", server_code(spec))
        tee.extend(e)
        tee.init(e, root)
        _, handle = tee.key_derive(e)
        eval_data = gen_synthetic(derive_seed(master, STREAM_EVAL), cfg.data.eval_samples,
                                  spec.dim, cfg.data.margin)
        server = ServerState(e, handle, spec, eval_data, root)
        server.global_params = init_model(spec, derive_seed(master, STREAM_INIT))
        self.server = server

        for pid in range(cfg.n_parties):
            self.parties.append(self._make_party(pid, spec))

        # publish the model hash; each party checks its local model spec
        for p in self.parties:
            self.bus.send(0, SERVER, party_name(p.id), MODEL_HASH, spec.hash)
            published = self.bus.transcript[-1].payload
            p.verified_model_hash = secrets.compare_digest(published, p.spec.hash)
            if not p.verified_model_hash:
                p.status = REJECTED
                p.reject_reason = "model hash mismatch"
                log.warning("party %d rejected: local model hash differs", p.id)

        for p in self.parties:
            if p.status == ACTIVE:
                self._enroll(p)
                self.attest_party(p)
        return server, self.parties

    def _make_party(self, pid: int, agreed: ModelSpec) -> PartyState:
        cfg = self.config
        pc = cfg.party(pid)
        spec = ModelSpec(pc.model.dim, pc.model.kind) if pc.model else agreed
        data = gen_synthetic(derive_seed(cfg.master_seed, STREAM_DATA, pid),
                             pc.n_samples or cfg.data.n_samples, spec.dim,
                             cfg.data.margin if pc.margin is None else pc.margin)
        adv = pc.adversary.build()
        train_data = poison_dataset(data, adv, derive_seed(cfg.master_seed, STREAM_POISON, pid))
        code = party_code(spec)
        if pc.tampered_code:
            code = flip_byte(code, len(code) - 1)
        e = tee.create(struct.pack(">QII", cfg.master_seed, STREAM_ENCLAVE, pid))
        tee.add(e, dataset_commitment(data), code)
        tee.extend(e)
        tee.init(e, self.server.attestation_root)
        _, handle = tee.key_derive(e)
        return PartyState(pid, e, data, train_data, adv, spec, handle=handle)

    def _enroll(self, p: PartyState) -> None:
        """Party registers its dataset commitment and size with the server."""
        commitment = p.enclave.data
        self.bus.send(0, party_name(p.id), SERVER, ENROLLMENT,
                      commitment + struct.pack(">I", p.dataset.size))
        payload = self.bus.transcript[-1].payload
        s = self.server
        s.expected_party[p.id] = tee.measure(payload[:32], party_code(s.spec))
        s.dataset_sizes[p.id] = struct.unpack(">I", payload[32:36])[0]

    # -- attestation -------------------------------------------------------

    def attest_party(self, p: PartyState, spoof_server_pk: bytes | None = None) -> tee.Verdict:
        """Mutual attestation between ``p`` and the server.

        ``spoof_server_pk`` substitutes the key the party is offered for
        encryption, to model a man-in-the-middle.
        """
        s = self.server
        rnd = len(self.rounds)
        party_report = tee.make_report(p.enclave, s.attestation_root, p.id)
        self.bus.send(rnd, party_name(p.id), SERVER, ATTESTATION, party_report.to_bytes())
        received = self.bus.transcript[-1].payload
        expected = s.expected_party.get(p.id)
        if expected is None:
            verdict = tee.Verdict(False, "server: party never enrolled")
        else:
            v = tee.attest(received, expected, s.attestation_root)
            verdict = v if v else tee.Verdict(False, f"server: {v.reason}")

        if verdict:
            server_report = tee.make_report(s.enclave, s.attestation_root, 0xFFFFFFFF)
            self.bus.send(rnd, SERVER, party_name(p.id), ATTESTATION, server_report.to_bytes())
            got = tee.AttestationReport.from_bytes(self.bus.transcript[-1].payload)
            v = tee.attest(got, tee.measure(b"", server_code(p.spec)), s.attestation_root)
            offered = spoof_server_pk if spoof_server_pk is not None else got.enclave_pk
            if not v:
                verdict = tee.Verdict(False, f"party: {v.reason}")
            elif not secrets.compare_digest(offered, got.enclave_pk):
                verdict = tee.Verdict(False, "party: server key does not match attested report")
            else:
                p.server_pk = got.enclave_pk

        if verdict:
            p.status = ACTIVE
            p.reject_reason = None
        else:
            p.status = REJECTED
            p.server_pk = None
            p.reject_reason = verdict.reason
            log.warning("party %d failed attestation: %s", p.id, verdict.reason)
        return verdict

    # -- dropout -----------------------------------------------------------

    def handle_dropout(self, party_id: int, when: str) -> list[PartyState]:
        p = self.parties[party_id]
        if p.status == DROPPED:
            log.warning("party %d already dropped; ignoring %s dropout", party_id, when)
            return self.parties
        if p.status != ACTIVE:
            raise LifecycleError(f"party {party_id} is {p.status}, cannot drop out")
        p.status = DROPPED
        log.info("party %d dropped (%s)", party_id, when)
        return self.parties

    def request_rejoin(self, party_id: int) -> None:
        """Queue a rejoin; it takes effect at the next round boundary."""
        p = self.parties[party_id]
        if p.status != DROPPED:
            log.warning("rejoin for party %d ignored: status %s", party_id, p.status)
            return
        # earliest round the party may take part in
        self._pending_rejoin[party_id] = len(self.rounds) + (2 if self._in_round else 1)

    def _process_rejoins(self, rnd: int) -> None:
        for pid, eligible in sorted(self._pending_rejoin.items()):
            if eligible <= rnd:
                del self._pending_rejoin[pid]
                self.attest_party(self.parties[pid])

    # -- rounds ------------------------------------------------------------

    def _dropouts(self, rnd: int) -> dict[int, str]:
        return {e.party_id: e.when for e in self.config.dropout_schedule if e.round == rnd}

    def _submit(self, p: PartyState, rnd: int, start: ParameterVector) -> EncryptedUpdate:
        """Party-side steps: train, attack, privatize, encrypt, send."""
        cfg, master = self.config, self.config.master_seed
        t = cfg.training
        trained = p.enclave.run(local_train, start, p.train_data, t.epochs, t.lr, t.batch,
                                derive_seed(master, STREAM_TRAIN, rnd, p.id))
        if p.adversary.boost > 1.0:
            trained = model_replacement(trained, start, p.adversary.boost)
        trace: list[str] = []
        rng = np.random.default_rng(derive_seed(master, STREAM_DP, rnd, p.id))
        update = p.enclave.run(privatize, trained, start, self.dp, rng, trace)
        if self.dp.enabled and tuple(trace) != PIPELINE_STAGES:
            raise AssertionError(f"DP pipeline ran out of order: {trace}")
        self.pipeline_traces[(rnd, p.id)] = trace
        self.plaintexts.append(update)
        return encrypt_update(p.server_pk, update, rnd, p.id, p.enclave.measurement)

    def run_round(self) -> RoundState:
        """One training round plus the server-side loss evaluation."""
        rnd = len(self.rounds) + 1
        self._process_rejoins(rnd)
        self._in_round = True
        try:
            return self._round(rnd)
        finally:
            self._in_round = False

    def _round(self, rnd: int) -> RoundState:
        cfg, s = self.config, self.server
        for e in cfg.rejoin_schedule:
            if e.round == rnd:
                self.request_rejoin(e.party_id)
        t0 = time.perf_counter()
        start = s.global_params.copy()
        state = RoundState(rnd, start)
        drops = self._dropouts(rnd)

        for p in self.parties:
            if p.status != ACTIVE:
                state.party_status[p.id] = p.status
                continue
            when = drops.get(p.id)
            if when == "before-training":
                self.handle_dropout(p.id, when)
                state.party_status[p.id] = "dropped-before-training"
                continue
            env = self._submit(p, rnd, start)
            if when == "after-encryption":
                self.handle_dropout(p.id, when)
                state.party_status[p.id] = "dropped-in-transit"
                continue
            self.bus.send(rnd, party_name(p.id), SERVER, UPDATE, env.to_bytes())
            state.party_status[p.id] = "submitted"
            if when == "after-submission":
                self.handle_dropout(p.id, when)
                state.party_status[p.id] = "submitted-then-dropped"

        # server worker: decrypt inside its enclave, ascending party order
        inbox = sorted(self.bus.inbox(SERVER, rnd, UPDATE),
                       key=lambda m: int(m.sender.split("-")[1]))
        vectors: dict[int, ParameterVector] = {}
        for m in inbox:
            pid = int(m.sender.split("-")[1])
            expected = s.expected_party.get(pid)
            try:
                vec, _, claimed = s.enclave.run(decrypt_update, s.handle, m.payload,
                                                current_round=rnd, sender_measurement=expected)
            except (TamperError, StaleUpdateError) as exc:
                state.excluded[pid] = f"{type(exc).__name__}: {exc}"
                log.warning("round %d: update from party %d excluded: %s", rnd, pid, exc)
                continue
            if claimed != pid or pid in vectors:
                state.excluded[pid] = "sender/party id mismatch or duplicate"
                continue
            vectors[pid] = vec
            state.received[pid] = m.payload

        if len(vectors) < cfg.min_participants:
            raise InsufficientQuorumError(
                f"round {rnd}: {len(vectors)} valid updates, need {cfg.min_participants}")
        ids = sorted(vectors)
        updates = [vectors[i] for i in ids]
        if cfg.aggregation.weights == "equal":
            weights = [1.0] * len(ids)
        else:
            weights = [float(s.dataset_sizes[i]) for i in ids]
        k = cfg.aggregation.krum_k if cfg.aggregation.krum_enabled else None
        if k is not None and not 2 * k + 2 < len(ids):
            raise InsufficientQuorumError(
                f"round {rnd}: {len(ids)} updates cannot satisfy 2k+2 < n for k={k}")
        outcome = s.enclave.run(robust_aggregate, updates, weights, k, cfg.aggregation.method)
        # positional indices -> party ids
        outcome.selected = [ids[i] for i in outcome.selected]
        outcome.discarded = [ids[i] for i in outcome.discarded]
        outcome.access_order = [ids[i] for i in outcome.access_order]
        outcome.scores = [KrumScore(ids[sc.party_index], sc.score) for sc in outcome.scores]
        state.outcome = outcome
        s.global_params = outcome.global_params
        state.global_loss, state.global_accuracy = s.enclave.run(evaluate, s.global_params, s.eval_data)
        trig = self._trigger_spec()
        if trig is not None:
            state.backdoor_success = backdoor_success_rate(
                s.global_params, s.eval_data, trig.trigger, trig.target_label)
        state.wall_clock_ms = (time.perf_counter() - t0) * 1000.0
        self.rounds.append(state)
        return state

    def _trigger_spec(self) -> AdversarySpec | None:
        for p in self.parties:
            if p.adversary.kind == "backdoor":
                return p.adversary
        return None

    # -- experiment --------------------------------------------------------

    def broadcast_global(self) -> bool:
        """Send E(M_G) to every active party, re-encrypted per party key."""
        s = self.server
        rnd = len(self.rounds)
        ok = True
        for p in self.parties:
            if p.status != ACTIVE:
                continue
            env = s.enclave.run(encrypt_update, p.enclave.public_key, s.global_params, rnd,
                                p.id, s.enclave.measurement)
            self.bus.send(rnd, SERVER, party_name(p.id), GLOBAL, env.to_bytes())
            got, _, _ = p.enclave.run(decrypt_update, p.handle, self.bus.transcript[-1].payload,
                                      current_round=rnd, sender_measurement=s.enclave.measurement)
            ok &= bool(np.array_equal(got, s.global_params))
        self.plaintexts.append(s.global_params)
        self.broadcast_verified = ok
        return ok

    def run(self, on_round=None) -> MetricsLog:
        """Run rounds until the loss threshold or ``max_rounds`` is reached."""
        if self.server is None:
            self.setup()
        stop = self.config.stopping
        reason = "max_rounds"
        t0 = time.perf_counter()
        while True:
            state = self.run_round()
            if on_round is not None:
                on_round(state)
            if state.global_loss <= stop.loss_threshold:
                reason = "loss_threshold"
                break
            if state.round_index >= stop.max_rounds:
                break
        self.broadcast_global()
        return self._metrics(reason, (time.perf_counter() - t0) * 1000.0)

    def _metrics(self, reason: str, total_ms: float) -> MetricsLog:
        cfg = self.config
        records = [round_record(r) for r in self.rounds]
        last = self.rounds[-1]
        summary = {
            "type": "summary",
            "rounds_executed": len(self.rounds),
            "stop_reason": reason,
            "final_loss": last.global_loss,
            "final_accuracy": last.global_accuracy,
            "final_backdoor_success": last.backdoor_success,
            "aggregation": cfg.aggregation.method,
            "krum_enabled": cfg.aggregation.krum_enabled,
            "krum_k": cfg.aggregation.krum_k,
            "attackers": cfg.attacker_ids(),
            "actual_attackers": len(cfg.attacker_ids()),
            "rejected": sorted(p.id for p in self.parties if p.status == REJECTED),
            "broadcast_verified": self.broadcast_verified,
            "messages": len(self.bus.transcript),
            "total_wall_clock_ms": total_ms,
        }
        return MetricsLog(records, summary)


def round_record(r: RoundState) -> dict:
    out = r.outcome
    return {
        "type": "round",
        "round": r.round_index,
        "global_loss": r.global_loss,
        "global_accuracy": r.global_accuracy,
        "backdoor_success": r.backdoor_success,
        "party_status": {str(k): v for k, v in sorted(r.party_status.items())},
        "excluded": {str(k): v for k, v in sorted(r.excluded.items())},
        "n_received": len(r.received),
        "krum_scores": {str(sc.party_index): sc.score for sc in out.scores},
        "selected": out.selected,
        "discarded": out.discarded,
        "wall_clock_ms": r.wall_clock_ms,
    }


def setup(config: ExperimentConfig) -> Simulation:
    sim = Simulation(config)
    sim.setup()
    return sim


def run_experiment(config: ExperimentConfig, bus: MessageBus | None = None,
                   on_round=None) -> MetricsLog:
    return Simulation(config, bus).run(on_round)
