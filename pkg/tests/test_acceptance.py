"""Acceptance criteria, one test per criterion.

Each test records a ``[PASS]``/``[FAIL]`` line that is repeated in the
pytest terminal summary. Run alone with::

    pytest tests/test_acceptance.py -v
"""

import random
import struct

import numpy as np
import pytest

from teefl import enclave as tee
from teefl.config import from_dict
from teefl.envelope import decrypt_update, encrypt_update
from teefl.errors import StaleUpdateError, TamperError
from teefl.model import ModelSpec, gen_synthetic, init_model, local_train
from teefl.protocol import (ACTIVE, DROPPED, REJECTED, STREAM_DATA, STREAM_INIT, STREAM_TRAIN,
                             Simulation, derive_seed, party_code, run_experiment, server_code)
from teefl.robust_agg import aggregate, krum_scores, multi_krum_select
from teefl.transport import audit_transcript


def brute_force_krum(updates, k):
    n = len(updates)
    pts = [np.asarray(u, dtype=float) for u in updates]
    scores = []
    for i in range(n):
        dists = sorted((float(((pts[i] - pts[j]) ** 2).sum()), j) for j in range(n) if j != i)
        scores.append(sum(d for d, _ in dists[:n - k - 2]))
    order = sorted(range(n), key=lambda i: (scores[i], i))
    return scores, sorted(order[:n - k]), sorted(order[n - k:])


def test_01_krum_oracle_equivalence(criterion):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(3, 11))
        k = int(rng.integers(0, (n - 3) // 2 + 1))
        ups = list(rng.normal(size=(n, int(rng.integers(1, 6)))))
        scores = krum_scores(ups, k)
        ref, ref_sel, ref_dis = brute_force_krum(ups, k)
        ok = (np.allclose([s.score for s in scores], ref, rtol=0, atol=1e-9)
              and multi_krum_select(scores, k) == (ref_sel, ref_dis))
        mismatches += not ok
    criterion("1 Krum oracle equivalence (200 instances)", mismatches == 0, f"{mismatches} mismatches")


def test_02_worked_krum_instance(criterion):
    ups = [[0.0], [1.0], [2.0], [3.0], [4.0], [100.0]]
    scores = [s.score for s in krum_scores(ups, 1)]
    selected, discarded = multi_krum_select(krum_scores(ups, 1), 1)
    mean = aggregate(ups, selected, [1.0] * 6)[0]
    ok = scores == [14, 6, 6, 6, 14, 28229] and discarded == [5] and mean == 2.0
    criterion("2 worked Krum instance", ok, f"scores={scores} discarded={discarded} mean={mean}")


def test_03_resiliency_trials(criterion):
    kept = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        n_honest, k, dim, r = 6, 1, int(rng.integers(1, 6)), float(rng.uniform(0.01, 10))
        centre = rng.normal(0, 50, dim)
        dirs = rng.normal(size=(n_honest, dim))
        radii = r * rng.random((n_honest, 1))
        honest = centre + dirs / np.linalg.norm(dirs, axis=1, keepdims=True) * radii
        away = rng.normal(size=dim)
        adv = centre + away / np.linalg.norm(away) * 60 * r * (1 + rng.random())
        pos = int(rng.integers(0, n_honest + 1))
        ups = list(np.insert(honest, pos, adv, axis=0))
        _, discarded = multi_krum_select(krum_scores(ups, k), k)
        kept += pos not in discarded
    criterion("3 resiliency trials (1000 seeds)", kept == 0, f"adversary kept in {kept} trials")


def central_fedavg(master, n, rounds, n_samples=200, dim=5, margin=2.0, epochs=1, lr=0.1, batch=32):
    """FedAvg computed directly: no enclaves, no encryption, no bus."""
    spec = ModelSpec(dim)
    data = [gen_synthetic(derive_seed(master, STREAM_DATA, i), n_samples, dim, margin) for i in range(n)]
    g = init_model(spec, derive_seed(master, STREAM_INIT))
    out = []
    for t in range(1, rounds + 1):
        g = np.mean([local_train(g, data[i], epochs, lr, batch, derive_seed(master, STREAM_TRAIN, t, i))
                     for i in range(n)], axis=0)
        out.append(g)
    return out


def test_04_honest_convergence_and_fedavg_equivalence(criterion):
    cfg = from_dict({"master_seed": 17, "n_parties": 6, "data": {"n_samples": 200, "margin": 2.0},
                     "stopping": {"max_rounds": 20}})
    sim = Simulation(cfg)
    log = sim.run()
    oracle = central_fedavg(17, 6, 20)
    worst = max(float(np.max(np.abs(r.outcome.global_params - o))) for r, o in zip(sim.rounds, oracle))
    acc = log.summary["final_accuracy"]
    ok = len(sim.rounds) == 20 and acc >= 0.95 and worst <= 1e-9
    criterion("4 honest convergence + FedAvg equivalence", ok, f"acc={acc:.4f} max|diff|={worst:.2e}")


def _acc(seed, **over):
    raw = {"master_seed": seed, "n_parties": 6, "stopping": {"max_rounds": 20}}
    raw.update(over)
    return run_experiment(from_dict(raw)).summary["final_accuracy"]


def test_05_model_replacement_defense(criterion):
    attacker = [{"id": 5, "adversary": {"kind": "model-replacement", "fraction": 1.0, "boost": 20}}]
    rows = []
    for seed in range(5):
        honest = _acc(seed)
        defended = _acc(seed, parties=attacker, aggregation={"krum_enabled": True, "krum_k": 1})
        undefended = _acc(seed, parties=attacker)
        rows.append((honest, defended, undefended))
    ok = all(abs(h - d) <= 0.02 and h - u > 0.10 for h, d, u in rows)
    detail = "; ".join(f"h={h:.3f} krum={d:.3f} none={u:.3f}" for h, d, u in rows)
    criterion("5 model-replacement defense", ok, detail)


def test_06_backdoor_dp_direction(criterion):
    attack = [{"id": 5, "adversary": {"kind": "backdoor", "fraction": 0.5, "boost": 20,
                                      "trigger": {"coords": [1, 2], "offset": 3.0}, "target_label": 0}}]
    dp_on = {"enabled": True, "clip_bound": 1.0, "noise_sigma": 0.05}
    training = {"epochs": 2, "lr": 0.5, "batch": 32}
    bd = {False: [], True: []}
    acc = {False: [], True: []}
    clean = {False: [], True: []}
    for seed in range(20):
        for dp in (False, True):
            raw = {"master_seed": seed, "n_parties": 6, "parties": attack, "training": training,
                   "stopping": {"max_rounds": 20}, "dp": dp_on if dp else {"enabled": False}}
            s = run_experiment(from_dict(raw)).summary
            bd[dp].append(s["final_backdoor_success"])
            acc[dp].append(s["final_accuracy"])
            clean[dp].append(_acc(seed, training=training, dp=dp_on if dp else {"enabled": False}))
    bd_off, bd_on = np.mean(bd[False]), np.mean(bd[True])
    drop_attacked = np.mean(acc[False]) - np.mean(acc[True])
    drop_honest = np.mean(clean[False]) - np.mean(clean[True])
    ok = bd_on < bd_off and drop_attacked <= 0.05 and drop_honest <= 0.05
    criterion("6 backdoor defense direction (20 seeds)", ok,
              f"backdoor no-DP={bd_off:.3f} DP={bd_on:.3f}; acc drop attacked={drop_attacked:+.4f} "
              f"honest={drop_honest:+.4f}")


def test_07_attestation(criterion):
    spec = ModelSpec(5)
    root = bytes(random.Random(0).randbytes(32))
    code = party_code(spec)
    rng = random.Random(7)
    tampered_rejected = honest_accepted = forged_rejected = 0
    for trial in range(100):
        data = rng.randbytes(32)
        expected = tee.measure(data, code)
        bad = bytearray(code)
        pos = rng.randrange(len(bad))
        bad[pos] ^= 1 << rng.randrange(8)
        for blob, honest in ((bytes(bad), False), (code, True)):
            e = tee.create(struct.pack(">I", trial))
            tee.add(e, data, blob)
            tee.extend(e)
            tee.init(e, root)
            tee.key_derive(e)
            report = tee.make_report(e, root, trial)
            accepted = bool(tee.attest(report.to_bytes(), expected, root))
            if honest:
                honest_accepted += accepted
                forged = tee.AttestationReport(report.signer_id, report.measurement,
                                               rng.randbytes(32), report.enclave_pk)
                forged_rejected += not tee.attest(forged, expected, root)
            else:
                tampered_rejected += not accepted
    # the same property end to end through protocol setup
    proto_ok = 0
    for seed in range(100):
        sim = Simulation(from_dict({"master_seed": seed, "n_parties": 3,
                                    "parties": [{"id": seed % 3, "tampered_code": True}]}))
        sim.setup()
        statuses = [p.status for p in sim.parties]
        proto_ok += statuses[seed % 3] == REJECTED and statuses.count(ACTIVE) == 2
    ok = tampered_rejected == 100 and honest_accepted == 100 and forged_rejected == 100 and proto_ok == 100
    criterion("7 attestation", ok, f"tampered rejected {tampered_rejected}/100, honest accepted "
              f"{honest_accepted}/100, forged rejected {forged_rejected}/100, protocol {proto_ok}/100")


FIELDS = {"magic": (0, 4), "version": (4, 5), "round": (5, 9), "party_id": (9, 13),
          "nonce": (13, 37), "aad_digest": (37, 69), "ct_len": (69, 73)}


def test_08_envelope_integrity(criterion):
    e = tee.create(b"server")
    tee.add(e, b"", server_code(ModelSpec(5)))
    tee.extend(e)
    tee.init(e, bytes(32))
    pk, handle = tee.key_derive(e)
    sender = bytes(range(32))
    raw = encrypt_update(pk, np.linspace(-1, 1, 6), 3, 2, sender).to_bytes()
    spans = dict(FIELDS, ciphertext=(73, len(raw)))
    rng = random.Random(8)
    rejected = 0
    for i in range(1000):
        lo, hi = spans[list(spans)[i % len(spans)]]
        bit = rng.randrange(lo * 8, hi * 8)
        bad = bytearray(raw)
        bad[bit // 8] ^= 1 << (bit % 8)
        try:
            decrypt_update(handle, bytes(bad), current_round=3, sender_measurement=sender)
        except (TamperError, StaleUpdateError):
            rejected += 1
    nprng = np.random.default_rng(9)
    exact = 0
    for i in range(10_000):
        dim = 10_000 if i % 1000 == 0 else int(nprng.integers(1, 32))
        v = nprng.standard_normal(dim) * 10.0 ** nprng.integers(-8, 8)
        got, _, _ = decrypt_update(handle, encrypt_update(pk, v, 1, i, sender).to_bytes(), current_round=1)
        exact += got.tobytes() == v.tobytes()
    ok = rejected == 1000 and exact == 10_000
    criterion("8 envelope integrity", ok, f"corruptions rejected {rejected}/1000, round trips exact {exact}/10000")


SCENARIOS = {
    "honest": {},
    "krum-replacement": {"parties": [{"id": 5, "adversary": {"kind": "model-replacement", "fraction": 1.0,
                                                             "boost": 20}}],
                         "aggregation": {"krum_enabled": True, "krum_k": 1}},
    "backdoor-dp": {"parties": [{"id": 2, "adversary": {"kind": "backdoor", "fraction": 0.5, "boost": 20}}],
                    "dp": {"enabled": True, "clip_bound": 1.0, "noise_sigma": 0.05}},
    "label-flip-geomed": {"parties": [{"id": 0, "adversary": {"kind": "label-flip", "fraction": 0.5}}],
                          "aggregation": {"method": "geometric-median"}},
    "tampered-and-divergent": {"parties": [{"id": 1, "tampered_code": True},
                                           {"id": 3, "model": {"dim": 5, "kind": "other"}}]},
    "dropout-rejoin": {"dropout_schedule": [{"round": 1, "party_id": 2, "when": "before-training"},
                                            {"round": 2, "party_id": 4, "when": "after-encryption"},
                                            {"round": 3, "party_id": 0, "when": "after-submission"}],
                       "rejoin_schedule": [{"round": 2, "party_id": 2}]},
}


def scenario(name, seed=5):
    raw = {"master_seed": seed, "n_parties": 6, "stopping": {"max_rounds": 5}}
    raw.update(SCENARIOS[name])
    return from_dict(raw)


def test_09_plaintext_leak_audit(criterion):
    problems = {}
    for name in SCENARIOS:
        sim = Simulation(scenario(name))
        sim.run()
        found = audit_transcript(sim.bus.transcript, sim.plaintexts)
        if found or not sim.plaintexts:
            problems[name] = found or ["no plaintexts collected"]
    criterion("9 plaintext-leak transcript audit", not problems, str(problems) if problems else
              f"{len(SCENARIOS)} scenarios clean")


def test_10_dropout(criterion):
    sim = Simulation(scenario("dropout-rejoin"))
    log = sim.run()
    r = sim.rounds
    checks = {
        "before-training excluded": 2 not in r[0].received and len(r[0].received) == 5,
        "rejoin not honored mid-round": 2 not in r[1].received,
        "rejoin honored next boundary": 2 in r[2].received,
        "in-transit lost": 4 not in r[1].received,
        "after-submission counted": 0 in r[2].received and 0 in r[2].outcome.selected,
        "dropped afterwards": 0 not in r[3].received and sim.parties[0].status == DROPPED,
        "completed": log.summary["rounds_executed"] == 5 and log.summary["broadcast_verified"],
    }
    failed = [k for k, v in checks.items() if not v]
    criterion("10 dropout and rejoin", not failed, f"failed: {failed}" if failed else "all dropout paths ok")


def test_11_determinism(criterion):
    diffs = []
    for name in SCENARIOS:
        a = run_experiment(scenario(name, seed=21)).without_timing()
        b = run_experiment(scenario(name, seed=21)).without_timing()
        if a != b:
            diffs.append(name)
    criterion("11 determinism", not diffs, f"differing: {diffs}" if diffs else f"{len(SCENARIOS)} scenarios identical")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
