import hashlib
import threading

import pytest

from rhattest.dram import DramConfig, run_trace
from rhattest.measurements import AboMeasurement, MceMeasurement, canonical_decode, canonical_encode
from rhattest.patterns import PatternKind, PatternParams, generate
from rhattest.prover import (DoubleAbsorb, NotInitialized, Prover, ReplayRejected, SequenceError)
from rhattest.verifier import Reason, Verifier

SECRET = bytes([1]) * 32
# SHA-256(32 zero bytes || SECRET), computed with the openssl CLI
AFTER_SECRET = "5c85955f709283ecce2b74f1b1552918819f390911816e7bb466805a38ab87f3"
# ... then extended with b"MCE|1|42|error_type=UE|address=4096"
AFTER_FIRST_MCE = "5e46fd3ea38a23e6093442a93088102633a7ff97ace5a90210bf5b88029342f2"


@pytest.fixture(scope="module")
def vkey():
    return Verifier(key_size=2048)


@pytest.fixture
def prover(vkey):
    p = Prover(vkey.public_key, "p1")
    p.boot()
    return p


def test_boot_resets_everything(prover):
    prover.absorb_secret(SECRET)
    prover.record_mce("CE", 1)
    request = prover.boot()
    assert request.boot_id == 2 and request.prover_id == "p1"
    assert len(prover.log) == 0 and not prover.secret_absorbed
    assert prover.tpm.pcr_read(prover.pcr_index) == bytes(32)


def test_absorb_matches_frozen_value(prover):
    prover.absorb_secret(SECRET)
    assert prover.tpm.pcr_read(16).hex() == AFTER_SECRET
    prover.record_measurement(MceMeasurement(1, 42, "UE", 4096))
    assert prover.tpm.pcr_read(16).hex() == AFTER_FIRST_MCE


def test_absorb_twice_fails(prover):
    prover.absorb_secret(SECRET)
    with pytest.raises(DoubleAbsorb):
        prover.absorb_secret(SECRET)


def test_secret_buffer_is_wiped_and_not_kept(prover):
    buf = bytearray(SECRET)
    prover.absorb_secret(buf)
    assert buf == bytearray(32)
    assert SECRET.hex() not in repr(prover.public_state())
    assert all(SECRET not in bytes(v) for v in vars(prover).values() if isinstance(v, (bytes, bytearray)))


def test_operations_need_a_secret(prover):
    with pytest.raises(NotInitialized):
        prover.record_mce("UE", 1)
    with pytest.raises(NotInitialized):
        prover.handle_challenge(bytes(32))


def test_records_fold_into_the_pcr(prover, vkey):
    prover.absorb_secret(SECRET)
    ms = [MceMeasurement(1, 5, "UE", 1), AboMeasurement(2, 6, 0, 1, 2, 16), MceMeasurement(3, 7, "CE", 9)]
    for m in ms:
        prover.record_measurement(m)
    acc = hashlib.sha256(bytes(32) + SECRET).digest()
    for m in ms:
        acc = hashlib.sha256(acc + canonical_encode(m)).digest()
    assert prover.tpm.pcr_read(16) == acc
    assert [canonical_decode(p) for p in vkey.decrypt_log(prover.log.snapshot())] == ms


def test_sequence_must_increase(prover):
    prover.absorb_secret(SECRET)
    prover.record_measurement(MceMeasurement(5, 0, "UE", 1))
    with pytest.raises(SequenceError):
        prover.record_measurement(MceMeasurement(5, 0, "UE", 1))
    assert prover.record_mce("UE", 2).sequence_no == 6


def test_replayed_nonce_rejected(prover):
    prover.absorb_secret(SECRET)
    prover.handle_challenge(b"n" * 32)
    with pytest.raises(ReplayRejected):
        prover.handle_challenge(b"n" * 32)


def test_evidence_is_consistent_under_concurrent_recording(pair):
    verifier, prover = pair
    stop = threading.Event()

    def writer():
        for _ in range(2000):
            if stop.is_set():
                break
            prover.record_mce("CE", 1)

    t = threading.Thread(target=writer)
    t.start()
    try:
        verdicts = []
        for _ in range(10):
            c = verifier.issue_challenge("p1")
            verdicts.append(verifier.process_response(prover.handle_challenge(c.nonce)))
    finally:
        stop.set()
        t.join()
    assert {v.reason for v in verdicts} <= {None, Reason.MEASUREMENT_THRESHOLD_EXCEEDED}


def test_ingest_orders_mces_before_the_command(pair):
    verifier, prover = pair
    scenario = generate(PatternParams(PatternKind.ECC_TEMPLATING, injected_mce_count=3, seed=2),
                        DramConfig())
    report = prover.ingest_scenario(scenario)
    decoded = [canonical_decode(p) for p in verifier.decrypt_log(prover.log.snapshot())]
    assert [m.sequence_no for m in decoded] == list(range(1, len(decoded) + 1))
    assert sum(isinstance(m, MceMeasurement) for m in decoded) == 3
    assert sum(isinstance(m, AboMeasurement) for m in decoded) == len(report.abo_alerts)


def test_ingest_records_one_abo_per_alert(pair):
    _, prover = pair
    scenario = generate(PatternParams(PatternKind.DOUBLE_SIDED, seed=4), DramConfig())
    expected = len(run_trace(DramConfig(), scenario.trace).abo_alerts)
    prover.ingest_scenario(scenario)
    assert len(prover.log) == expected >= 3


@pytest.mark.parametrize("edit", ["truncate", "substitute"])
def test_history_edits_break_the_pcr(pair, edit):
    verifier, prover = pair
    for i in range(4):
        prover.record_mce("CE", i)
    c = verifier.issue_challenge("p1")
    evidence = prover.handle_challenge(c.nonce)
    body = evidence.to_body()
    if edit == "truncate":
        body["records"] = body["records"][:-1]
    else:
        other = Prover(verifier.public_key, "x")
        other.boot()
        other.absorb_secret(SECRET)
        other.record_mce("UE", 0)
        body["records"][0] = other.handle_challenge(bytes(32)).to_body()["records"][0]
    assert verifier.process_response(body).reason is Reason.PCR_MISMATCH
