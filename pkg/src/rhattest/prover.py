"""The attested side: records measurements into the PCR chain and the
encrypted log, and answers challenges with signed evidence.
"""

from __future__ import annotations

import base64
import logging
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

from cryptography.hazmat.primitives.asymmetric import rsa

from .dram import AboAlert, DramConfig, SimReport, Simulator
from .measurements import (AboMeasurement, Measurement, MeasurementLog, MceMeasurement,
                           canonical_encode, encrypt_bytes)
from .patterns import Scenario
from .tpm import NONCE_SIZE, SoftTpm

log = logging.getLogger(__name__)

NONCE_CACHE_LIMIT = 65536


class ProverError(Exception):
    pass


class NotInitialized(ProverError):
    pass


class DoubleAbsorb(ProverError):
    pass


class ReplayRejected(ProverError):
    pass


class SequenceError(ProverError):
    pass


@dataclass(frozen=True)
class SecretRequest:
    prover_id: str
    boot_id: int


@dataclass(frozen=True)
class Evidence:
    nonce: bytes
    pcr_value: bytes
    signature: bytes
    encrypted_log: tuple[bytes, ...]
    boot_id: int

    def to_body(self) -> dict:
        """ResponseMsg body."""
        b64 = lambda b: base64.b64encode(b).decode()  # noqa: E731
        return {
            "nonce": b64(self.nonce),
            "pcr": self.pcr_value.hex(),
            "signature": b64(self.signature),
            "boot_id": self.boot_id,
            "records": [b64(r) for r in self.encrypted_log],
        }


class Prover:
    def __init__(self, verifier_pub: rsa.RSAPublicKey, prover_id: str = "prover-0",
                 tpm: SoftTpm | None = None, log_path=None,
                 clock: Callable[[], float] = time.monotonic):
        self.prover_id = prover_id
        self.verifier_pub = verifier_pub
        self.tpm = tpm or SoftTpm()
        self.log = MeasurementLog(log_path)
        self.boot_id = 0
        self.secret_absorbed = False
        self._clock = clock
        self._boot_time = clock()
        self._last_seq = 0
        self._seen_nonces: OrderedDict[bytes, None] = OrderedDict()
        self._nonce_lock = threading.Lock()
        # held while (extend + append) or (quote + snapshot) runs
        self._gate = threading.Lock()

    @property
    def pcr_index(self) -> int:
        return self.tpm.attestation_pcr

    def boot(self) -> SecretRequest:
        with self._gate:
            self.boot_id = self.tpm.reset()
            self.log.clear()
            self.secret_absorbed = False
            self._last_seq = 0
            self._boot_time = self._clock()
        with self._nonce_lock:
            self._seen_nonces.clear()
        log.debug("%s booted, boot_id=%d", self.prover_id, self.boot_id)
        return SecretRequest(self.prover_id, self.boot_id)

    def absorb_secret(self, secret: bytes | bytearray) -> None:
        if len(secret) != 32:
            raise ValueError("secret must be 32 bytes")
        buf = bytearray(secret)
        try:
            with self._gate:
                if self.secret_absorbed:
                    raise DoubleAbsorb("a secret was already absorbed in this boot session")
                self.tpm.pcr_extend(self.pcr_index, bytes(buf))
                self.secret_absorbed = True
        finally:
            buf[:] = bytes(len(buf))
            if isinstance(secret, bytearray):
                secret[:] = bytes(len(secret))

    def eval_reset(self, provision: Callable[[SecretRequest], bytes]) -> int:
        """Evaluation-mode reset: reboot and absorb a freshly provisioned secret."""
        request = self.boot()
        self.absorb_secret(provision(request))
        return request.boot_id

    def timestamp(self) -> int:
        return max(0, int((self._clock() - self._boot_time) * 1000))

    def record_measurement(self, m: Measurement) -> None:
        if not self.secret_absorbed:
            raise NotInitialized("no secret absorbed since boot")
        data = canonical_encode(m)
        record = encrypt_bytes(data, self.verifier_pub)
        with self._gate:
            if not self.secret_absorbed:
                raise NotInitialized("no secret absorbed since boot")
            if m.sequence_no <= self._last_seq:
                raise SequenceError(f"sequence_no {m.sequence_no} does not follow {self._last_seq}")
            # append first: a storage failure then leaves both PCR and log untouched
            self.log.append(record)
            self.tpm.pcr_extend(self.pcr_index, data)
            self._last_seq = m.sequence_no

    def _next(self, build: Callable[[int, int], Measurement]) -> Measurement:
        m = build(self._last_seq + 1, self.timestamp())
        self.record_measurement(m)
        return m

    def record_mce(self, error_type: str, address: int) -> Measurement:
        return self._next(lambda seq, ts: MceMeasurement(seq, ts, error_type, address))

    def record_abo(self, alert: AboAlert) -> Measurement:
        a = alert.addr
        return self._next(lambda seq, ts: AboMeasurement(seq, ts, a.rank, a.bank, a.row, alert.counter))

    def handle_challenge(self, nonce: bytes) -> Evidence:
        if len(nonce) != NONCE_SIZE:
            raise ValueError(f"nonce must be {NONCE_SIZE} bytes")
        if not self.secret_absorbed:
            raise NotInitialized("no secret absorbed since boot")
        nonce = bytes(nonce)
        with self._nonce_lock:
            if nonce in self._seen_nonces:
                raise ReplayRejected("nonce already answered in this boot session")
            self._seen_nonces[nonce] = None
            if len(self._seen_nonces) > NONCE_CACHE_LIMIT:
                self._seen_nonces.popitem(last=False)
        with self._gate:
            quote = self.tpm.quote(self.pcr_index, nonce)
            records = self.log.snapshot()
            boot_id = self.boot_id
        return Evidence(nonce, quote.pcr_value, quote.signature, tuple(records), boot_id)

    def ingest_scenario(self, scenario: Scenario, dram: DramConfig | None = None) -> SimReport:
        """Simulate the scenario's trace and record every alert and injected MCE.

        MCEs are recorded before the trace command at the same step.
        """
        if not self.secret_absorbed:
            raise NotInitialized("no secret absorbed since boot")
        sim = Simulator(dram or DramConfig())
        mces = sorted(scenario.mce_events, key=lambda m: m.at_step)
        k = 0
        for step, cmd in enumerate(scenario.trace):
            while k < len(mces) and mces[k].at_step <= step:
                self.record_mce(mces[k].error_type, mces[k].address)
                k += 1
            for alert in sim.step(cmd):
                self.record_abo(alert)
        for m in mces[k:]:
            self.record_mce(m.error_type, m.address)
        return sim.report()

    def public_state(self) -> dict:
        return {
            "prover_id": self.prover_id,
            "boot_id": self.boot_id,
            "secret_absorbed": self.secret_absorbed,
            "log_length": len(self.log),
            "tpm": self.tpm.public_state(),
        }
