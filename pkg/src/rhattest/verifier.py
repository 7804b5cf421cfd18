"""Challenge issuing, secret provisioning and response evaluation.

``process_response`` runs its checks in a fixed order and the first failure
decides the verdict: well-formedness, nonce, timeout, quote signature,
record decryption, PCR recomputation, and finally the count heuristic.
"""

from __future__ import annotations

import base64
import binascii
import enum
import hashlib
import logging
import secrets
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from cryptography.hazmat.primitives.asymmetric import rsa

from .measurements import (DecryptionFailure, Kind, Measurement, decrypt_bytes, canonical_decode,
                           MeasurementError, generate_encryption_keypair)
from .prover import Evidence
from .tpm import NONCE_SIZE, PCR_SIZE, ZERO_PCR, export_public_key, load_public_key, verify_quote

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 10.0
DEFAULT_MAX_RECORDS = 10_000


class VerifierError(Exception):
    pass


class UnknownProver(VerifierError):
    pass


class UnknownNonce(VerifierError):
    pass


class BootIdReuse(VerifierError):
    pass


class Reason(str, enum.Enum):
    TIMEOUT = "timeout"
    NONCE_MISMATCH = "nonce_mismatch"
    SIGNATURE_INVALID = "signature_invalid"
    DECRYPTION_FAILURE = "decryption_failure"
    PCR_MISMATCH = "pcr_mismatch"
    MEASUREMENT_THRESHOLD_EXCEEDED = "measurement_threshold_exceeded"
    MALFORMED_RESPONSE = "malformed_response"
    MISSING_RESPONSE = "missing_response"


@dataclass(frozen=True)
class Verdict:
    compromised: bool
    reason: Reason | None = None
    mce_count: int = 0
    abo_count: int = 0

    @property
    def status(self) -> str:
        return "compromised" if self.compromised else "uncompromised"

    @classmethod
    def failed(cls, reason: Reason, mce_count: int = 0, abo_count: int = 0) -> "Verdict":
        return cls(True, reason, mce_count, abo_count)


UNCOMPROMISED = Verdict(False)


@dataclass(frozen=True)
class Challenge:
    nonce: bytes
    t_s: float
    prover_id: str


@dataclass(frozen=True)
class AttestationReport:
    prover_id: str | None
    verdict: Verdict
    elapsed_ms: float

    def to_dict(self) -> dict:
        return {
            "prover_id": self.prover_id,
            "verdict": self.verdict.status,
            "reason": self.verdict.reason.value if self.verdict.reason else None,
            "mce_count": self.verdict.mce_count,
            "abo_count": self.verdict.abo_count,
            "elapsed_ms": round(self.elapsed_ms, 3),
        }


class MalformedResponse(ValueError):
    pass


def _b64(value, name: str) -> bytes:
    if not isinstance(value, str):
        raise MalformedResponse(f"{name} must be a base64 string")
    try:
        return base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise MalformedResponse(f"{name} is not valid base64") from exc


def parse_response(body, max_records: int = DEFAULT_MAX_RECORDS) -> Evidence:
    """Validate a ResponseMsg body and turn it into :class:`Evidence`."""
    if isinstance(body, Evidence):
        body = body.to_body()
    if not isinstance(body, dict):
        raise MalformedResponse("response body must be an object")
    missing = {"nonce", "pcr", "signature", "boot_id", "records"} - set(body)
    if missing:
        raise MalformedResponse(f"missing fields {sorted(missing)}")
    nonce = _b64(body["nonce"], "nonce")
    if len(nonce) != NONCE_SIZE:
        raise MalformedResponse("nonce must decode to 32 bytes")
    pcr_hex = body["pcr"]
    if not isinstance(pcr_hex, str) or len(pcr_hex) != 2 * PCR_SIZE:
        raise MalformedResponse("pcr must be 64 hex characters")
    try:
        pcr = bytes.fromhex(pcr_hex)
    except ValueError as exc:
        raise MalformedResponse("pcr is not hex") from exc
    signature = _b64(body["signature"], "signature")
    if not signature:
        raise MalformedResponse("empty signature")
    boot_id = body["boot_id"]
    if isinstance(boot_id, bool) or not isinstance(boot_id, int) or boot_id < 0:
        raise MalformedResponse("boot_id must be a non-negative integer")
    records = body["records"]
    if not isinstance(records, list):
        raise MalformedResponse("records must be a list")
    if len(records) > max_records:
        raise MalformedResponse(f"log of {len(records)} records exceeds the cap of {max_records}")
    return Evidence(nonce, pcr, signature, tuple(_b64(r, "record") for r in records), boot_id)


def recompute_pcr(secret: bytes, measurements: Iterable[bytes]) -> bytes:
    """Fold ``SHA-256(acc || x)`` from the zero value over the secret and each measurement."""
    acc = hashlib.sha256(ZERO_PCR + secret).digest()
    for item in measurements:
        acc = hashlib.sha256(acc + item).digest()
    return acc


def evaluate_heuristic(measurements: Sequence[Measurement], mce_limit: int = 3,
                       abo_limit: int = 3) -> tuple[int, int, bool]:
    mce = sum(1 for m in measurements if m.kind is Kind.MCE)
    abo = sum(1 for m in measurements if m.kind is Kind.ABO)
    return mce, abo, mce >= mce_limit or abo >= abo_limit


class Verifier:
    def __init__(self, timeout_s: float = DEFAULT_TIMEOUT_S, mce_limit: int = 3, abo_limit: int = 3,
                 max_records: int = DEFAULT_MAX_RECORDS, key_size: int = 2048,
                 clock: Callable[[], float] = time.monotonic,
                 private_key: rsa.RSAPrivateKey | None = None):
        if timeout_s <= 0:
            raise ValueError("timeout must be positive")
        self.timeout_s = timeout_s
        self.mce_limit = mce_limit
        self.abo_limit = abo_limit
        self.max_records = max_records
        self.clock = clock
        self._key = private_key or generate_encryption_keypair(key_size)
        self.tpm_pubs: dict[str, rsa.RSAPublicKey] = {}
        self._secrets: dict[tuple[str, int], bytes] = {}
        self._issued: dict[str, set[int]] = defaultdict(set)
        self._outstanding: dict[bytes, Challenge] = {}
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._lock = threading.Lock()

    @property
    def public_key(self) -> rsa.RSAPublicKey:
        return self._key.public_key()

    def export_public_key(self) -> str:
        return export_public_key(self.public_key)

    def _prover_lock(self, prover_id: str) -> threading.Lock:
        with self._lock:
            return self._locks[prover_id]

    def register_prover(self, prover_id: str, tpm_pub: rsa.RSAPublicKey | str) -> None:
        if isinstance(tpm_pub, (str, bytes)):
            tpm_pub = load_public_key(tpm_pub)
        with self._prover_lock(prover_id):
            self.tpm_pubs[prover_id] = tpm_pub

    def provision_secret(self, prover_id: str, boot_id: int) -> bytes:
        with self._prover_lock(prover_id):
            issued = self._issued[prover_id]
            if boot_id in issued:
                raise BootIdReuse(f"{prover_id}: a secret for boot {boot_id} was already issued")
            if issued and boot_id < max(issued):
                raise BootIdReuse(f"{prover_id}: boot {boot_id} precedes issued boot {max(issued)}")
            secret = secrets.token_bytes(32)
            issued.add(boot_id)
            self._secrets[(prover_id, boot_id)] = secret
            return secret

    def issue_challenge(self, prover_id: str) -> Challenge:
        if prover_id not in self.tpm_pubs:
            raise UnknownProver(prover_id)
        challenge = Challenge(secrets.token_bytes(NONCE_SIZE), self.clock(), prover_id)
        with self._prover_lock(prover_id):
            self._outstanding[challenge.nonce] = challenge
        return challenge

    def outstanding(self) -> list[Challenge]:
        with self._lock:
            return list(self._outstanding.values())

    def _consume(self, nonce: bytes) -> Challenge | None:
        with self._lock:
            challenge = self._outstanding.get(nonce)
        if challenge is None:
            return None
        with self._prover_lock(challenge.prover_id):
            return self._outstanding.pop(nonce, None)

    def expire_challenge(self, nonce: bytes, now: float | None = None) -> Verdict | None:
        now = self.clock() if now is None else now
        with self._lock:
            challenge = self._outstanding.get(nonce)
        if challenge is None:
            raise UnknownNonce(nonce.hex())
        if now - challenge.t_s > self.timeout_s and self._consume(nonce) is not None:
            return Verdict.failed(Reason.MISSING_RESPONSE)
        return None

    def abandon_challenge(self, nonce: bytes) -> Verdict:
        """Terminal verdict for a challenge whose session died without an answer."""
        self._consume(nonce)
        return Verdict.failed(Reason.MISSING_RESPONSE)

    def process_response(self, response, t_r: float | None = None,
                         challenge_nonce: bytes | None = None) -> Verdict:
        """Evaluate one attestation response.

        ``challenge_nonce`` is the nonce this exchange was opened with; when
        omitted the nonce carried by the response is looked up instead.
        """
        t_r = self.clock() if t_r is None else t_r
        try:
            evidence = parse_response(response, self.max_records)
        except MalformedResponse as exc:
            log.info("malformed response: %s", exc)
            if challenge_nonce is not None:
                self._consume(challenge_nonce)
            return Verdict.failed(Reason.MALFORMED_RESPONSE)

        expected = evidence.nonce if challenge_nonce is None else challenge_nonce
        challenge = self._consume(expected)
        if challenge is None or evidence.nonce != expected:
            return Verdict.failed(Reason.NONCE_MISMATCH)
        if t_r - challenge.t_s > self.timeout_s:
            return Verdict.failed(Reason.TIMEOUT)
        tpm_pub = self.tpm_pubs.get(challenge.prover_id)
        if tpm_pub is None or not verify_quote(tpm_pub, evidence.pcr_value, evidence.nonce,
                                               evidence.signature):
            return Verdict.failed(Reason.SIGNATURE_INVALID)
        try:
            plain = [decrypt_bytes(r, self._key) for r in evidence.encrypted_log]
            measurements = [canonical_decode(p) for p in plain]
        except (DecryptionFailure, MeasurementError):
            return Verdict.failed(Reason.DECRYPTION_FAILURE)
        secret = self._secrets.get((challenge.prover_id, evidence.boot_id))
        if secret is None or recompute_pcr(secret, plain) != evidence.pcr_value:
            return Verdict.failed(Reason.PCR_MISMATCH)
        mce, abo, compromised = evaluate_heuristic(measurements, self.mce_limit, self.abo_limit)
        if compromised:
            return Verdict.failed(Reason.MEASUREMENT_THRESHOLD_EXCEEDED, mce, abo)
        return Verdict(False, None, mce, abo)

    def decrypt_log(self, records: Iterable[bytes]) -> list[bytes]:
        return [decrypt_bytes(r, self._key) for r in records]
