"""End-to-end runs: one attestation of a scenario, and the labelled evaluation."""

from __future__ import annotations

import base64
import json
import logging
import random
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

from . import wire
from .agents import (answer_secret_request, attest_over, prover_server, request_secret, secret_server,
                     serve_challenges)
from .dram import DramConfig
from .measurements import MceMeasurement, encrypt_record
from .patterns import Label, PatternKind, Scenario, default_params, generate
from .prover import Prover
from .verifier import DEFAULT_MAX_RECORDS, DEFAULT_TIMEOUT_S, AttestationReport, Reason, Verifier

log = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_CODES = {
    None: 0,
    Reason.MEASUREMENT_THRESHOLD_EXCEEDED: 10,
    Reason.TIMEOUT: 11,
    Reason.NONCE_MISMATCH: 12,
    Reason.SIGNATURE_INVALID: 13,
    Reason.PCR_MISMATCH: 14,
    Reason.MALFORMED_RESPONSE: 15,
    Reason.MISSING_RESPONSE: 15,
    Reason.DECRYPTION_FAILURE: 16,
}

MALICIOUS_KINDS = (PatternKind.DOUBLE_SIDED, PatternKind.MANY_SIDED, PatternKind.ECC_TEMPLATING)


def exit_code(report: AttestationReport) -> int:
    return EXIT_CODES[report.verdict.reason]


@dataclass
class Settings:
    """Everything read from the ``--config`` JSON file."""

    dram: DramConfig = field(default_factory=DramConfig)
    timeout_s: float = DEFAULT_TIMEOUT_S
    mce_limit: int = 3
    abo_limit: int = 3
    max_records: int = DEFAULT_MAX_RECORDS
    key_size: int = 2048
    prover_id: str = "prover-0"
    listen_address: str | None = None  # role-specific default when unset
    http_address: str = "127.0.0.1:8700"
    verifier_address: str = "tcp://127.0.0.1:7701"
    verifier_pub: str | None = None
    verifier_url: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "Settings":
        data = dict(data)
        verifier = data.pop("verifier", {})
        prover = data.pop("prover", {})
        dram = DramConfig.from_dict(data.pop("dram", {}))
        data.pop("eval", None)
        merged = {**verifier, **prover, **data}
        known = set(cls.__dataclass_fields__) - {"dram"}
        unknown = set(merged) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(dram=dram, **merged)

    @classmethod
    def load(cls, path: str | Path | None) -> "Settings":
        if path is None:
            return cls()
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def make_verifier(self) -> Verifier:
        return Verifier(self.timeout_s, self.mce_limit, self.abo_limit, self.max_records, self.key_size)


def make_tamper(spec: str, verifier_pub) -> Callable[[dict], dict]:
    """Build a response rewriter for ``--tamper``.

    ``record:I`` substitutes record I with a freshly encrypted forgery,
    ``flip:I`` flips a ciphertext byte, ``drop:I`` removes a record,
    ``swap:I:J`` exchanges two records, ``nonce`` and ``sig`` corrupt the
    quote fields.
    """
    kind, *args = spec.split(":")
    try:
        idx = [int(a) for a in args]
    except ValueError:
        raise ValueError(f"bad tamper spec {spec!r}") from None
    arity = {"record": 1, "flip": 1, "drop": 1, "swap": 2, "nonce": 0, "sig": 0}
    if kind not in arity or len(idx) != arity[kind]:
        raise ValueError(f"bad tamper spec {spec!r}")

    def rewrite(body: dict) -> dict:
        body = dict(body)
        records = list(body.get("records", []))
        if kind == "record":
            forged = MceMeasurement(idx[0] + 1, 0, "CE", 0)
            fake = base64.b64encode(encrypt_record(forged, verifier_pub)).decode()
            if idx[0] < len(records):
                records[idx[0]] = fake
            else:
                records.append(fake)
        elif kind == "flip":
            raw = bytearray(base64.b64decode(records[idx[0]]))
            raw[len(raw) // 2] ^= 0x01
            records[idx[0]] = base64.b64encode(bytes(raw)).decode()
        elif kind == "drop":
            del records[idx[0]]
        elif kind == "swap":
            i, j = idx
            records[i], records[j] = records[j], records[i]
        elif kind == "nonce":
            body["nonce"] = base64.b64encode(bytes(32)).decode()
        elif kind == "sig":
            sig = bytearray(base64.b64decode(body["signature"]))
            sig[0] ^= 0x80
            body["signature"] = base64.b64encode(bytes(sig)).decode()
        body["records"] = records
        return body

    return rewrite


class Deployment:
    """An in-process prover/verifier pair talking over loopback or localhost TCP."""

    def __init__(self, settings: Settings | None = None, transport: str = "loopback",
                 verifier: Verifier | None = None, prover: Prover | None = None, delay_s: float = 0.0):
        if transport not in ("loopback", "tcp"):
            raise ValueError(f"unknown transport {transport!r}")
        self.settings = settings or Settings()
        self.transport = transport
        self.verifier = verifier or self.settings.make_verifier()
        self.prover = prover or Prover(self.verifier.public_key, self.settings.prover_id)
        self.verifier.register_prover(self.prover.prover_id, self.prover.tpm.public_key)
        self._servers = []
        if transport == "loopback":
            self._secret_client, secret_end = wire.loopback_pair()
            self._challenge_client, challenge_end = wire.loopback_pair()
            self._spawn(lambda: self._answer_secrets(secret_end))
            self._spawn(lambda: serve_challenges(self.prover, challenge_end, delay_s))
        else:
            secrets_srv = secret_server(self.verifier).start()
            prover_srv = prover_server(self.prover, delay_s=delay_s).start()
            self._servers = [secrets_srv, prover_srv]
            self._secret_client = wire.connect(*secrets_srv.address)
            self._challenge_client = wire.connect(*prover_srv.address)

    @staticmethod
    def _spawn(fn) -> None:
        threading.Thread(target=fn, daemon=True).start()

    def _answer_secrets(self, session) -> None:
        while True:
            try:
                msg = session.receive()
            except wire.ConnectionFailure:
                return
            session.send(answer_secret_request(self.verifier, msg))

    def reset(self) -> int:
        """Evaluation-mode reboot of the prover with a secret fetched over the transport."""
        return self.prover.eval_reset(lambda req: request_secret(self._secret_client, req))

    def attest(self, tamper: Callable[[dict], dict] | None = None) -> AttestationReport:
        return attest_over(self._challenge_client, self.verifier, self.prover.prover_id, intercept=tamper)

    def close(self) -> None:
        self._secret_client.close()
        self._challenge_client.close()
        for srv in self._servers:
            srv.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def attest_scenario(scenario: Scenario, settings: Settings | None = None, transport: str = "loopback",
                    tamper: str | None = None, delay_s: float = 0.0) -> AttestationReport:
    settings = settings or Settings()
    with Deployment(settings, transport, delay_s=delay_s) as dep:
        dep.reset()
        dep.prover.ingest_scenario(scenario, settings.dram)
        rewrite = make_tamper(tamper, dep.verifier.public_key) if tamper else None
        return dep.attest(rewrite)


@dataclass
class EvalConfig:
    n_benign: int = 1000
    n_malicious: int = 1000
    dram: DramConfig = field(default_factory=DramConfig)
    seed: int = 0
    timeout_s: float | None = None
    output_path: str | None = None
    transport: str = "loopback"
    workers: int = 1
    malicious_kinds: tuple[PatternKind, ...] = MALICIOUS_KINDS
    benign_mce_max: int = 2

    def __post_init__(self):
        if self.n_benign < 1 or self.n_malicious < 1:
            raise ValueError("n_benign and n_malicious must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "EvalConfig":
        data = dict(data)
        if "dram" in data:
            data["dram"] = DramConfig.from_dict(data["dram"])
        if "malicious_kinds" in data:
            data["malicious_kinds"] = tuple(PatternKind(k) for k in data["malicious_kinds"])
        return cls(**data)


@dataclass
class ConfusionMatrix:
    true_negative: int = 0
    false_positive: int = 0
    false_negative: int = 0
    true_positive: int = 0
    runs: list[dict] = field(default_factory=list)

    def add(self, record: dict) -> None:
        malicious = record["label"] == Label.MALICIOUS.value
        flagged = record["verdict"] == "compromised"
        if malicious:
            if flagged:
                self.true_positive += 1
            else:
                self.false_negative += 1
        elif flagged:
            self.false_positive += 1
        else:
            self.true_negative += 1
        self.runs.append(record)

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        n = len(self.runs)
        return (f"runs={n}  TN={self.true_negative}  FP={self.false_positive}  "
                f"FN={self.false_negative}  TP={self.true_positive}")


def _plan(cfg: EvalConfig) -> list[tuple[int, PatternKind, int]]:
    rng = random.Random(cfg.seed)
    plan = [(i, PatternKind.BENIGN, rng.getrandbits(63)) for i in range(cfg.n_benign)]
    for j in range(cfg.n_malicious):
        kind = cfg.malicious_kinds[j % len(cfg.malicious_kinds)]
        plan.append((cfg.n_benign + j, kind, rng.getrandbits(63)))
    return plan


def _run_shard(cfg: EvalConfig, shard: list[tuple[int, PatternKind, int]]) -> list[dict]:
    settings = Settings(dram=cfg.dram)
    if cfg.timeout_s is not None:
        settings.timeout_s = cfg.timeout_s
    out = []
    with Deployment(settings, cfg.transport) as dep:
        for index, kind, seed in shard:
            params = default_params(kind, seed, random.Random(seed))
            if kind is PatternKind.BENIGN:
                params = _cap_benign_mces(params, cfg.benign_mce_max)
            scenario = generate(params, cfg.dram)
            dep.reset()
            dep.prover.ingest_scenario(scenario, cfg.dram)
            report = dep.attest()
            out.append({
                "index": index,
                "seed": seed,
                "kind": kind.value,
                "label": scenario.label.value,
                "verdict": report.verdict.status,
                "reason": report.verdict.reason.value if report.verdict.reason else None,
                "mce_count": report.verdict.mce_count,
                "abo_count": report.verdict.abo_count,
            })
    return out


def _cap_benign_mces(params, limit: int):
    return replace(params, injected_mce_count=min(params.injected_mce_count, limit))


def run_eval(cfg: EvalConfig, progress: Callable[[int, int], None] | None = None) -> ConfusionMatrix:
    plan = _plan(cfg)
    started = time.perf_counter()
    if cfg.workers <= 1:
        records = []
        step = max(1, len(plan) // 20)
        for start in range(0, len(plan), step):
            records += _run_shard(cfg, plan[start:start + step])
            if progress:
                progress(len(records), len(plan))
    else:
        shards = [plan[w::cfg.workers] for w in range(cfg.workers)]
        with ProcessPoolExecutor(cfg.workers) as pool:
            records = [r for part in pool.map(_run_shard, [cfg] * len(shards), shards) for r in part]
    matrix = ConfusionMatrix()
    for record in sorted(records, key=lambda r: r["index"]):
        matrix.add(record)
    log.info("evaluation finished in %.1fs: %s", time.perf_counter() - started, matrix.summary())
    if cfg.output_path:
        Path(cfg.output_path).write_text(json.dumps(matrix.to_dict(), indent=1), encoding="utf-8")
    return matrix
