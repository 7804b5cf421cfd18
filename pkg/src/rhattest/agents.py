"""Protocol drivers tying prover and verifier to wire sessions.

The verifier opens an attestation by sending a ChallengeMsg and evaluates
whatever comes back. Secret provisioning runs the other way: a freshly
booted prover sends a SecretRequestMsg to the verifier.
"""

from __future__ import annotations

import base64
import binascii
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from .prover import Evidence, Prover, ProverError, SecretRequest
from .tpm import export_public_key
from .verifier import AttestationReport, BootIdReuse, Reason, Verdict, Verifier, VerifierError
from .wire import (ConnectionFailure, MalformedFrame, MessageType, Session, TcpListener, WireMessage,
                   connect, error_message, parse_endpoint)

log = logging.getLogger(__name__)

RESPONSE_GRACE_S = 1.0


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode()


def unb64(text) -> bytes:
    if not isinstance(text, str):
        raise ValueError("expected a base64 string")
    try:
        return base64.b64decode(text, validate=True)
    except binascii.Error as exc:
        raise ValueError(str(exc)) from exc


# -- verifier side ----------------------------------------------------------

def attest_over(session: Session, verifier: Verifier, prover_id: str,
                intercept: Callable[[dict], dict] | None = None,
                grace_s: float = RESPONSE_GRACE_S) -> AttestationReport:
    """Run one challenge-response exchange on an open session."""
    challenge = verifier.issue_challenge(prover_id)
    session.send(WireMessage(MessageType.CHALLENGE,
                             {"nonce": b64(challenge.nonce), "prover_id": prover_id}))
    try:
        msg = session.receive(timeout=verifier.timeout_s + grace_s)
    except TimeoutError:
        verdict = verifier.expire_challenge(challenge.nonce) or verifier.abandon_challenge(challenge.nonce)
        return AttestationReport(prover_id, verdict, (verifier.clock() - challenge.t_s) * 1000)
    except ConnectionFailure:
        verdict = verifier.abandon_challenge(challenge.nonce)
        return AttestationReport(prover_id, verdict, (verifier.clock() - challenge.t_s) * 1000)
    except MalformedFrame as exc:
        log.info("undecodable response from %s: %s", prover_id, exc)
        msg = None
    t_r = verifier.clock()
    if msg is None or msg.type is not MessageType.RESPONSE:
        body = None
    else:
        body = msg.body if intercept is None else intercept(dict(msg.body))
    verdict = verifier.process_response(body, t_r, challenge.nonce)
    return AttestationReport(prover_id, verdict, (t_r - challenge.t_s) * 1000)


def answer_secret_request(verifier: Verifier, msg: WireMessage, allow_registration: bool = False,
                          directory: dict[str, str] | None = None) -> WireMessage:
    if msg.type is not MessageType.SECRET_REQUEST:
        return error_message(f"expected SecretRequestMsg, got {msg.type.value}")
    body = msg.body
    prover_id, boot_id = body["prover_id"], body["boot_id"]
    if not isinstance(prover_id, str) or isinstance(boot_id, bool) or not isinstance(boot_id, int):
        return error_message("prover_id must be a string and boot_id an integer")
    tpm_pub = body.get("tpm_pub")
    if tpm_pub is not None:
        known = verifier.tpm_pubs.get(prover_id)
        if known is None:
            if not allow_registration:
                return error_message(f"unknown prover {prover_id}")
            try:
                verifier.register_prover(prover_id, tpm_pub)
            except Exception as exc:  # noqa: BLE001 - any key parse error is a refusal
                return error_message(f"bad tpm_pub: {exc}")
        elif export_public_key(known) != tpm_pub:
            return error_message(f"tpm_pub does not match the key registered for {prover_id}")
    elif prover_id not in verifier.tpm_pubs:
        return error_message(f"unknown prover {prover_id}")
    if directory is not None and isinstance(body.get("address"), str):
        directory[prover_id] = body["address"]
    try:
        secret = verifier.provision_secret(prover_id, boot_id)
    except BootIdReuse as exc:
        return error_message(str(exc))
    return WireMessage(MessageType.SECRET_REPLY, {"secret": b64(secret)})


# -- prover side ------------------------------------------------------------

def answer_challenge(prover: Prover, msg: WireMessage) -> WireMessage:
    if msg.type is not MessageType.CHALLENGE:
        return error_message(f"expected ChallengeMsg, got {msg.type.value}")
    try:
        evidence: Evidence = prover.handle_challenge(unb64(msg.body["nonce"]))
    except (ProverError, ValueError) as exc:
        return error_message(f"{type(exc).__name__}: {exc}")
    return WireMessage(MessageType.RESPONSE, evidence.to_body())


def serve_challenges(prover: Prover, session: Session, delay_s: float = 0.0,
                     stop: threading.Event | None = None) -> int:
    """Answer challenges on ``session`` until the peer goes away; returns the count answered."""
    answered = 0
    while stop is None or not stop.is_set():
        try:
            msg = session.receive(timeout=0.5 if stop is not None else None)
        except TimeoutError:
            continue
        except ConnectionFailure:
            break
        except MalformedFrame as exc:
            reply = error_message(f"malformed frame: {exc}")
        else:
            reply = answer_challenge(prover, msg)
        if delay_s:
            time.sleep(delay_s)
        try:
            session.send(reply)
        except ConnectionFailure:
            break
        answered += 1
    return answered


def request_secret(session: Session, request: SecretRequest, tpm_pub: str | None = None,
                   address: str | None = None, timeout: float = 10.0) -> bytes:
    body: dict = {"prover_id": request.prover_id, "boot_id": request.boot_id}
    if tpm_pub is not None:
        body["tpm_pub"] = tpm_pub
    if address is not None:
        body["address"] = address
    session.send(WireMessage(MessageType.SECRET_REQUEST, body))
    reply = session.receive(timeout=timeout)
    if reply.type is MessageType.ERROR:
        raise VerifierError(reply.body["error"])
    if reply.type is not MessageType.SECRET_REPLY:
        raise VerifierError(f"unexpected reply {reply.type.value}")
    secret = unb64(reply.body["secret"])
    if len(secret) != 32:
        raise VerifierError("secret must be 32 bytes")
    return secret


# -- TCP servers ------------------------------------------------------------

class FrameServer:
    """Accept loop handing each TCP session to ``handler`` on its own thread."""

    def __init__(self, handler: Callable[[Session, threading.Event], None], host: str = "127.0.0.1",
                 port: int = 0, ssl_context=None):
        self._handler = handler
        self._listener = TcpListener(host, port, ssl_context)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._workers: list[threading.Thread] = []

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.address

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"tcp://{host}:{port}"

    def start(self) -> "FrameServer":
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                session = self._listener.accept(timeout=0.2)
            except TimeoutError:
                continue
            except ConnectionFailure:
                if self._stop.is_set():
                    break
                log.exception("accept failed")
                continue
            worker = threading.Thread(target=self._run, args=(session,), daemon=True)
            worker.start()
            self._workers.append(worker)

    def _run(self, session: Session) -> None:
        with session:
            try:
                self._handler(session, self._stop)
            except Exception:  # noqa: BLE001 - one bad peer must not kill the server
                log.exception("session handler failed")

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
        self._listener.close()
        for w in self._workers:
            w.join(timeout=2)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def prover_server(prover: Prover, host: str = "127.0.0.1", port: int = 0, delay_s: float = 0.0,
                  ssl_context=None) -> FrameServer:
    return FrameServer(lambda s, stop: serve_challenges(prover, s, delay_s, stop), host, port, ssl_context)


def secret_server(verifier: Verifier, host: str = "127.0.0.1", port: int = 0,
                  allow_registration: bool = False, directory: dict[str, str] | None = None,
                  ssl_context=None) -> FrameServer:
    def handle(session: Session, stop: threading.Event) -> None:
        while not stop.is_set():
            try:
                msg = session.receive(timeout=0.5)
            except TimeoutError:
                continue
            except ConnectionFailure:
                return
            except MalformedFrame as exc:
                session.send(error_message(f"malformed frame: {exc}"))
                continue
            session.send(answer_secret_request(verifier, msg, allow_registration, directory))

    return FrameServer(handle, host, port, ssl_context)


@dataclass
class VerifierService:
    """A verifier plus the prover directory and report history of a long-running deployment."""

    verifier: Verifier
    allow_registration: bool = True
    directory: dict[str, str] = field(default_factory=dict)
    reports: list[AttestationReport] = field(default_factory=list)
    max_reports: int = 1000
    ssl_context: object = None

    def __post_init__(self):
        self._lock = threading.Lock()

    def register(self, prover_id: str, tpm_pub: str, address: str | None = None) -> None:
        self.verifier.register_prover(prover_id, tpm_pub)
        if address is not None:
            parse_endpoint(address)
            self.directory[prover_id] = address

    def attest(self, prover_id: str) -> AttestationReport:
        address = self.directory.get(prover_id)
        if address is None:
            raise VerifierError(f"no address known for prover {prover_id}")
        _, host, port = parse_endpoint(address)
        try:
            session = connect(host, port, timeout=self.verifier.timeout_s, ssl_context=self.ssl_context)
        except (ConnectionFailure, socket.timeout):
            report = AttestationReport(prover_id, Verdict.failed(Reason.MISSING_RESPONSE), 0.0)
        else:
            with session:
                report = attest_over(session, self.verifier, prover_id)
        with self._lock:
            self.reports.append(report)
            del self.reports[:-self.max_reports]
        return report
