"""Command-line entry point: ``gen``, ``attest``, ``eval``, ``serve`` and ``sim``."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import socket
import sys
import threading
from pathlib import Path

from . import __version__
from .dram import RowAddress, TraceError, format_trace, load_trace, run_trace
from .harness import (EXIT_CODES, EvalConfig, Settings, attest_scenario, exit_code, make_tamper,
                      run_eval)
from .patterns import InfeasibleParams, PatternKind, PatternParams, generate, load_scenario
from .verifier import Reason

log = logging.getLogger("rhattest")

DEFAULT_PROVER_LISTEN = "tcp://127.0.0.1:7700"
DEFAULT_VERIFIER_LISTEN = "tcp://127.0.0.1:7701"


def _common(suppress: bool) -> argparse.ArgumentParser:
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="JSON", default=default, help="settings file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0)
    p.add_argument("--transport", choices=("loopback", "tcp"),
                   default=argparse.SUPPRESS if suppress else "loopback")
    p.add_argument("--timeout-ms", type=int, default=default, help="verifier response timeout")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rhattest", parents=[_common(False)],
                                     description="Rowhammer-aware remote attestation toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common(True)

    gen = sub.add_parser("gen", parents=[common], help="generate a labelled scenario")
    gen.add_argument("--kind", choices=[k.value for k in PatternKind], default="benign")
    gen.add_argument("--length", type=int, default=2000)
    gen.add_argument("--victim", type=int, nargs=3, metavar=("RANK", "BANK", "ROW"))
    gen.add_argument("--hammer-reps", type=int, default=200)
    gen.add_argument("--aggressors", type=int, default=2, help="aggressor rows for many_sided")
    gen.add_argument("--row-cap", type=int, default=8, help="benign activations per row per epoch")
    gen.add_argument("--working-set", type=int, default=1024)
    gen.add_argument("--mces", type=int, default=0, help="injected machine-check events")
    gen.add_argument("-o", "--out", help="scenario JSON path (default: stdout)")
    gen.add_argument("--trace-out", help="also write the trace file and reference it from the scenario")

    attest = sub.add_parser("attest", parents=[common], help="run one attestation")
    attest.add_argument("scenario", nargs="?", help="scenario JSON to ingest before attesting")
    attest.add_argument("--tamper", help="record:I | flip:I | drop:I | swap:I:J | nonce | sig")
    attest.add_argument("--delay-ms", type=int, default=0, help="prover-side response delay")
    attest.add_argument("--verifier-url", help="ask a running verifier service instead")
    attest.add_argument("--prover-id", help="prover to attest via --verifier-url")

    ev = sub.add_parser("eval", parents=[common], help="labelled classification experiment")
    ev.add_argument("--n-benign", type=int, default=1000)
    ev.add_argument("--n-malicious", type=int, default=1000)
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("-o", "--out", help="confusion matrix JSON path (default: stdout)")

    serve = sub.add_parser("serve", parents=[common], help="run a prover or verifier agent")
    serve.add_argument("--role", choices=("prover", "verifier"), required=True)
    serve.add_argument("--scenario", action="append", default=[],
                       help="prover: ingest this scenario after boot (repeatable)")

    sim = sub.add_parser("sim", parents=[common], help="simulate a trace file and print the report")
    sim.add_argument("trace")
    return parser


def _settings(args) -> Settings:
    settings = Settings.load(args.config)
    if args.timeout_ms is not None:
        settings.timeout_s = args.timeout_ms / 1000
    return settings


def cmd_gen(args) -> int:
    settings = _settings(args)
    params = PatternParams(
        kind=PatternKind(args.kind), length=args.length,
        victim=RowAddress(*args.victim) if args.victim else None,
        hammer_reps=args.hammer_reps, aggressor_count=args.aggressors,
        benign_row_cap=args.row_cap, working_set=args.working_set,
        injected_mce_count=args.mces, seed=args.seed,
    )
    try:
        scenario = generate(params, settings.dram)
    except InfeasibleParams as exc:
        print(f"rhattest gen: {exc}", file=sys.stderr)
        return 2
    trace_ref = None
    if args.trace_out:
        Path(args.trace_out).write_text(format_trace(scenario.trace), encoding="utf-8")
        trace_ref = args.trace_out
        if args.out:
            trace_ref = str(Path(args.trace_out).resolve())
    text = scenario.to_json(trace_ref) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_attest(args) -> int:
    if args.verifier_url:
        return _attest_remote(args)
    if not args.scenario:
        print("rhattest attest: a scenario file or --verifier-url is required", file=sys.stderr)
        return 2
    settings = _settings(args)
    try:
        scenario = load_scenario(args.scenario)
        if args.tamper:
            make_tamper(args.tamper, None)
    except (OSError, ValueError, KeyError, TraceError) as exc:
        print(f"rhattest attest: {exc}", file=sys.stderr)
        return 2
    report = attest_scenario(scenario, settings, args.transport, args.tamper, args.delay_ms / 1000)
    print(json.dumps(report.to_dict()))
    return exit_code(report)


def _attest_remote(args) -> int:
    import httpx

    if not args.prover_id:
        print("rhattest attest: --prover-id is required with --verifier-url", file=sys.stderr)
        return 2
    try:
        resp = httpx.post(args.verifier_url.rstrip("/") + "/attestations",
                          json={"prover_id": args.prover_id}, timeout=60)
    except httpx.HTTPError as exc:
        print(f"rhattest attest: {exc}", file=sys.stderr)
        return 1
    if resp.status_code != 200:
        print(f"rhattest attest: verifier said {resp.status_code}: {resp.text}", file=sys.stderr)
        return 1
    report = resp.json()
    print(json.dumps(report))
    return EXIT_CODES[Reason(report["reason"]) if report["reason"] else None]


def cmd_eval(args) -> int:
    settings = _settings(args)
    cfg = EvalConfig(n_benign=args.n_benign, n_malicious=args.n_malicious, dram=settings.dram,
                     seed=args.seed, timeout_s=settings.timeout_s,
                     output_path=args.out, transport=args.transport, workers=args.workers)

    def progress(done, total):
        if args.verbose:
            print(f"  {done}/{total}", file=sys.stderr)

    matrix = run_eval(cfg, progress)
    if not args.out:
        print(json.dumps(matrix.to_dict()))
    print(matrix.summary(), file=sys.stderr)
    return 0


def _bind(address: str) -> socket.socket:
    host, _, port = address.rpartition(":")
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host or "127.0.0.1", int(port)))
    return sock


def _wait_for_interrupt() -> None:
    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    try:
        while not done.wait(0.5):
            pass
    except KeyboardInterrupt:
        pass


def cmd_serve(args) -> int:
    from .agents import VerifierService, prover_server, request_secret, secret_server
    from .wire import connect, parse_endpoint

    settings = _settings(args)
    if args.role == "verifier":
        import uvicorn

        from .service import create_app

        service = VerifierService(settings.make_verifier())
        _, host, port = parse_endpoint(settings.listen_address or DEFAULT_VERIFIER_LISTEN)
        try:
            secrets_srv = secret_server(service.verifier, host, port, allow_registration=True,
                                        directory=service.directory)
            http_sock = _bind(settings.http_address)
        except OSError as exc:
            print(f"rhattest serve: bind failed: {exc}", file=sys.stderr)
            return 1
        secrets_srv.start()
        print(json.dumps({"role": "verifier", "secrets": secrets_srv.endpoint,
                          "http": f"http://{settings.http_address}"}), flush=True)
        server = uvicorn.Server(uvicorn.Config(create_app(service), log_level="warning"))
        try:
            server.run(sockets=[http_sock])
        finally:
            secrets_srv.stop()
        return 0

    from .prover import Prover
    from .tpm import load_public_key

    pub = settings.verifier_pub
    if pub is None and settings.verifier_url:
        import httpx
        pub = httpx.get(settings.verifier_url.rstrip("/") + "/public-key", timeout=10).json()["public_key"]
    if pub is None:
        print("rhattest serve: prover needs verifier_pub or verifier_url in its config", file=sys.stderr)
        return 2
    prover = Prover(load_public_key(pub), settings.prover_id)
    _, host, port = parse_endpoint(settings.listen_address or DEFAULT_PROVER_LISTEN)
    try:
        srv = prover_server(prover, host, port)
    except OSError as exc:
        print(f"rhattest serve: bind failed: {exc}", file=sys.stderr)
        return 1
    srv.start()
    try:
        _, vhost, vport = parse_endpoint(settings.verifier_address)
        with connect(vhost, vport) as session:
            secret = request_secret(session, prover.boot(), tpm_pub=prover.tpm.export_public_key(),
                                    address=srv.endpoint)
        prover.absorb_secret(secret)
        for path in args.scenario:
            prover.ingest_scenario(load_scenario(path), settings.dram)
        print(json.dumps({"role": "prover", "prover_id": prover.prover_id, "listen": srv.endpoint,
                          "boot_id": prover.boot_id, "log_length": len(prover.log)}), flush=True)
        _wait_for_interrupt()
    finally:
        srv.stop()
    return 0


def cmd_sim(args) -> int:
    settings = _settings(args)
    try:
        report = run_trace(settings.dram, load_trace(args.trace))
    except (OSError, TraceError) as exc:
        print(f"rhattest sim: {exc}", file=sys.stderr)
        return 2
    print(report.to_json())
    return 0


COMMANDS = {"gen": cmd_gen, "attest": cmd_attest, "eval": cmd_eval, "serve": cmd_serve, "sim": cmd_sim}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else
                        logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        return 0
    except ValueError as exc:  # bad config or arguments
        print(f"rhattest {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
