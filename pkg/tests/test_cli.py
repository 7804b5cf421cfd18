import json
import os
import signal
import socket
import subprocess
import sys
import time

import httpx
import pytest

from rhattest.cli import main


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def gen(tmp_path, *args, name="s.json"):
    out = tmp_path / name
    assert main(["gen", *args, "-o", str(out)]) == 0
    return out


@pytest.mark.parametrize("kind,extra", [
    ("benign", []), ("double_sided", []), ("many_sided", ["--aggressors", "4", "--hammer-reps", "100"]),
    ("ecc_templating", ["--mces", "3"]),
])
def test_gen_each_kind(tmp_path, kind, extra):
    path = gen(tmp_path, "--kind", kind, "--seed", "5", *extra)
    doc = json.loads(path.read_text())
    assert doc["kind"] == kind
    assert doc["label"] == ("benign" if kind == "benign" else "malicious")


def test_gen_is_reproducible(tmp_path, capsys):
    assert main(["gen", "--kind", "double_sided", "--seed", "9"]) == 0
    first = capsys.readouterr().out
    assert main(["--seed", "9", "gen", "--kind", "double_sided"]) == 0
    assert capsys.readouterr().out == first


def test_gen_with_separate_trace_file(tmp_path):
    path = tmp_path / "s.json"
    trace = tmp_path / "s.trace"
    assert main(["gen", "--kind", "benign", "--length", "50", "-o", str(path),
                 "--trace-out", str(trace)]) == 0
    assert "trace_file" in json.loads(path.read_text())
    assert trace.read_text().splitlines()[-1] == "END"
    assert main(["sim", str(trace)]) == 0


def test_gen_infeasible_is_a_usage_error(capsys):
    assert main(["gen", "--kind", "benign", "--mces", "3"]) == 2
    assert "rhattest gen" in capsys.readouterr().err


def test_bad_flag_is_a_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["gen", "--no-such-flag"])
    assert info.value.code == 2


@pytest.mark.parametrize("kind,extra,tamper,code", [
    ("benign", [], None, 0),
    ("double_sided", [], None, 10),
    ("double_sided", [], "record:1", 14),
    ("double_sided", [], "sig", 13),
    ("double_sided", [], "nonce", 12),
    ("double_sided", [], "flip:0", 16),
])
def test_attest_exit_codes(tmp_path, capsys, kind, extra, tamper, code):
    path = gen(tmp_path, "--kind", kind, "--seed", "1", *extra)
    argv = ["attest", str(path)] + (["--tamper", tamper] if tamper else [])
    assert main(argv) == code
    report = json.loads(capsys.readouterr().out)
    assert report["verdict"] == ("uncompromised" if code == 0 else "compromised")


def test_attest_over_tcp(tmp_path):
    path = gen(tmp_path, "--kind", "benign", "--seed", "2")
    assert main(["attest", str(path), "--transport", "tcp"]) == 0


def test_attest_timeout(tmp_path):
    path = gen(tmp_path, "--kind", "benign", "--length", "100")
    assert main(["attest", str(path), "--timeout-ms", "100", "--delay-ms", "150"]) == 11


def test_attest_usage_errors(tmp_path):
    assert main(["attest"]) == 2
    assert main(["attest", str(tmp_path / "missing.json")]) == 2
    path = gen(tmp_path, "--kind", "benign", "--length", "10")
    assert main(["attest", str(path), "--tamper", "nope"]) == 2
    assert main(["attest", "--verifier-url", "http://127.0.0.1:1"]) == 2


def test_bad_config_is_a_usage_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dram": {"abo_recovery_refs": 9}}))
    assert main(["--config", str(cfg), "gen"]) == 2


def test_eval_small(tmp_path, capsys):
    out = tmp_path / "m.json"
    assert main(["eval", "--n-benign", "2", "--n-malicious", "2", "-o", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["true_negative"] == 2 and doc["true_positive"] == 2
    assert "TN=2" in capsys.readouterr().err


def _spawn(*args):
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    return subprocess.Popen([sys.executable, "-m", "rhattest", *args], stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, text=True, env=env)


def _ready(proc):
    line = proc.stdout.readline()
    assert line, proc.stderr.read()
    return json.loads(line)


def test_serve_end_to_end(tmp_path):
    secrets_port, http_port, prover_port = free_port(), free_port(), free_port()
    vcfg = tmp_path / "v.json"
    vcfg.write_text(json.dumps({"verifier": {"listen_address": f"tcp://127.0.0.1:{secrets_port}",
                                             "http_address": f"127.0.0.1:{http_port}"}}))
    url = f"http://127.0.0.1:{http_port}"
    pcfg = tmp_path / "p.json"
    pcfg.write_text(json.dumps({"prover": {"prover_id": "edge-1",
                                           "listen_address": f"tcp://127.0.0.1:{prover_port}",
                                           "verifier_address": f"tcp://127.0.0.1:{secrets_port}",
                                           "verifier_url": url}}))
    clean_cfg = tmp_path / "p2.json"
    clean_cfg.write_text(json.dumps({"prover": {"prover_id": "edge-2",
                                                "listen_address": f"tcp://127.0.0.1:{free_port()}",
                                                "verifier_address": f"tcp://127.0.0.1:{secrets_port}",
                                                "verifier_url": url}}))
    scenario = gen(tmp_path, "--kind", "double_sided", "--seed", "4")
    verifier = _spawn("serve", "--role", "verifier", "--config", str(vcfg))
    prover = clean = None
    try:
        assert _ready(verifier)["role"] == "verifier"
        for _ in range(50):
            try:
                httpx.get(url + "/health", timeout=1)
                break
            except httpx.HTTPError:
                time.sleep(0.1)
        prover = _spawn("serve", "--role", "prover", "--config", str(pcfg), "--scenario", str(scenario))
        assert _ready(prover)["log_length"] >= 3

        clash = _spawn("serve", "--role", "verifier", "--config", str(vcfg))
        assert clash.wait(30) == 1
        assert "bind failed" in clash.stderr.read()

        clean = _spawn("serve", "--role", "prover", "--config", str(clean_cfg))
        assert _ready(clean)["log_length"] == 0

        assert main(["attest", "--verifier-url", url, "--prover-id", "edge-2"]) == 0
        assert main(["attest", "--verifier-url", url, "--prover-id", "edge-1"]) == 10
        assert main(["attest", "--verifier-url", url, "--prover-id", "ghost"]) == 1
        reports = httpx.get(url + "/attestations", params={"prover_id": "edge-1"}).json()
        assert [r["reason"] for r in reports] == ["measurement_threshold_exceeded"]
    finally:
        for proc in (clean, prover, verifier):
            if proc is not None:
                proc.send_signal(signal.SIGINT)
        for proc in (clean, prover, verifier):
            if proc is not None:
                assert proc.wait(30) == 0
