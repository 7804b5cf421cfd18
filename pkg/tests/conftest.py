import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rhattest.dram import Act  # noqa: E402
from rhattest.harness import Deployment, Settings  # noqa: E402
from rhattest.prover import Prover  # noqa: E402
from rhattest.verifier import Verifier  # noqa: E402


def as_tuples(trace):
    """Trace commands in the oracle's plain-tuple form."""
    out = []
    for cmd in trace:
        if isinstance(cmd, Act):
            out.append(("ACT", *cmd.addr))
        else:
            out.append((type(cmd).__name__.upper(),))
    return out


@pytest.fixture
def verifier():
    return Verifier()


@pytest.fixture
def pair(verifier):
    """A registered, booted prover with its secret absorbed."""
    prover = Prover(verifier.public_key, "p1")
    verifier.register_prover("p1", prover.tpm.public_key)
    request = prover.boot()
    prover.absorb_secret(verifier.provision_secret(request.prover_id, request.boot_id))
    return verifier, prover


@pytest.fixture
def deployment():
    with Deployment(Settings()) as dep:
        dep.reset()
        yield dep


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
