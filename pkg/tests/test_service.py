import pytest
from fastapi.testclient import TestClient

from rhattest.agents import VerifierService, prover_server
from rhattest.prover import Prover
from rhattest.service import create_app
from rhattest.tpm import SoftTpm


@pytest.fixture
def service(verifier):
    return VerifierService(verifier)


@pytest.fixture
def client(service):
    return TestClient(create_app(service))


@pytest.fixture
def live_prover(service):
    prover = Prover(service.verifier.public_key, "edge")
    req = prover.boot()
    with prover_server(prover) as srv:
        service.register("edge", prover.tpm.export_public_key(), srv.endpoint)
        prover.absorb_secret(service.verifier.provision_secret("edge", req.boot_id))
        yield prover


def test_health_and_key(client, service):
    assert client.get("/health").json() == {"status": "ok", "provers": 0}
    assert client.get("/public-key").json()["public_key"] == service.verifier.export_public_key()


def test_register_and_list(client):
    key = SoftTpm(key_size=1024).export_public_key()
    r = client.post("/provers", json={"prover_id": "a", "tpm_pub": key, "address": "tcp://127.0.0.1:9"})
    assert r.status_code == 201
    assert client.get("/provers").json() == [{"prover_id": "a", "address": "tcp://127.0.0.1:9"}]
    assert client.post("/provers", json={"prover_id": "b", "tpm_pub": "AAAA"}).status_code == 422
    assert client.post("/provers", json={"prover_id": "c"}).status_code == 422


def test_attest_live_prover(client, live_prover):
    r = client.post("/attestations", json={"prover_id": "edge"})
    assert r.status_code == 200 and r.json()["verdict"] == "uncompromised"
    for i in range(3):
        live_prover.record_mce("UE", i)
    r = client.post("/attestations", json={"prover_id": "edge"})
    assert r.json()["reason"] == "measurement_threshold_exceeded" and r.json()["mce_count"] == 3
    assert len(client.get("/attestations", params={"prover_id": "edge"}).json()) == 2
    assert client.get("/attestations", params={"prover_id": "other"}).json() == []


def test_unknown_prover_is_404(client):
    assert client.post("/attestations", json={"prover_id": "nobody"}).status_code == 404


def test_prover_without_address_is_409(client, service):
    service.register("quiet", SoftTpm(key_size=1024).export_public_key())
    assert client.post("/attestations", json={"prover_id": "quiet"}).status_code == 409


def test_unreachable_prover_is_missing(client, service):
    service.register("gone", SoftTpm(key_size=1024).export_public_key(), "tcp://127.0.0.1:1")
    r = client.post("/attestations", json={"prover_id": "gone"})
    assert r.status_code == 200 and r.json()["reason"] == "missing_response"
