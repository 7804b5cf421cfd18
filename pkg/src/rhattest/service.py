"""HTTP control plane for a long-running verifier.

Provers still speak the framed TCP protocol; this API lets an operator
register provers, trigger attestations and read past reports.
"""

from __future__ import annotations

from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .agents import VerifierService
from .tpm import TpmError
from .verifier import AttestationReport, UnknownProver, VerifierError


class PublicKey(BaseModel):
    public_key: str = Field(description="DER-encoded RSA public key, base64")


class ProverRegistration(BaseModel):
    prover_id: str
    tpm_pub: str
    address: Optional[str] = None


class ProverInfo(BaseModel):
    prover_id: str
    address: Optional[str] = None


class AttestRequest(BaseModel):
    prover_id: str


class Report(BaseModel):
    prover_id: Optional[str]
    verdict: str
    reason: Optional[str]
    mce_count: int
    abo_count: int
    elapsed_ms: float

    @classmethod
    def of(cls, report: AttestationReport) -> "Report":
        return cls(**report.to_dict())


def create_app(service: VerifierService) -> FastAPI:
    app = FastAPI(title="rhattest verifier")
    app.state.service = service

    @app.get("/health")
    def health():
        return {"status": "ok", "provers": len(service.verifier.tpm_pubs)}

    @app.get("/public-key", response_model=PublicKey)
    def public_key():
        return PublicKey(public_key=service.verifier.export_public_key())

    @app.get("/provers", response_model=list[ProverInfo])
    def provers():
        return [ProverInfo(prover_id=p, address=service.directory.get(p))
                for p in sorted(service.verifier.tpm_pubs)]

    @app.post("/provers", response_model=ProverInfo, status_code=201)
    def register(reg: ProverRegistration):
        try:
            service.register(reg.prover_id, reg.tpm_pub, reg.address)
        except (TpmError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return ProverInfo(prover_id=reg.prover_id, address=reg.address)

    @app.post("/attestations", response_model=Report)
    def attest(req: AttestRequest):
        if req.prover_id not in service.verifier.tpm_pubs:
            raise HTTPException(status_code=404, detail=f"unknown prover {req.prover_id}")
        try:
            report = service.attest(req.prover_id)
        except UnknownProver as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        except VerifierError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        return Report.of(report)

    @app.get("/attestations", response_model=list[Report])
    def reports(prover_id: Optional[str] = None):
        return [Report.of(r) for r in service.reports if prover_id is None or r.prover_id == prover_id]

    return app
