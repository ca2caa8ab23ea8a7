from typing import List

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field

from app.harness.acceptance import CHECKS, CriterionResult, verify
from app.harness.config import ModelBlock
from app.harness.core import PhiReport, phi_report

router = APIRouter()


class PhiRequest(BaseModel):
    model: ModelBlock
    thetas: List[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0])


class VerifyRequest(BaseModel):
    scale: float = Field(default=0.01, gt=0.0)
    seed: int = Field(default=0, ge=0)
    workers: int = Field(default=1, ge=1)
    output_dir: str = "outputs"


@router.post("/phi", response_model=PhiReport)
def phi_endpoint(request: PhiRequest):
    try:
        return phi_report(request.model, request.thetas)
    except ValueError as e:
        raise HTTPException(status_code=422, detail=str(e))


@router.post("/verify/{criterion}", response_model=CriterionResult)
def verify_endpoint(criterion: str, request: VerifyRequest):
    if criterion.upper() not in CHECKS:
        raise HTTPException(status_code=404, detail=f"Unknown criterion {criterion}")
    return verify(criterion, request.scale, request.seed, request.workers, request.output_dir)
