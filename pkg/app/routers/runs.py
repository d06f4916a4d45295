from fastapi import APIRouter, Depends, HTTPException, status
from sqlalchemy.orm import Session
from typing import List
from datetime import datetime
from pathlib import Path
import json
from pydantic import BaseModel, ValidationError
from app.database import get_db
from app.models.run import Run, RunKind, RunStatus
from app.core.config import PipelineConfig
from app.core import scheduler

router = APIRouter(prefix="/api/runs", tags=["runs"])


class RunCreate(BaseModel):
    kind: RunKind = RunKind.RUN
    config: dict


class RunResponse(BaseModel):
    id: int
    kind: RunKind
    status: RunStatus
    out_dir: str
    config: dict
    result: dict | None = None
    error: str | None = None
    created_at: datetime | None = None


def to_response(run: Run) -> RunResponse:
    return RunResponse(
        id=run.id,
        kind=run.kind,
        status=run.status,
        out_dir=run.out_dir,
        config=json.loads(run.config),
        result=json.loads(run.result) if run.result else None,
        error=run.error,
        created_at=run.created_at,
    )


@router.post("", response_model=RunResponse, status_code=status.HTTP_201_CREATED)
def create_run(payload: RunCreate, db: Session = Depends(get_db)):
    try:
        config = PipelineConfig.model_validate(payload.config)
    except ValidationError as err:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"Invalid configuration: {err}"
        )
    if payload.kind == RunKind.TOPN_STUDY and not config.topn_study:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail="A top-n study needs config.topn_study"
        )

    # Only one active run per output directory
    active = db.query(Run).filter(Run.status.in_([RunStatus.QUEUED, RunStatus.RUNNING])).all()
    target = Path(config.out_dir).resolve()
    if any(Path(other.out_dir).resolve() == target for other in active):
        raise HTTPException(
            status_code=status.HTTP_409_CONFLICT,
            detail=f"A run is already active in {config.out_dir}"
        )

    # Queue the run
    run = Run(
        kind=payload.kind,
        status=RunStatus.QUEUED,
        config=config.model_dump_json(),
        out_dir=config.out_dir
    )
    db.add(run)
    db.commit()
    db.refresh(run)

    scheduler.schedule_run(run.id)
    return to_response(run)


@router.get("", response_model=List[RunResponse])
def list_runs(db: Session = Depends(get_db)):
    runs = db.query(Run).order_by(Run.id).all()
    return [to_response(run) for run in runs]


@router.get("/{run_id}", response_model=RunResponse)
def get_run(run_id: int, db: Session = Depends(get_db)):
    run = db.query(Run).filter(Run.id == run_id).first()
    if not run:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail="Run not found"
        )
    return to_response(run)
