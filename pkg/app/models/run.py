from sqlalchemy import Column, Integer, String, DateTime, Enum, Text
import enum
from app.database import Base
from sqlalchemy.sql import func


class RunStatus(str, enum.Enum):
    QUEUED = "queued"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class RunKind(str, enum.Enum):
    RUN = "run"
    SWEEP = "sweep"
    TOPN_STUDY = "topn-study"


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    kind = Column(Enum(RunKind), default=RunKind.RUN)
    status = Column(Enum(RunStatus), default=RunStatus.QUEUED)
    config = Column(Text)  # JSON string of the PipelineConfig
    out_dir = Column(String)
    result = Column(Text, nullable=True)  # JSON string of the summary or report
    error = Column(Text, nullable=True)
    created_at = Column(DateTime(timezone=True), server_default=func.now())
    updated_at = Column(DateTime(timezone=True), onupdate=func.now())
