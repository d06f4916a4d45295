import json

from sqlalchemy import Boolean, Column, DateTime, Float, Integer, String, Text
from sqlalchemy.sql import func

from app.database import Base


class ProvenanceRecord(Base):
    __tablename__ = "provenance"

    id = Column(Integer, primary_key=True, index=True)
    layout_id = Column(String, index=True)
    # Hash of the synthesis request (layout id, seed, batch size, layout); a rerun reuses matching rows
    request_key = Column(String, index=True)
    sample_index = Column(Integer)
    file_name = Column(String, unique=True)
    layout_source = Column(String)
    parent_index = Column(Integer, nullable=True)
    spe_seed = Column(Integer, nullable=True)
    spe_backend = Column(String)
    spe_retries = Column(Integer, default=0)
    fallback = Column(Text, nullable=True)
    lis_seed = Column(Integer)
    lis_backend = Column(String)
    scorer = Column(String)
    lacs = Column(Float)
    cs_crop = Column(Float, nullable=True)
    per_category = Column(Text)  # JSON string of category scores
    hallucinations = Column(Text, nullable=True)  # JSON string, mock renderer only
    picked = Column(Boolean, default=False)
    created_at = Column(DateTime(timezone=True), server_default=func.now())
    updated_at = Column(DateTime(timezone=True), onupdate=func.now())

    def as_dict(self) -> dict:
        return {
            "layout_id": self.layout_id,
            "sample_index": self.sample_index,
            "file_name": self.file_name,
            "request_key": self.request_key,
            "layout_source": self.layout_source,
            "parent_index": self.parent_index,
            "spe_seed": self.spe_seed,
            "spe_backend": self.spe_backend,
            "spe_retries": self.spe_retries,
            "fallback": self.fallback,
            "lis_seed": self.lis_seed,
            "lis_backend": self.lis_backend,
            "scorer": self.scorer,
            "lacs": self.lacs,
            "cs_crop": self.cs_crop,
            "per_category": json.loads(self.per_category or "[]"),
            "hallucinations": json.loads(self.hallucinations) if self.hallucinations else [],
            "picked": bool(self.picked),
            "created_at": self.created_at.isoformat() if self.created_at else None,
            "updated_at": self.updated_at.isoformat() if self.updated_at else None,
        }
