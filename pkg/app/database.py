import os
from pathlib import Path
from typing import Tuple, Union

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, sessionmaker

# Job database for runs submitted through the API
SQLALCHEMY_DATABASE_URL = os.getenv("AUGMENT_DATABASE_URL", "sqlite:///./augment_jobs.db")


def _connect_args(url: str) -> dict:
    # SQLite sessions are shared with the scheduler thread
    return {"check_same_thread": False} if url.startswith("sqlite") else {}


engine = create_engine(SQLALCHEMY_DATABASE_URL, connect_args=_connect_args(SQLALCHEMY_DATABASE_URL))
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

Base = declarative_base()


# Dependency
def get_db():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


def open_provenance_db(out_dir: Union[str, Path]) -> Tuple[Engine, sessionmaker]:
    """Per-run SQLite file <out_dir>/provenance.db holding one row per generated image."""
    from app.models.provenance import ProvenanceRecord

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    url = f"sqlite:///{(out_dir / 'provenance.db').resolve()}"
    run_engine = create_engine(url, connect_args=_connect_args(url))
    Base.metadata.create_all(bind=run_engine, tables=[ProvenanceRecord.__table__])
    return run_engine, sessionmaker(autocommit=False, autoflush=False, bind=run_engine)
