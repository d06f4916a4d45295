from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.database import Base, engine
from app.models.run import Run
from app.routers import runs, scores
from app.core.logging import configure_logging
from app.core.scheduler import scheduler, start_scheduler

# Create database tables
Base.metadata.create_all(bind=engine, tables=[Run.__table__])


@asynccontextmanager
async def lifespan(app: FastAPI):
    configure_logging()
    start_scheduler()
    yield
    if scheduler.running:
        scheduler.shutdown(wait=False)


app = FastAPI(title="Few-shot Layout Augmentation API", lifespan=lifespan)

# Configure CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(runs.router)
app.include_router(scores.router)


@app.get("/")
async def root():
    return {"message": "Few-shot Layout Augmentation API"}
