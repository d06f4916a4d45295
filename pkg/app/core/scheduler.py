import json
import logging

from apscheduler.executors.pool import ThreadPoolExecutor
from apscheduler.schedulers.background import BackgroundScheduler
from apscheduler.triggers.date import DateTrigger

from app.core.config import PipelineConfig
from app.core.errors import AugmentError
from app.database import SessionLocal
from app.models.run import Run, RunKind, RunStatus
from app.services import pipeline

logger = logging.getLogger(__name__)

# One worker: queued runs execute one at a time
scheduler = BackgroundScheduler(executors={"default": ThreadPoolExecutor(max_workers=1)})


def execute_run(run_id: int):
    db = SessionLocal()
    try:
        run = db.query(Run).filter(Run.id == run_id).first()
        if run is None:
            logger.warning("run %d vanished before it started", run_id)
            return
        run.status = RunStatus.RUNNING
        db.commit()

        try:
            config = PipelineConfig.model_validate_json(run.config)
            if run.kind == RunKind.SWEEP:
                result = pipeline.sweep_ratios(config)
            elif run.kind == RunKind.TOPN_STUDY:
                result = pipeline.topn_study(config)
            else:
                result = pipeline.run(config).summary
        except AugmentError as err:
            logger.error("run %d failed: %s", run_id, err)
            run.status = RunStatus.FAILED
            run.error = str(err)
        except Exception as err:
            logger.exception("run %d crashed", run_id)
            run.status = RunStatus.FAILED
            run.error = f"{type(err).__name__}: {err}"
        else:
            run.status = RunStatus.COMPLETED
            run.result = json.dumps(result)
        db.commit()
    finally:
        db.close()


def schedule_run(run_id: int):
    scheduler.add_job(
        execute_run,
        trigger=DateTrigger(),
        args=[run_id],
        id=f"run-{run_id}",
        replace_existing=True,
        max_instances=1,
    )


def start_scheduler():
    if not scheduler.running:
        scheduler.start()
