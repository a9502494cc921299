import logging
from pathlib import Path

from sqlalchemy.orm import Session

from memory_handlers.store import deserialize_trajectories
from sqlalchemy_schemas.trajectory import TrajectoryRecord
from utils.dataframe import trajectory_summary

logger = logging.getLogger(__name__)

BATCH_SIZE = 5000


def load_trajectories(log_path: str, run_id: str, db_session: Session) -> int:
    """Bulk-load the summaries of a trajectory log; returns the rows written."""
    trajectories = deserialize_trajectories(Path(log_path).read_bytes())
    logger.info(
        "loading %d trajectories from %s as run %s", len(trajectories), log_path, run_id
    )
    records: list[TrajectoryRecord] = []
    for trajectory in trajectories:
        summary = trajectory_summary(trajectory)
        records.append(TrajectoryRecord(run_id=run_id, **summary))
        if len(records) == BATCH_SIZE:
            db_session.bulk_save_objects(records)
            db_session.commit()
            records = []

    db_session.bulk_save_objects(records)
    db_session.commit()
    db_session.close()
    return len(trajectories)
