import os
from datetime import datetime
from typing import Optional

import uvicorn
from fastapi import Depends, FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from sqlalchemy.orm import Session

from db import sqlite_setup
from db.load_trajectories import load_trajectories
from routers.trajectory import trajectory_router
from routers.visualization import visualization_router
from utils.errors import ParseError

app = FastAPI(title="memory-cycle trajectory registry")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# add routers to main app
app.include_router(trajectory_router, prefix="/trajectory")
app.include_router(visualization_router, prefix="/visualization")


@app.get("/")
def health():
    return {"status": "this service is healthy @ " + datetime.now().__str__()}


@app.get("/load/")
def load_trajectory_log(
    log_path: Optional[str] = Query(None),
    run_id: str = Query("default"),
    db_session: Session = Depends(sqlite_setup.fetch_db_session),
):
    log_path = log_path or os.getenv(
        "MEMCYCLE_TRAJECTORY_LOG", "./runs/trajectories.jsonl"
    )
    sqlite_setup.create_db_tables(bind=db_session.get_bind())
    try:
        count = load_trajectories(log_path, run_id, db_session)
    except FileNotFoundError as exc:
        raise HTTPException(
            status_code=404, detail=f"no trajectory log at {log_path}"
        ) from exc
    except ParseError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    return {"status": "loaded trajectories successfully", "count": count}


def serve(port: Optional[int] = None):
    port = port or int(os.environ.get("PORT", 8000))
    uvicorn.run("main:app", host="0.0.0.0", port=port, reload=False)


if __name__ == "__main__":
    serve()
