import os

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

DATABASE_URL = os.getenv("MEMCYCLE_DATABASE_URL", "sqlite:///./trajectories.db")
# sqlite connections are shared with the threadpool that serves sync endpoints
connect_args = {"check_same_thread": False} if DATABASE_URL.startswith("sqlite") else {}
engine = create_engine(DATABASE_URL, connect_args=connect_args)
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)
Base = declarative_base()


def fetch_db_session():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


def create_db_tables(bind=engine):
    # every load rebuilds the registry from empty tables
    Base.metadata.drop_all(bind=bind)
    Base.metadata.create_all(bind=bind)
