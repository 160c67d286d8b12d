"""
DATABASE CONFIGURATION - SQLAlchemy setup and session management

This file configures the results store the harness writes to.
It sets up:
1. Database engine (SQLite file by default, any SQLAlchemy URL via POWQUANT_RESULTS_DB)
2. Session factory for creating database sessions
3. Base class for all ORM models
4. get_session() context manager used by experiments and the report command

The store is advisory: CSV files are the artifacts experiments guarantee
to be deterministic.
"""

from contextlib import contextmanager
from typing import Iterator, Optional

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

from powquant.config import RESULTS_DB

# STEP 1: Create database engine
# pool_pre_ping=True ensures connections are validated before use
engine = create_engine(RESULTS_DB, pool_pre_ping=True)

# STEP 2: Create session factory
# autocommit=False, autoflush=False for explicit transaction control
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

# STEP 3: Create base class for all ORM models
Base = declarative_base()


def init_db(bind: Optional[Engine] = None) -> None:
    """Create tables that do not exist yet."""
    from powquant import models  # noqa: F401  (registers tables on Base)
    Base.metadata.create_all(bind=bind or engine)


@contextmanager
def get_session(factory: Optional[sessionmaker] = None) -> Iterator[Session]:
    """
    Session scope: commit on success, roll back on error, always close.

    Usage:
    with get_session() as db:
        db.add(row)
    """
    db = (factory or SessionLocal)()
    try:
        yield db
        db.commit()
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()
