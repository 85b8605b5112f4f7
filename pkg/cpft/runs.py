"""
Run ledger: one row per CLI invocation, written next to the per-run
directory so past runs can be listed without walking the output tree.

Ledger failures are logged and swallowed; they never fail a run.
"""
from __future__ import annotations

import logging
from datetime import datetime
from typing import Any, Dict, List, Optional

from sqlalchemy import DateTime, Integer, JSON, String, Text, select
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Mapped, mapped_column

from .config import settings
from .db import Base, SessionLocal, init_db

logger = logging.getLogger(__name__)


class RunRecord(Base):
    __tablename__ = "runs"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, index=True)
    run_id: Mapped[str] = mapped_column(String(64), unique=True, index=True)
    verb: Mapped[str] = mapped_column(String(16), index=True)  # synth | ingest | pretrain | ...
    run_dir: Mapped[str] = mapped_column(Text)
    config: Mapped[Optional[Dict[str, Any]]] = mapped_column(JSON, nullable=True)  # effective TrainConfig
    manifest_sha256: Mapped[Optional[str]] = mapped_column(String(64), nullable=True)
    status: Mapped[str] = mapped_column(String(16), default="started")  # started | succeeded | failed
    exit_code: Mapped[Optional[int]] = mapped_column(Integer, nullable=True)
    created_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow)
    finished_at: Mapped[Optional[datetime]] = mapped_column(DateTime, nullable=True)


def record_run_started(run_id: str, verb: str, run_dir: str, config: Optional[Dict[str, Any]] = None) -> bool:
    if not settings.record_runs:
        return False
    db = SessionLocal()
    try:
        init_db()
        db.add(RunRecord(run_id=run_id, verb=verb, run_dir=str(run_dir), config=config))
        db.commit()
        return True
    except SQLAlchemyError as e:
        db.rollback()
        logger.warning(f"Could not record run {run_id} in the ledger: {e}")
        return False
    finally:
        db.close()


def record_run_finished(run_id: str, exit_code: int, manifest_sha256: Optional[str] = None) -> bool:
    if not settings.record_runs:
        return False
    db = SessionLocal()
    try:
        record = db.scalars(select(RunRecord).where(RunRecord.run_id == run_id)).first()
        if record is None:
            logger.warning(f"Run {run_id} missing from the ledger")
            return False
        record.exit_code = exit_code
        record.status = "succeeded" if exit_code == 0 else "failed"
        record.manifest_sha256 = manifest_sha256
        record.finished_at = datetime.utcnow()
        db.commit()
        return True
    except SQLAlchemyError as e:
        db.rollback()
        logger.warning(f"Could not finish run {run_id} in the ledger: {e}")
        return False
    finally:
        db.close()


def recent_runs(limit: int = 20, verb: Optional[str] = None, status: Optional[str] = None) -> List[RunRecord]:
    """Newest first, optionally filtered by verb and status."""
    db = SessionLocal()
    try:
        init_db()
        query = select(RunRecord).order_by(RunRecord.created_at.desc(), RunRecord.id.desc()).limit(limit)
        if verb is not None:
            query = query.where(RunRecord.verb == verb)
        if status is not None:
            query = query.where(RunRecord.status == status)
        rows = list(db.scalars(query))
        db.expunge_all()
        return rows
    finally:
        db.close()


def format_runs(rows: List[RunRecord]) -> str:
    """Plain-text table of ledger rows for the terminal."""
    if not rows:
        return "No runs recorded."
    header = f"{'run_id':<40} {'verb':<12} {'status':<10} {'exit':>4}  {'started':<19}  run_dir"
    lines = [header, "-" * len(header)]
    for r in rows:
        code = "" if r.exit_code is None else str(r.exit_code)
        started = r.created_at.strftime("%Y-%m-%d %H:%M:%S") if r.created_at else ""
        lines.append(f"{r.run_id:<40} {r.verb:<12} {r.status:<10} {code:>4}  {started:<19}  {r.run_dir}")
    return "\n".join(lines)
