from datetime import datetime, timezone
from sqlalchemy import create_engine, Column, Integer, String, DateTime, Float, Text, ForeignKey, Boolean
from sqlalchemy.ext.declarative import declarative_base
from sqlalchemy.orm import sessionmaker, relationship

import os

# KFP_DATABASE_URL overrides DATABASE_URL; local SQLite otherwise
database_url = (
    os.getenv("KFP_DATABASE_URL") or
    os.getenv("DATABASE_URL") or
    "sqlite:///kinetic_runs.db"
)

if database_url.startswith("postgres://"):
    database_url = database_url.replace("postgres://", "postgresql://", 1)

engine = create_engine(database_url, echo=False)
SessionLocal = sessionmaker(bind=engine)

Base = declarative_base()


class Run(Base):
    """One RunManifest: everything needed to reproduce a command's outputs."""
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, nullable=False)          # simulate, limit, estimate, verify
    config_json = Column(Text, nullable=False)
    config_hash = Column(String, nullable=False)
    master_seed = Column(Integer, nullable=False)
    seed_rule = Column(String, nullable=False)
    chunk_size = Column(Integer, nullable=False)
    code_version = Column(String, nullable=False)
    out_dir = Column(String, nullable=True)
    tolerances_json = Column(Text, nullable=True)
    started_at = Column(DateTime, default=lambda: datetime.now(timezone.utc))
    finished_at = Column(DateTime, nullable=True)
    wall_time = Column(Float, nullable=True)
    status = Column(String, default="running")  # running, done, failed

    files = relationship("OutputFile", back_populates="run", cascade="all, delete-orphan")
    reports = relationship("RegimeReportRecord", back_populates="run", cascade="all, delete-orphan")


class OutputFile(Base):
    __tablename__ = "output_files"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    path = Column(String, nullable=False)
    sha256 = Column(String, nullable=False)
    size_bytes = Column(Integer, nullable=False)

    run = relationship("Run", back_populates="files")


class RegimeReportRecord(Base):
    __tablename__ = "regime_reports"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    suite = Column(String, nullable=False)
    check_name = Column(String, nullable=False)
    regime = Column(String, nullable=False)
    target_json = Column(Text, nullable=False)
    estimate_json = Column(Text, nullable=False)
    tolerance_json = Column(Text, nullable=False)
    passed = Column(Boolean, default=False)
    runtime = Column(Float, nullable=True)
    config_hash = Column(String, nullable=True)
    note = Column(Text, nullable=True)

    run = relationship("Run", back_populates="reports")


def init_db():
    Base.metadata.create_all(bind=engine)
