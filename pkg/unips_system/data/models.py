# unips_system/data/models.py
from datetime import datetime

from sqlalchemy import Boolean, Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import declarative_base, relationship

# Single declarative base shared by every registry model.
Base = declarative_base()


class TrainingRun(Base):
    """
    One pretraining or training run and its outcome.
    """
    __tablename__ = "training_runs"

    id = Column(Integer, primary_key=True, index=True)
    kind = Column(String, nullable=False)  # pretrain, train
    run_dir = Column(String, nullable=False, index=True)
    seed = Column(Integer, default=0)
    config_json = Column(Text, nullable=True)
    status = Column(String, default="running")  # running, completed, diverged, failed
    iterations = Column(Integer, default=0)
    best_val_mae = Column(Float, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime, nullable=True)

    checkpoints = relationship("CheckpointRecord", back_populates="run", cascade="all, delete-orphan",
                               lazy="selectin")


class CheckpointRecord(Base):
    """
    A checkpoint file written by a run; at most one per run carries ``is_best``.
    """
    __tablename__ = "checkpoints"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("training_runs.id"), nullable=False)
    path = Column(String, nullable=False)
    epoch = Column(Integer, nullable=False)
    iteration = Column(Integer, nullable=False)
    val_mae = Column(Float, nullable=True)
    is_best = Column(Boolean, default=False)
    created_at = Column(DateTime, default=datetime.utcnow)

    run = relationship("TrainingRun", back_populates="checkpoints")


class EvaluationRecord(Base):
    """
    One evaluated cell: a checkpoint on a dataset at a given K.
    """
    __tablename__ = "evaluations"

    id = Column(Integer, primary_key=True, index=True)
    checkpoint_path = Column(String, nullable=False, index=True)
    dataset = Column(String, nullable=False)
    kind = Column(String, default="eval")  # eval, encoders, projection, kscale
    cell = Column(String, nullable=True)
    k = Column(Integer, nullable=True)
    mae = Column(Float, nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow)
