# unips_system/data/repositories.py
from datetime import datetime
from typing import List, Optional

from sqlalchemy.orm import Session

from unips_system.data.models import CheckpointRecord, EvaluationRecord, TrainingRun


class TrainingRunRepository:
    def __init__(self, db: Session):
        self.db = db

    def get_run_by_id(self, run_id: int) -> TrainingRun | None:
        return self.db.query(TrainingRun).filter(TrainingRun.id == run_id).first()

    def get_runs_by_dir(self, run_dir: str) -> List[TrainingRun]:
        return self.db.query(TrainingRun).filter(TrainingRun.run_dir == run_dir).all()

    def get_all_runs(self) -> List[TrainingRun]:
        return self.db.query(TrainingRun).order_by(TrainingRun.id).all()

    def add_run(self, run: TrainingRun):
        self.db.add(run)
        # The service owns the commit.

    def finish_run(self, run: TrainingRun, status: str, iterations: int, best_val_mae: Optional[float]):
        run.status = status
        run.iterations = iterations
        run.best_val_mae = best_val_mae
        run.finished_at = datetime.utcnow()


class CheckpointRepository:
    def __init__(self, db: Session):
        self.db = db

    def add_checkpoint(self, checkpoint: CheckpointRecord):
        self.db.add(checkpoint)

    def get_checkpoints_for_run(self, run_id: int) -> List[CheckpointRecord]:
        return (self.db.query(CheckpointRecord).filter(CheckpointRecord.run_id == run_id)
                .order_by(CheckpointRecord.iteration).all())

    def get_best_checkpoint(self, run_id: int) -> CheckpointRecord | None:
        return self.db.query(CheckpointRecord).filter(
            CheckpointRecord.run_id == run_id,
            CheckpointRecord.is_best.is_(True)
        ).first()

    def mark_best(self, checkpoint: CheckpointRecord):
        for other in self.get_checkpoints_for_run(checkpoint.run_id):
            other.is_best = other.id == checkpoint.id


class EvaluationRepository:
    def __init__(self, db: Session):
        self.db = db

    def add_evaluation(self, evaluation: EvaluationRecord):
        self.db.add(evaluation)

    def get_evaluations_for_checkpoint(self, checkpoint_path: str) -> List[EvaluationRecord]:
        return (self.db.query(EvaluationRecord).filter(EvaluationRecord.checkpoint_path == checkpoint_path)
                .order_by(EvaluationRecord.id).all())

    def get_evaluations_by_kind(self, kind: str) -> List[EvaluationRecord]:
        return self.db.query(EvaluationRecord).filter(EvaluationRecord.kind == kind).all()
