# unips_system/tests/repositories_test.py

from unips_system.data.models import CheckpointRecord, EvaluationRecord, TrainingRun
from unips_system.data.repositories import CheckpointRepository, EvaluationRepository, TrainingRunRepository


def _run(db_session, run_dir="/runs/a", kind="train"):
    run = TrainingRun(kind=kind, run_dir=run_dir, seed=3)
    TrainingRunRepository(db_session).add_run(run)
    db_session.commit()
    return run


def test_run_lifecycle(db_session):
    repo = TrainingRunRepository(db_session)
    run = _run(db_session)
    assert repo.get_run_by_id(run.id).status == "running"
    repo.finish_run(run, "completed", 120, 14.5)
    db_session.commit()
    stored = repo.get_run_by_id(run.id)
    assert stored.status == "completed"
    assert stored.iterations == 120
    assert stored.best_val_mae == 14.5
    assert stored.finished_at is not None
    assert repo.get_run_by_id(9999) is None


def test_runs_are_listed_by_directory(db_session):
    first = _run(db_session, "/runs/a")
    _run(db_session, "/runs/b", kind="pretrain")
    repo = TrainingRunRepository(db_session)
    assert [r.id for r in repo.get_runs_by_dir("/runs/a")] == [first.id]
    assert len(repo.get_all_runs()) == 2


def test_only_one_checkpoint_is_best(db_session):
    run = _run(db_session)
    repo = CheckpointRepository(db_session)
    records = [CheckpointRecord(run_id=run.id, path=f"/runs/a/epoch_00{e}.ckpt", epoch=e, iteration=10 * e,
                                val_mae=mae) for e, mae in ((1, 20.0), (2, 12.0), (3, 15.0))]
    for record in records:
        repo.add_checkpoint(record)
    db_session.commit()
    repo.mark_best(records[0])
    repo.mark_best(records[1])
    db_session.commit()
    assert repo.get_best_checkpoint(run.id).epoch == 2
    assert [c.epoch for c in repo.get_checkpoints_for_run(run.id)] == [1, 2, 3]
    assert sum(c.is_best for c in repo.get_checkpoints_for_run(run.id)) == 1
    assert len(run.checkpoints) == 3


def test_evaluations_by_checkpoint_and_kind(db_session):
    repo = EvaluationRepository(db_session)
    repo.add_evaluation(EvaluationRecord(checkpoint_path="/m.ckpt", dataset="/d", kind="eval", mae=9.0))
    repo.add_evaluation(EvaluationRecord(checkpoint_path="/m.ckpt", dataset="/d", kind="kscale", k=1, mae=14.0))
    repo.add_evaluation(EvaluationRecord(checkpoint_path="/other.ckpt", dataset="/d", kind="kscale", k=4, mae=7.0))
    db_session.commit()
    assert [e.mae for e in repo.get_evaluations_for_checkpoint("/m.ckpt")] == [9.0, 14.0]
    assert sorted(e.k for e in repo.get_evaluations_by_kind("kscale")) == [1, 4]
