# unips_system/tests/pipeline_test.py

import json
import os

import numpy as np
import pytest

from unips_system.business_logic import pipeline_service
from unips_system.business_logic.pipeline_service import STAGES, PipelineService
from unips_system.core.exceptions import DatasetWriteError, PipelineStageError
from unips_system.data.repositories import EvaluationRepository, TrainingRunRepository
from unips_system.simulator.scene_io import read_normal_map


def test_smoke_pipeline_passes_every_stage(tmp_path, db_session):
    out = str(tmp_path / "smoke")
    report = PipelineService(db_session).pipeline_smoke(seed=0, output_dir=out)
    assert report.passed
    assert [s.name for s in report.stages] == list(STAGES)
    assert np.isfinite(report.final_loss)
    assert 0.0 <= report.eval_mae <= 180.0

    with open(os.path.join(out, "smoke_report.json"), encoding="utf-8") as handle:
        summary = json.load(handle)
    assert summary["passed"] is True
    assert [s["name"] for s in summary["stages"]] == list(STAGES)
    normals = read_normal_map(os.path.join(out, "infer", "normals.f32"))
    np.testing.assert_allclose(np.linalg.norm(normals, axis=-1), 1.0, atol=1e-4)
    assert os.path.exists(os.path.join(out, "infer", "normals.png"))

    kinds = sorted(run.kind for run in TrainingRunRepository(db_session).get_all_runs())
    assert kinds == ["pretrain", "train"]
    assert len(EvaluationRepository(db_session).get_evaluations_by_kind("eval")) == 1


def test_failing_stage_is_named(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise DatasetWriteError("disk full")

    monkeypatch.setattr(pipeline_service, "gen_dataset", broken)
    with pytest.raises(PipelineStageError, match="disk full") as info:
        PipelineService().pipeline_smoke(seed=0, output_dir=str(tmp_path / "smoke"))
    assert info.value.stage == "gen-data"


@pytest.mark.slow
def test_same_seed_reproduces_the_smoke_run(tmp_path):
    first = PipelineService().pipeline_smoke(seed=7, output_dir=str(tmp_path / "a"))
    second = PipelineService().pipeline_smoke(seed=7, output_dir=str(tmp_path / "b"))
    assert first.final_loss == second.final_loss
    assert first.eval_mae == second.eval_mae
