# unips_system/tests/ablation_test.py

import csv
import json
import os

import numpy as np
import pytest

from unips_system.business_logic.ablation_service import (
    AblationService,
    KScalingCurve,
    check_trend,
    check_within,
    kscale_checks,
)
from unips_system.business_logic.evaluation_service import mae
from unips_system.business_logic.training_service import TrainingService
from unips_system.core.exceptions import CheckpointError, ConfigurationError, ContractError
from unips_system.data.repositories import EvaluationRepository
from unips_system.network.geometry_encoder import GeometryTrunk
from unips_system.network.inference import infer_full
from unips_system.network.model import DualBranchModel, load_model, save_model
from unips_system.simulator.dataset_generator import gen_dataset
from unips_system.simulator.scene_io import load_manifest


def _checkpoint(workspace, directory, branch_mode="dual", decoder_kind="dual_scale"):
    config = workspace.config.model.model_copy(update={"branch_mode": branch_mode, "decoder_kind": decoder_kind})
    trunk = GeometryTrunk(config, np.random.default_rng(1)) if branch_mode != "il_only" else None
    path = os.path.join(str(directory), f"{branch_mode}_{decoder_kind}.ckpt")
    save_model(DualBranchModel(config, trunk=trunk), path)
    return path


@pytest.fixture
def encoder_checkpoints(smoke_workspace, tmp_path):
    return {mode: _checkpoint(smoke_workspace, tmp_path, mode) for mode in ("geo_only", "il_only", "dual")}


# --- Trend rules ---

def test_trend_and_tolerance_rules():
    assert check_trend(19.03, 12.84).passed
    assert not check_trend(10.0, 9.5).passed
    assert not check_trend(5.0, 6.0).passed
    excess = check_trend(1.27, 1.00, 0.25)
    assert excess.passed
    assert excess.relative == pytest.approx(0.27)
    assert not check_trend(1.27, 1.00, 0.25, relative_to="higher").passed
    assert check_trend(19.03, 4.96, 0.30, relative_to="higher").passed
    assert not check_trend(10.0, 8.0, 0.30, relative_to="higher").passed
    with pytest.raises(ConfigurationError):
        check_trend(2.0, 1.0, relative_to="median")
    assert check_within(5.5, 5.0).passed
    assert not check_within(7.0, 5.0).passed
    assert check_within(4.0, 5.0).relative == pytest.approx(-0.2)


def test_kscale_checks_compare_neighbouring_k():
    curve = KScalingCurve(k_list=[8, 1, 4], mae=[4.77, 12.86, 5.91])
    checks = kscale_checks(curve, 0.10)
    assert [c.name for c in checks] == ["K=1 above K=4", "K=4 above K=8"]
    assert all(c.passed for c in checks)
    flat = kscale_checks(KScalingCurve(k_list=[1, 4], mae=[5.0, 5.0]), 0.10)
    assert not flat[0].passed


# --- K scaling ---

def test_k_scaling_writes_curve_artifacts(smoke_workspace, tmp_path, db_session):
    checkpoint = _checkpoint(smoke_workspace, tmp_path)
    out = str(tmp_path / "kscale")
    service = AblationService(smoke_workspace.config, db_session)
    curve = service.k_scaling(smoke_workspace.data_dir, checkpoint, [1, 2, 4], output_dir=out)
    assert curve.k_list == [1, 2, 4]
    assert len(curve.mae) == 3
    for name in ("kscale.csv", "kscale.json", "kscale.png"):
        assert os.path.getsize(os.path.join(out, name)) > 0
    with open(os.path.join(out, "kscale.csv"), newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert [int(r["k"]) for r in rows] == [1, 2, 4]
    with open(os.path.join(out, "kscale.json"), encoding="utf-8") as handle:
        assert json.load(handle)["mae_deg"] == curve.mae
    records = EvaluationRepository(db_session).get_evaluations_by_kind("kscale")
    assert sorted(r.k for r in records) == [1, 2, 4]


def test_k_scaling_is_deterministic_and_matches_full_inference(smoke_workspace, tmp_path):
    checkpoint = _checkpoint(smoke_workspace, tmp_path)
    service = AblationService(smoke_workspace.config)
    first = service.k_scaling(smoke_workspace.data_dir, checkpoint, [2, 4])
    second = service.k_scaling(smoke_workspace.data_dir, checkpoint, [2, 4])
    assert first.mae == second.mae

    model, _ = load_model(checkpoint)
    manifest = load_manifest(smoke_workspace.data_dir)
    entries = manifest.split("test") or manifest.entries
    direct = []
    for entry in entries:
        scene_set = manifest.load(entry)
        if not scene_set.mask.any():
            continue
        direct.append(mae(infer_full(scene_set, model).normals, scene_set.normals, scene_set.mask))
    assert first.mae[-1] == float(np.mean(direct))


def test_k_list_beyond_the_dataset_is_rejected(smoke_workspace, tmp_path):
    checkpoint = _checkpoint(smoke_workspace, tmp_path)
    with pytest.raises(ContractError, match="exceeds"):
        AblationService(smoke_workspace.config).k_scaling(smoke_workspace.data_dir, checkpoint, [1, 9])


def test_single_image_dataset_with_k_one(smoke_workspace, tmp_path):
    generation = smoke_workspace.config.generation.model_copy(update={"n_scenes": 2, "images_per_scene": 1})
    data_dir = str(tmp_path / "single")
    gen_dataset(generation, data_dir, workers=1)
    service = AblationService(smoke_workspace.config)
    curve = service.k_scaling(data_dir, _checkpoint(smoke_workspace, tmp_path), [1])
    assert len(curve.mae) == 1
    assert np.isfinite(curve.mae[0])


# --- Encoder and projection tables ---

def test_encoder_grid_covers_every_cell(smoke_workspace, encoder_checkpoints, tmp_path, db_session):
    service = AblationService(smoke_workspace.config, db_session)
    table = service.ablate_encoders(smoke_workspace.data_dir, encoder_checkpoints, [1, 4])
    assert set(table.rows) == {"geo_only", "il_only", "dual"}
    assert table.columns == ["K=1", "K=4"]
    assert all(np.isfinite(v) for row in table.rows.values() for v in row.values())
    assert [c.name for c in table.checks] == ["il_only above dual at K=1", "il_only improves from K=1 to K=4"]
    table.write(str(tmp_path / "out"))
    with open(tmp_path / "out" / "encoders.csv", newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["cell", "K=1", "K=4"]
    assert len(EvaluationRepository(db_session).get_evaluations_by_kind("encoders")) == 6


def test_encoder_grid_runs_on_the_single_scale_decoder(smoke_workspace, tmp_path):
    cells = {mode: _checkpoint(smoke_workspace, tmp_path, mode, "single_scale")
             for mode in ("geo_only", "il_only", "dual")}
    table = AblationService(smoke_workspace.config).ablate_encoders(smoke_workspace.data_dir, cells, [1, 2])
    assert table.meta == {"decoder_kind": "single_scale"}
    assert all(np.isfinite(v) for row in table.rows.values() for v in row.values())
    with open(table.write(str(tmp_path / "out")), encoding="utf-8") as handle:
        assert json.load(handle)["meta"]["decoder_kind"] == "single_scale"

    mixed = dict(cells, dual=_checkpoint(smoke_workspace, tmp_path, "dual"))
    with pytest.raises(ConfigurationError, match="share one decoder"):
        AblationService(smoke_workspace.config).ablate_encoders(smoke_workspace.data_dir, mixed, [1])


def test_encoder_grid_with_a_single_k(smoke_workspace, encoder_checkpoints):
    table = AblationService(smoke_workspace.config).ablate_encoders(smoke_workspace.data_dir,
                                                                    encoder_checkpoints, [1])
    assert table.columns == ["K=1"]
    assert len(table.checks) == 1


def test_missing_checkpoints_are_named(smoke_workspace, encoder_checkpoints, tmp_path):
    service = AblationService(smoke_workspace.config)
    partial = {cell: path for cell, path in encoder_checkpoints.items() if cell != "dual"}
    with pytest.raises(CheckpointError, match="dual"):
        service.ablate_encoders(smoke_workspace.data_dir, partial, [1])
    gone = dict(encoder_checkpoints, dual=str(tmp_path / "gone.ckpt"))
    with pytest.raises(CheckpointError, match="gone.ckpt"):
        service.ablate_encoders(smoke_workspace.data_dir, gone, [1])
    with pytest.raises(CheckpointError):
        service.k_scaling(smoke_workspace.data_dir, str(tmp_path / "gone.ckpt"), [1])


def test_projection_table_is_deterministic(smoke_workspace, tmp_path):
    checkpoint = _checkpoint(smoke_workspace, tmp_path)
    config = smoke_workspace.config
    config = config.model_copy(update={"ablation": config.ablation.model_copy(
        update={"focal_buckets_mm": [35.0], "eval_scenes": 2})})
    service = AblationService(config)
    eval_sets = service.build_focal_eval_sets(str(tmp_path / "buckets"))
    assert sorted(eval_sets) == ["35mm", "ortho"]
    for path in eval_sets.values():
        assert len(load_manifest(path).entries) == 2

    regimes = {regime: checkpoint for regime in ("ortho_only", "persp_only", "mixed")}
    first = service.ablate_projection(regimes, eval_sets)
    second = service.ablate_projection(regimes, eval_sets)
    assert first.rows == second.rows
    assert first.cell("mixed", "35mm") == first.cell("ortho_only", "35mm")
    assert len(first.checks) == 3


# --- Trend acceptance ---

@pytest.mark.slow
def test_more_images_lower_the_error_of_a_trained_model(smoke_workspace, tmp_path):
    config = smoke_workspace.train_config()
    result = TrainingService(config).train_full(str(tmp_path / "train"), manifest_path=smoke_workspace.data_dir,
                                                trunk=smoke_workspace.trunk)
    curve = AblationService(config).k_scaling(smoke_workspace.data_dir, result.checkpoint_path, [1, 4],
                                              output_dir=str(tmp_path / "kscale"))
    assert curve.mae[0] > curve.mae[1]


def _study_config(workspace, **ablation_updates):
    config = workspace.train_config()
    return config.model_copy(update={
        "train": config.train.model_copy(update={"manifest": workspace.data_dir}),
        "ablation": config.ablation.model_copy(update={"train_missing": True, **ablation_updates}),
    })


def _failed(checks):
    return [f"{c.name}: {c.relative:+.3f}" for c in checks if not c.passed]


@pytest.mark.slow
def test_trained_model_error_falls_from_one_to_four_to_eight_images(desk_training, tmp_path):
    workspace = desk_training.workspace
    curve = AblationService(workspace.train_config()).k_scaling(
        workspace.data_dir, desk_training.result.checkpoint_path, [1, 4, 8], output_dir=str(tmp_path / "kscale"))
    assert curve.mae[0] > curve.mae[1] > curve.mae[2]


@pytest.mark.slow
def test_encoder_study_under_a_shared_budget(desk_workspace, tmp_path):
    config = _study_config(desk_workspace, k_list=[1, 8])
    table = AblationService(config).run("encoders", str(tmp_path / "encoders"))
    assert table.meta == {"decoder_kind": "single_scale"}
    assert [c.name for c in table.checks] == ["il_only above dual at K=1", "il_only improves from K=1 to K=8"]
    assert not _failed(table.checks), table.rows
    for cell in ("geo_only", "il_only", "dual"):
        assert os.path.exists(tmp_path / "encoders" / f"train_{cell}" / "last.ckpt")


@pytest.mark.slow
def test_projection_study_under_a_shared_budget(desk_workspace, tmp_path):
    config = _study_config(desk_workspace)
    table = AblationService(config).run("projection", str(tmp_path / "projection"))
    assert table.columns == ["20mm", "35mm", "70mm", "200mm", "ortho"]
    short = [c for c in table.checks if c.name.startswith("ortho_only above persp_only")]
    assert len(short) == 2
    assert not _failed(table.checks), table.rows
