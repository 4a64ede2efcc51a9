# unips_system/tests/inference_test.py

import numpy as np
import pytest

from unips_system.core.exceptions import ContractError
from unips_system.network.geometry_encoder import GeometryTrunk
from unips_system.network.inference import chunk_coords, infer_full
from unips_system.network.model import DualBranchModel, load_model
from unips_system.simulator.renderer import render_scene
from unips_system.simulator.scene_io import load_manifest
from unips_system.tests.conftest import directional_rigs, sphere_scene


@pytest.fixture
def tiny_model(tiny_model_config):
    return DualBranchModel(tiny_model_config, trunk=GeometryTrunk(tiny_model_config, np.random.default_rng(0)))


@pytest.fixture
def sphere_set():
    return render_scene(sphere_scene(directional_rigs(), size=16))


def test_chunks_partition_every_pixel_once():
    chunks = chunk_coords(64, 64, 1024)
    assert len(chunks) == 4
    flat = np.concatenate([c.flat_indices(64) for c in chunks])
    np.testing.assert_array_equal(flat, np.arange(64 * 64))
    assert [len(c) for c in chunk_coords(5, 5, 10)] == [10, 10, 5]
    with pytest.raises(ContractError):
        chunk_coords(4, 4, 0)


def test_full_map_is_unit_length_with_expected_chunks(tiny_model, sphere_set):
    result = infer_full(sphere_set, tiny_model, chunk=100)
    assert result.normals.shape == (16, 16, 3)
    assert result.chunks == 3
    np.testing.assert_allclose(np.linalg.norm(result.normals, axis=-1), 1.0, atol=1e-5)
    np.testing.assert_allclose(np.linalg.norm(result.normals_low, axis=-1), 1.0, atol=1e-5)


def test_mask_is_applied_only_on_request(tiny_model, sphere_set):
    unmasked = infer_full(sphere_set, tiny_model)
    masked = infer_full(sphere_set, tiny_model, apply_mask=True)
    assert np.all(masked.normals[~sphere_set.mask] == 0.0)
    np.testing.assert_array_equal(masked.normals[sphere_set.mask], unmasked.normals[sphere_set.mask])
    np.testing.assert_allclose(np.linalg.norm(unmasked.normals[~sphere_set.mask], axis=-1), 1.0, atol=1e-5)


def test_image_order_does_not_change_the_map(tiny_model, sphere_set):
    reference = infer_full(sphere_set, tiny_model).normals
    rng = np.random.default_rng(4)
    for _ in range(5):
        order = rng.permutation(sphere_set.num_images)
        permuted = infer_full(sphere_set.permuted(order), tiny_model).normals
        assert np.max(np.abs(permuted - reference)) < 1e-5


def test_unaligned_resolution_fails_before_compute(tiny_model):
    scene_set = render_scene(sphere_scene(directional_rigs(), size=20))
    with pytest.raises(ContractError):
        infer_full(scene_set, tiny_model)


@pytest.mark.slow
def test_trained_model_is_order_invariant_on_many_scenes(smoke_workspace, tmp_path):
    from unips_system.business_logic.training_service import TrainingService

    config = smoke_workspace.train_config()
    result = TrainingService(config).train_full(str(tmp_path / "train"), manifest_path=smoke_workspace.data_dir,
                                                trunk=smoke_workspace.trunk)
    model, _ = load_model(result.checkpoint_path)
    manifest = load_manifest(smoke_workspace.data_dir)
    rng = np.random.default_rng(0)
    scenes = [manifest.load(e) for e in manifest.entries]
    for scene_set in scenes:
        reference = infer_full(scene_set, model).normals
        for _ in range(5):
            permuted = infer_full(scene_set.permuted(rng.permutation(scene_set.num_images)), model).normals
            assert np.max(np.abs(permuted - reference)) < 1e-5


@pytest.mark.slow
def test_chunk_size_changes_the_map_only_slightly(smoke_workspace, tmp_path):
    from unips_system.business_logic.evaluation_service import mae
    from unips_system.business_logic.training_service import TrainingService

    config = smoke_workspace.train_config()
    result = TrainingService(config).train_full(str(tmp_path / "train"), manifest_path=smoke_workspace.data_dir,
                                                trunk=smoke_workspace.trunk)
    manifest = load_manifest(smoke_workspace.data_dir)
    scene_set = manifest.load(manifest.entries[0])
    small = infer_full(scene_set, result.model, chunk=64).normals
    large = infer_full(scene_set, result.model, chunk=256).normals
    assert mae(small, large, scene_set.mask) < 2.0
