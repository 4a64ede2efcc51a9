# unips_system/tests/conftest.py

import os
from dataclasses import dataclass

import numpy as np
import pytest
from sqlalchemy import create_engine, event
from sqlalchemy.orm import Session

from unips_system.business_logic.pipeline_service import smoke_config
from unips_system.business_logic.evaluation_service import evaluate_entries
from unips_system.business_logic.training_service import TrainingService, TrainResult
from unips_system.config.schemas import GenerationConfig, ModelConfig, UnipsConfig, load_config
# Importing the models populates Base.metadata before tables are created.
from unips_system.data.models import Base, CheckpointRecord, EvaluationRecord, TrainingRun  # noqa: F401
from unips_system.network.geometry_encoder import GeometryTrunk
from unips_system.network.model import DualBranchModel
from unips_system.simulator.camera import ORTHOGRAPHIC, PERSPECTIVE, CameraSpec
from unips_system.simulator.dataset_generator import gen_dataset
from unips_system.simulator.scene import DIRECTIONAL, Light, Material, SceneObject, SceneSpec
from unips_system.simulator.scene_io import load_manifest

DESK_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "config", "desk.json")

WOODHAM_DIRECTIONS = [
    (0.3, 0.2, -1.0),
    (-0.4, 0.1, -1.0),
    (0.1, -0.5, -1.0),
    (-0.2, -0.3, -0.8),
]


# --- Slow marker ---

def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long training acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training or ablation run (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# --- Run registry ---

@pytest.fixture(scope="session")
def db_engine():
    # In-memory SQLite keeps every test session isolated from the on-disk registry.
    engine = create_engine("sqlite:///:memory:")

    # pysqlite does not emit BEGIN itself, which breaks SAVEPOINT-based rollback;
    # take over transaction control (SQLAlchemy's documented pysqlite recipe).
    @event.listens_for(engine, "connect")
    def _disable_pysqlite_begin(dbapi_connection, connection_record):
        dbapi_connection.isolation_level = None

    @event.listens_for(engine, "begin")
    def _emit_begin(conn):
        conn.exec_driver_sql("BEGIN")

    Base.metadata.create_all(engine)
    yield engine
    Base.metadata.drop_all(engine)
    engine.dispose()


@pytest.fixture(scope="function")
def db_session(db_engine):
    """
    Session joined to an outer transaction; service commits become savepoints
    and everything is rolled back after the test.
    """
    connection = db_engine.connect()
    transaction = connection.begin()
    session = Session(bind=connection, join_transaction_mode="create_savepoint")

    yield session

    session.close()
    transaction.rollback()
    connection.close()


# --- Configs ---

@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(patch_size=4, pos_grid=4, geo_dim=8, geo_layers=2, tap_layers_geo=[0, 1],
                       geo_feature_channels=16, il_dim=8, il_layers=2, tap_layers_il=[0, 1], heads=2,
                       branch_channels=4, decoder_low_dim=8, decoder_pool_dim=8, decoder_high_dim=8,
                       decoder_light_blocks=1, decoder_pixel_blocks=1, train_pixel_samples=32,
                       infer_pixel_samples=64)


@pytest.fixture
def tiny_generation_config() -> GenerationConfig:
    return GenerationConfig(n_scenes=4, images_per_scene=4, height=16, width=16, val_fraction=0.25,
                            test_fraction=0.25, objects_per_scene=(1, 2), seed=3)


# --- Scenes ---

def directional_rigs(directions=WOODHAM_DIRECTIONS, intensity=1.0):
    return [[Light(kind=DIRECTIONAL, intensity=np.full(3, intensity), direction=np.array(d, dtype=float))]
            for d in directions]


def sphere_scene(rigs, projection=ORTHOGRAPHIC, size=32, focal=50.0, radius=0.6, specular=0.0,
                 shadows=False, ground_plane=False, albedo=(0.7, 0.5, 0.3)) -> SceneSpec:
    camera = CameraSpec(projection=projection, height=size, width=size,
                        focal_length_mm=focal if projection == PERSPECTIVE else None)
    sphere = SceneObject(kind="sphere", center=np.zeros(3), scale=np.full(3, radius),
                         material=Material(albedo=np.array(albedo), specular=specular, shininess=30.0))
    return SceneSpec(objects=[sphere], rigs=rigs, camera=camera, ground_plane=ground_plane,
                     shadows=shadows, seed=11)


@pytest.fixture
def lambertian_sphere() -> SceneSpec:
    return sphere_scene(directional_rigs())


@dataclass
class Workspace:
    config: UnipsConfig
    data_dir: str
    trunk_path: str
    trunk: GeometryTrunk

    def train_config(self) -> UnipsConfig:
        """The workspace config with the pretrained trunk wired into the model section."""
        return self.config.model_copy(update={
            "model": self.config.model.model_copy(update={"geo_trunk_path": self.trunk_path})})


@pytest.fixture(scope="session")
def smoke_workspace(tmp_path_factory) -> Workspace:
    """Smoke-scale dataset and pretrained trunk shared by the pipeline-level tests."""
    root = str(tmp_path_factory.mktemp("smoke"))
    config = smoke_config(seed=0)
    data_dir = os.path.join(root, "data")
    gen_dataset(config.generation, data_dir, workers=1)
    trunk_path = os.path.join(root, "geo_trunk.ckpt")
    result = TrainingService(config).pretrain_geo(trunk_path, manifest_path=data_dir)
    return Workspace(config=config, data_dir=data_dir, trunk_path=trunk_path, trunk=result.trunk)


@pytest.fixture(scope="session")
def desk_workspace(tmp_path_factory) -> Workspace:
    """Desk-scale dataset (64x64, K=10) and pretrained trunk for the --runslow acceptance runs."""
    root = str(tmp_path_factory.mktemp("desk"))
    config = load_config(DESK_CONFIG)
    data_dir = os.path.join(root, "data")
    gen_dataset(config.generation, data_dir)
    trunk_path = os.path.join(root, "geo_trunk.ckpt")
    result = TrainingService(config).pretrain_geo(trunk_path, manifest_path=data_dir)
    return Workspace(config=config, data_dir=data_dir, trunk_path=trunk_path, trunk=result.trunk)


@dataclass
class DeskTraining:
    workspace: Workspace
    result: TrainResult
    untrained_test_mae: float


@pytest.fixture(scope="session")
def desk_training(desk_workspace, tmp_path_factory) -> DeskTraining:
    """One full desk training run of the dual model, with the untrained model's test-split MAE."""
    config = desk_workspace.train_config()
    manifest = load_manifest(desk_workspace.data_dir)
    untrained = DualBranchModel(config.model, trunk=desk_workspace.trunk)
    before = float(np.mean(list(evaluate_entries(untrained, manifest, manifest.split("test")).values())))
    result = TrainingService(config).train_full(str(tmp_path_factory.mktemp("desk_train")),
                                                manifest_path=desk_workspace.data_dir, trunk=desk_workspace.trunk)
    return DeskTraining(workspace=desk_workspace, result=result, untrained_test_mae=before)
