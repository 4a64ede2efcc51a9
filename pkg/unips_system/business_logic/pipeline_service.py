# unips_system/business_logic/pipeline_service.py

import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from sqlalchemy.orm import Session

from unips_system.business_logic.evaluation_service import EvaluationService, export_normal_png
from unips_system.business_logic.training_service import TrainingService
from unips_system.config.schemas import UnipsConfig, load_config, parse_config
from unips_system.core.exceptions import ContractError, PipelineStageError
from unips_system.network.inference import infer_full
from unips_system.network.model import load_model
from unips_system.simulator.dataset_generator import gen_dataset
from unips_system.simulator.scene_io import load_manifest, write_normal_map

logger = logging.getLogger(__name__)

SMOKE_CONFIG_PATH = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "config", "smoke.json")
STAGES = ("gen-data", "pretrain-geo", "train", "eval", "infer")


@dataclass
class StageResult:
    name: str
    passed: bool
    seconds: float
    detail: str = ""


@dataclass
class SmokeReport:
    seed: int
    output_dir: str
    stages: List[StageResult] = field(default_factory=list)
    final_loss: Optional[float] = None
    eval_mae: Optional[float] = None

    @property
    def passed(self) -> bool:
        return len(self.stages) == len(STAGES) and all(s.passed for s in self.stages)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "passed": self.passed, "final_loss": self.final_loss,
                "eval_mae_deg": self.eval_mae,
                "stages": [{"name": s.name, "passed": s.passed, "seconds": s.seconds, "detail": s.detail}
                           for s in self.stages]}


def smoke_config(seed: int) -> UnipsConfig:
    """The shipped miniature config with every seed replaced by ``seed``."""
    data = load_config(SMOKE_CONFIG_PATH).model_dump(mode="json")
    for section in ("generation", "model", "pretrain", "train"):
        data[section]["seed"] = seed
    return parse_config(data, source=SMOKE_CONFIG_PATH)


class PipelineService:
    def __init__(self, db_session: Optional[Session] = None):
        self.db_session = db_session

    @staticmethod
    def _stage(report: SmokeReport, name: str, action: Callable[[], str]):
        started = time.time()
        try:
            detail = action()
        except Exception as e:
            logger.error(f"Smoke stage {name} failed: {e}", exc_info=True)
            report.stages.append(StageResult(name=name, passed=False, seconds=time.time() - started, detail=str(e)))
            raise PipelineStageError(name, str(e)) from e
        report.stages.append(StageResult(name=name, passed=True, seconds=time.time() - started, detail=detail))
        logger.info(f"Smoke stage {name} passed in {time.time() - started:.1f}s: {detail}")

    def pipeline_smoke(self, seed: int = 0, output_dir: Optional[str] = None) -> SmokeReport:
        """
        Miniature end-to-end pass: generate data, pretrain the geometry trunk,
        train, evaluate and infer one test scene. Any stage failure raises
        PipelineStageError naming the stage.
        """
        config = smoke_config(seed)
        output_dir = output_dir or tempfile.mkdtemp(prefix="unips_smoke_")
        report = SmokeReport(seed=seed, output_dir=output_dir)
        data_dir = os.path.join(output_dir, "data")
        trunk_path = os.path.join(output_dir, "geo_trunk.ckpt")
        train_dir = os.path.join(output_dir, "train")
        training = TrainingService(config, self.db_session)
        state = {}

        def generate() -> str:
            manifest = gen_dataset(config.generation, data_dir, seed=seed, overwrite=True, workers=1)
            return f"{len(manifest.entries)} scenes"

        def pretrain() -> str:
            result = training.pretrain_geo(trunk_path, manifest_path=data_dir)
            if not all(np.isfinite(result.losses)):
                raise ContractError("non-finite pretraining loss")
            state["trunk"] = result.trunk
            return f"single-image MAE {result.val_mae_before:.2f} -> {result.val_mae_after:.2f} deg"

        def train() -> str:
            model_config = config.model.model_copy(update={"geo_trunk_path": trunk_path})
            result = training.train_full(train_dir, manifest_path=data_dir, model_config=model_config,
                                         trunk=state["trunk"])
            if result.log.final_loss is None or not np.isfinite(result.log.final_loss):
                raise ContractError(f"final loss is {result.log.final_loss}")
            report.final_loss = result.log.final_loss
            state["checkpoint"] = result.checkpoint_path
            return f"final loss {result.log.final_loss:.6f}"

        def evaluate() -> str:
            evaluation = EvaluationService(config, self.db_session).evaluate(
                state["checkpoint"], data_dir, output_dir=os.path.join(output_dir, "eval"))
            if not np.isfinite(evaluation.mean):
                raise ContractError(f"eval MAE is {evaluation.mean}")
            report.eval_mae = evaluation.mean
            return f"mean MAE {evaluation.mean:.2f} deg"

        def infer() -> str:
            manifest = load_manifest(data_dir)
            scene_set = manifest.load((manifest.split("test") or manifest.entries)[0])
            model, _ = load_model(state["checkpoint"])
            normals = infer_full(scene_set, model).normals
            norms = np.linalg.norm(normals, axis=-1)
            if not np.all(np.isfinite(normals)) or np.max(np.abs(norms - 1.0)) > 1e-4:
                raise ContractError("inferred normals are not finite unit vectors")
            infer_dir = os.path.join(output_dir, "infer")
            os.makedirs(infer_dir, exist_ok=True)
            export_normal_png(normals, os.path.join(infer_dir, "normals.png"))
            write_normal_map(normals, os.path.join(infer_dir, "normals.f32"))
            return f"{scene_set.height}x{scene_set.width} map"

        for name, action in zip(STAGES, (generate, pretrain, train, evaluate, infer)):
            self._stage(report, name, action)

        with open(os.path.join(output_dir, "smoke_report.json"), "w", encoding="utf-8") as handle:
            json.dump(report.to_dict(), handle, indent=2)
        logger.info(f"Smoke pipeline passed (seed {seed}, final loss {report.final_loss})")
        return report
