# unips_system/business_logic/evaluation_service.py

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from sqlalchemy.orm import Session

from unips_system.config.schemas import ModelConfig, UnipsConfig
from unips_system.core.exceptions import ConfigurationError, ContractError, DatasetWriteError, SceneLoadError
from unips_system.data.models import EvaluationRecord
from unips_system.data.repositories import EvaluationRepository
from unips_system.network.inference import infer_full
from unips_system.network.model import DualBranchModel, load_model, model_config_hash
from unips_system.simulator.renderer import MultiIllumSet
from unips_system.simulator.scene import DIRECTIONAL
from unips_system.simulator.scene_io import DatasetManifest, ManifestEntry, load_manifest

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-3


# --- Metrics ---

def angular_error_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel angle in degrees between two normal maps."""
    cosine = np.clip(np.sum(pred.astype(np.float64) * gt.astype(np.float64), axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cosine))


def mae(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Mean angular error in degrees over ``mask`` (all pixels when omitted)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ContractError(f"Normal maps must share an (..., 3) shape, got {pred.shape} and {gt.shape}")
    mask = np.ones(gt.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != gt.shape[:-1]:
        raise ContractError(f"Mask {mask.shape} does not match normal maps {gt.shape[:-1]}")
    if not mask.any():
        raise ContractError("Cannot compute MAE over an empty mask")
    norms = np.linalg.norm(gt[mask], axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        raise ContractError(f"Ground-truth normals are not unit length inside the mask "
                            f"(norm range {norms.min():.4f}..{norms.max():.4f})")
    return float(angular_error_map(pred[mask], gt[mask]).mean())


# --- Calibrated Lambertian baseline ---

@dataclass
class WoodhamResult:
    normals: np.ndarray
    albedo: np.ndarray
    valid: np.ndarray


def _directional_lights(scene_set: MultiIllumSet) -> Tuple[np.ndarray, np.ndarray]:
    if not scene_set.lights:
        raise ContractError("Calibrated baseline needs light records for every image")
    directions, intensities = [], []
    for k, rig in enumerate(scene_set.lights):
        if len(rig) != 1 or rig[0].kind != DIRECTIONAL:
            raise ContractError(f"Image {k} is not lit by exactly one directional light "
                                f"({[light.kind for light in rig]})")
        directions.append(rig[0].direction)
        intensities.append(rig[0].intensity)
    return np.array(directions, dtype=np.float64), np.array(intensities, dtype=np.float64)


def woodham_baseline(scene_set: MultiIllumSet, threshold: float = 1e-8) -> WoodhamResult:
    """
    Per-pixel least squares ``L (rho n) = i`` over the images where the pixel
    is lit. Pixels with fewer than three lit images, a rank-deficient light
    matrix or zero albedo are returned invalid with zero normals.
    """
    directions, intensities = _directional_lights(scene_set)
    k, height, width = scene_set.num_images, scene_set.height, scene_set.width
    if k < 3:
        raise ContractError(f"Calibrated baseline needs at least 3 lights, got {k}")

    safe = np.where(intensities > 0, intensities, np.inf)
    observed = (scene_set.images.astype(np.float64) / safe[:, None, None, :]).mean(axis=-1)
    observed = observed.reshape(k, -1).T
    active = observed > threshold

    solution = np.zeros((height * width, 3))
    valid = np.zeros(height * width, dtype=bool)
    patterns, groups = np.unique(active, axis=0, return_inverse=True)
    groups = groups.reshape(-1)
    for g, pattern in enumerate(patterns):
        if pattern.sum() < 3:
            continue
        lights = directions[pattern]
        if np.linalg.matrix_rank(lights, tol=1e-6) < 3:
            logger.debug(f"Rank-deficient light subset {np.flatnonzero(pattern).tolist()}")
            continue
        members = np.flatnonzero(groups == g)
        scaled, *_ = np.linalg.lstsq(lights, observed[members][:, pattern].T, rcond=None)
        solution[members] = scaled.T
        valid[members] = True

    albedo = np.linalg.norm(solution, axis=-1)
    valid &= albedo > threshold
    normals = np.zeros_like(solution)
    normals[valid] = solution[valid] / albedo[valid, None]
    return WoodhamResult(normals=normals.reshape(height, width, 3).astype(np.float32),
                         albedo=albedo.reshape(height, width).astype(np.float32),
                         valid=valid.reshape(height, width))


# --- Normal-map images ---

def export_normal_png(normals: np.ndarray, path: str):
    """8-bit RGB with each component mapped linearly from [-1, 1] to [0, 255] (x→R, y→G, z→B)."""
    encoded = np.round((np.clip(normals, -1.0, 1.0) + 1.0) * 0.5 * 255.0).astype(np.uint8)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as e:
        raise DatasetWriteError(f"Cannot create {directory}: {e}") from e
    if not cv2.imwrite(path, cv2.cvtColor(encoded, cv2.COLOR_RGB2BGR)):
        raise DatasetWriteError(f"Failed to write normal map image {path}")


def decode_normal_png(path: str) -> np.ndarray:
    raw = cv2.imread(path, cv2.IMREAD_COLOR)
    if raw is None:
        raise SceneLoadError(f"Missing or unreadable normal map image {path}")
    rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).astype(np.float32)
    return rgb / 255.0 * 2.0 - 1.0


# --- Scene-level evaluation ---

def scene_mae(model: DualBranchModel, scene_set: MultiIllumSet, k: Optional[int] = None,
              order: Optional[Sequence[int]] = None) -> Tuple[float, np.ndarray]:
    """MAE of ``model`` on the first ``k`` images (or the images in ``order``) of one scene."""
    subset = scene_set.permuted(order) if order is not None else scene_set.first_k(k or scene_set.num_images)
    result = infer_full(subset, model)
    return mae(result.normals, scene_set.normals, scene_set.mask), result.normals


def evaluate_entries(model: DualBranchModel, manifest: DatasetManifest, entries: Sequence[ManifestEntry],
                     k: Optional[int] = None) -> Dict[str, float]:
    """Per-scene MAE over ``entries``; scenes without surface pixels are skipped."""
    scores = {}
    for entry in entries:
        scene_set = manifest.load(entry)
        if not scene_set.mask.any():
            logger.warning(f"Skipping {entry.directory}: no surface pixels in mask")
            continue
        scores[entry.directory], _ = scene_mae(model, scene_set, k)
    return scores


@dataclass
class EvalReport:
    checkpoint: str
    dataset: str
    split: str
    k: Optional[int]
    fingerprint: str
    per_scene: Dict[str, float] = field(default_factory=dict)
    subset_mean: Dict[str, float] = field(default_factory=dict)
    subset_std: Dict[str, float] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_scene.values()))) if self.per_scene else float("nan")

    @property
    def median(self) -> float:
        return float(np.median(list(self.per_scene.values()))) if self.per_scene else float("nan")

    def to_dict(self) -> dict:
        return {
            "checkpoint": self.checkpoint,
            "dataset": self.dataset,
            "split": self.split,
            "k": self.k,
            "config_hash": self.fingerprint,
            "masked_to_surface_pixels": True,
            "mean_mae_deg": self.mean,
            "median_mae_deg": self.median,
            "per_scene_mae_deg": self.per_scene,
            "subset_trials": {name: {"mean": self.subset_mean[name], "std": self.subset_std[name]}
                              for name in self.subset_mean},
        }

    def write(self, output_dir: str) -> Tuple[str, str]:
        os.makedirs(output_dir, exist_ok=True)
        csv_path = os.path.join(output_dir, "eval_report.csv")
        with open(csv_path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["scene", "mae_deg"])
            for name, value in self.per_scene.items():
                writer.writerow([name, f"{value:.6f}"])
            writer.writerow(["mean", f"{self.mean:.6f}"])
            writer.writerow(["median", f"{self.median:.6f}"])
        json_path = os.path.join(output_dir, "eval_report.json")
        with open(json_path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
        return csv_path, json_path


class EvaluationService:
    def __init__(self, config: UnipsConfig, db_session: Optional[Session] = None):
        self.config = config
        self.db_session = db_session
        self.evaluation_repo = EvaluationRepository(db_session) if db_session is not None else None

    def record(self, checkpoint: str, dataset: str, value: float, kind: str = "eval",
               cell: Optional[str] = None, k: Optional[int] = None):
        if self.evaluation_repo is None:
            return
        self.evaluation_repo.add_evaluation(EvaluationRecord(checkpoint_path=checkpoint, dataset=dataset,
                                                             kind=kind, cell=cell, k=k, mae=value))
        self.db_session.commit()

    def evaluate(self, checkpoint: str, manifest_path: Optional[str] = None, k: Optional[int] = None,
                 output_dir: Optional[str] = None, model_config: Optional[ModelConfig] = None,
                 force: bool = False) -> EvalReport:
        settings = self.config.eval
        manifest_path = manifest_path or settings.manifest or self.config.train.manifest
        if not manifest_path:
            raise ConfigurationError("No dataset manifest given for evaluation (--data or eval.manifest)")
        k = k or settings.k
        model, meta = load_model(checkpoint, model_config, force=force)
        manifest = load_manifest(manifest_path)
        entries = manifest.split(settings.split)[:settings.max_scenes]
        if not entries:
            raise ContractError(f"Split '{settings.split}' of {manifest_path} holds no scenes")

        report = EvalReport(checkpoint=checkpoint, dataset=manifest_path, split=settings.split, k=k,
                            fingerprint=meta.get("config_hash") or model_config_hash(model.config))
        rng = np.random.default_rng(self.config.train.seed)
        for entry in entries:
            scene_set = manifest.load(entry)
            if not scene_set.mask.any():
                logger.warning(f"Skipping {entry.directory}: no surface pixels in mask")
                continue
            value, normals = scene_mae(model, scene_set, k)
            report.per_scene[entry.directory] = value
            if output_dir and settings.write_png:
                shown = np.where(scene_set.mask[..., None], normals, 0.0) if settings.apply_mask else normals
                export_normal_png(shown, os.path.join(output_dir, "normals", f"{entry.directory}.png"))
            if settings.subset_trials:
                count = k or scene_set.num_images
                trials = [scene_mae(model, scene_set, order=rng.permutation(scene_set.num_images)[:count])[0]
                          for _ in range(settings.subset_trials)]
                report.subset_mean[entry.directory] = float(np.mean(trials))
                report.subset_std[entry.directory] = float(np.std(trials))
            logger.debug(f"{entry.directory}: MAE {value:.3f} deg")

        if not report.per_scene:
            raise ContractError(f"No evaluable scenes in split '{settings.split}' of {manifest_path}")
        logger.info(f"Evaluated {checkpoint} on {len(report.per_scene)} scene(s) of {manifest_path} "
                    f"(K={k or 'all'}): mean MAE {report.mean:.3f} deg, median {report.median:.3f} deg")
        if output_dir:
            report.write(output_dir)
        self.record(checkpoint, manifest_path, report.mean, k=k)
        return report
