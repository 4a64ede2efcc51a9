# unips_system/business_logic/training_service.py

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sqlalchemy.orm import Session

from unips_system.business_logic.evaluation_service import mae, scene_mae
from unips_system.config.schemas import ModelConfig, UnipsConfig
from unips_system.core.exceptions import ConfigurationError, ContractError, TrainingDivergedError
from unips_system.core.optim import AdamW, StepDecaySchedule
from unips_system.core.tensor import Tensor, backward, no_grad
from unips_system.data.models import CheckpointRecord, TrainingRun
from unips_system.data.repositories import CheckpointRepository, TrainingRunRepository
from unips_system.network.geometry_encoder import GeometryTrunk, PatchNormalHead, save_trunk
from unips_system.network.model import DualBranchModel, SampleCoords, load_model, save_model
from unips_system.simulator.renderer import MultiIllumSet
from unips_system.simulator.scene_io import DatasetManifest, ManifestEntry, load_manifest

logger = logging.getLogger(__name__)

OPTIMIZER_FILE = "optimizer.npz"
NAN_DUMP_FILE = "nan_batch.json"


# --- Loss and sampling ---

def _check_unit(gt: np.ndarray, tolerance: float = 1e-3):
    norms = np.linalg.norm(gt, axis=-1)
    if np.any(np.abs(norms - 1.0) > tolerance):
        raise ContractError(f"Ground-truth normals must be unit length (norm range "
                            f"{norms.min():.4f}..{norms.max():.4f}); the dataset is corrupt")


def scale_losses(pred_low: Tensor, pred_high: Tensor, gt: np.ndarray) -> Tuple[Tensor, Tensor]:
    """Mean over samples of the squared normal difference, separately per scale."""
    if pred_low.shape != pred_high.shape or pred_low.shape != gt.shape:
        raise ContractError(f"Prediction shapes {pred_low.shape}, {pred_high.shape} and target {gt.shape} differ")
    _check_unit(gt)
    target = Tensor(gt)
    diff_low = pred_low - target
    diff_high = pred_high - target
    return (diff_low * diff_low).sum(axis=-1).mean(), (diff_high * diff_high).sum(axis=-1).mean()


def two_scale_loss(pred_low: Tensor, pred_high: Tensor, gt: np.ndarray) -> Tensor:
    loss_low, loss_high = scale_losses(pred_low, pred_high, gt)
    return loss_low + loss_high


def sample_pixels(mask: np.ndarray, count: int, rng: np.random.Generator) -> SampleCoords:
    """Distinct in-mask coordinates drawn uniformly without replacement."""
    mask = np.asarray(mask, dtype=bool)
    candidates = np.flatnonzero(mask)
    if candidates.size == 0:
        raise ContractError("Cannot sample pixels from an empty mask")
    if candidates.size < count:
        logger.warning(f"Only {candidates.size} in-mask pixels available, {count} requested; sampling all")
        chosen = candidates
    else:
        chosen = rng.choice(candidates, size=count, replace=False)
    return SampleCoords.from_flat(chosen, mask.shape[1])


# --- Logs ---

@dataclass
class TrainLog:
    records: List[dict] = field(default_factory=list)
    epochs: List[dict] = field(default_factory=list)
    started: float = field(default_factory=time.time)

    def append(self, iteration: int, loss_low: float, loss_high: float, lr: float, grad_norm: float):
        if self.records and iteration <= self.records[-1]["iteration"]:
            raise ContractError(f"Iteration {iteration} does not follow {self.records[-1]['iteration']}")
        values = (loss_low, loss_high, lr, grad_norm)
        if not all(math.isfinite(v) for v in values):
            raise TrainingDivergedError(f"Non-finite log entry at iteration {iteration}: {values}")
        self.records.append({"iteration": iteration, "loss_low": loss_low, "loss_high": loss_high,
                             "lr": lr, "grad_norm": grad_norm})

    def end_epoch(self, epoch: int, val_mae: Optional[float]):
        self.epochs.append({"epoch": epoch, "val_mae": val_mae, "wall_clock_s": time.time() - self.started})

    def losses(self) -> List[float]:
        return [r["loss_low"] + r["loss_high"] for r in self.records]

    @property
    def final_loss(self) -> Optional[float]:
        losses = self.losses()
        return losses[-1] if losses else None

    def write_csv(self, path: str):
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=["iteration", "loss_low", "loss_high", "lr", "grad_norm"])
            writer.writeheader()
            writer.writerows(self.records)

    def write_summary(self, path: str, extra: Optional[dict] = None):
        summary = {
            "iterations": len(self.records),
            "final_loss": self.final_loss,
            "epochs": self.epochs,
            "wall_clock_s": time.time() - self.started,
        }
        summary.update(extra or {})
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(summary, handle, indent=2, sort_keys=True)


@dataclass
class TrainResult:
    model: DualBranchModel
    log: TrainLog
    checkpoint_path: str
    best_path: Optional[str]
    best_val_mae: Optional[float]


@dataclass
class PretrainResult:
    trunk: GeometryTrunk
    trunk_path: str
    losses: List[float]
    val_mae_before: float
    val_mae_after: float


class TrainingService:
    def __init__(self, config: UnipsConfig, db_session: Optional[Session] = None):
        self.config = config
        self.db_session = db_session
        self.run_repo = TrainingRunRepository(db_session) if db_session is not None else None
        self.checkpoint_repo = CheckpointRepository(db_session) if db_session is not None else None
        self._cache: Dict[str, MultiIllumSet] = {}

    # --- Helpers ---

    def _load(self, manifest: DatasetManifest, entry: ManifestEntry) -> MultiIllumSet:
        key = manifest.scene_path(entry)
        if key not in self._cache:
            self._cache[key] = manifest.load(entry)
        return self._cache[key]

    def _manifest(self, path: Optional[str]) -> DatasetManifest:
        path = path or self.config.train.manifest
        if not path:
            raise ConfigurationError("No dataset manifest given (--data or train.manifest)")
        return load_manifest(path)

    def _validation_entries(self, manifest: DatasetManifest, count: int) -> List[ManifestEntry]:
        entries = manifest.split("val") or manifest.split("test")
        if not entries:
            logger.warning("Dataset has no val or test split; validating on training scenes")
            entries = manifest.split("train")
        return entries[:count]

    def _start_run(self, kind: str, run_dir: str, seed: int) -> Optional[TrainingRun]:
        if self.run_repo is None:
            return None
        run = TrainingRun(kind=kind, run_dir=run_dir, seed=seed,
                          config_json=json.dumps(self.config.model_dump(mode="json"), sort_keys=True))
        self.run_repo.add_run(run)
        self.db_session.commit()
        self.db_session.refresh(run)
        return run

    def _finish_run(self, run: Optional[TrainingRun], status: str, iterations: int, best: Optional[float]):
        if run is None:
            return
        self.run_repo.finish_run(run, status, iterations, best)
        self.db_session.commit()

    def _record_checkpoint(self, run: Optional[TrainingRun], path: str, epoch: int, iteration: int,
                           val_mae: Optional[float], is_best: bool):
        if run is None:
            return
        record = CheckpointRecord(run_id=run.id, path=path, epoch=epoch, iteration=iteration, val_mae=val_mae)
        self.checkpoint_repo.add_checkpoint(record)
        self.db_session.flush()
        if is_best:
            self.checkpoint_repo.mark_best(record)
        self.db_session.commit()

    def validation_mae(self, model: DualBranchModel, scenes: Sequence[MultiIllumSet], k: int) -> Optional[float]:
        values = [scene_mae(model, s, min(k, s.num_images))[0] for s in scenes if s.mask.any()]
        return float(np.mean(values)) if values else None

    @staticmethod
    def _save_optimizer(optimizer: AdamW, path: str, epoch: int, iteration: int):
        arrays = optimizer.state.to_arrays()
        arrays["__epoch__"] = np.array(epoch, dtype=np.int64)
        arrays["__iteration__"] = np.array(iteration, dtype=np.int64)
        tmp_path = f"{path}.tmp.npz"
        np.savez(tmp_path, **{name.replace("::", "__sep__"): value for name, value in arrays.items()})
        os.replace(tmp_path, path)

    @staticmethod
    def _load_optimizer(optimizer: AdamW, path: str) -> int:
        with np.load(path) as data:
            arrays = {name.replace("__sep__", "::"): data[name] for name in data.files}
        optimizer.state.load_arrays(arrays)
        return int(arrays["__iteration__"])

    # --- Full model ---

    def train_full(self, output_dir: str, manifest_path: Optional[str] = None,
                   model_config: Optional[ModelConfig] = None, trunk: Optional[GeometryTrunk] = None,
                   resume: Optional[str] = None) -> TrainResult:
        """
        Each iteration draws ``batch_scenes`` training scenes, a random subset of
        K images per scene and P in-mask pixels, then takes one AdamW step on the
        averaged two-scale loss. Validation MAE is computed before training and
        after every epoch.
        """
        settings = self.config.train
        model_config = model_config or self.config.model
        manifest = self._manifest(manifest_path)
        k_lo, k_hi = settings.k_range
        if k_hi > manifest.images_per_scene:
            raise ConfigurationError(f"train.k_range {settings.k_range} exceeds the dataset's "
                                     f"{manifest.images_per_scene} images per scene")
        samples = settings.pixel_samples or model_config.train_pixel_samples
        if samples > manifest.height * manifest.width:
            raise ConfigurationError(f"{samples} pixel samples exceed the {manifest.height}x{manifest.width} image")
        train_entries = manifest.split("train")
        if not train_entries:
            raise ConfigurationError(f"Dataset {manifest.root} has no training scenes")

        os.makedirs(output_dir, exist_ok=True)
        iters_per_epoch = settings.iterations_per_epoch or max(1, math.ceil(len(train_entries) / settings.batch_scenes))
        total = settings.epochs * iters_per_epoch
        if settings.max_iterations:
            total = min(total, settings.max_iterations)

        start = 0
        if resume:
            model, _ = load_model(resume, model_config)
        else:
            model = DualBranchModel(model_config, trunk=trunk)
        schedule = StepDecaySchedule(settings.lr, iters_per_epoch, settings.decay_factor, settings.decay_interval,
                                     settings.warmup_epochs)
        optimizer = AdamW(model.trainable_parameters(), schedule, settings.weight_decay, settings.grad_clip)
        if resume:
            optimizer_path = os.path.join(os.path.dirname(os.path.abspath(resume)), OPTIMIZER_FILE)
            if os.path.exists(optimizer_path):
                start = self._load_optimizer(optimizer, optimizer_path)
                logger.info(f"Resuming from {resume} at iteration {start}")
            else:
                logger.warning(f"No {OPTIMIZER_FILE} next to {resume}; optimizer moments start from zero")

        rng = np.random.default_rng([settings.seed, start])
        val_scenes = [self._load(manifest, e) for e in self._validation_entries(manifest, settings.val_scenes)]
        log = TrainLog()
        run = self._start_run("train", output_dir, settings.seed)
        best_val = None
        best_path = None
        if start == 0:
            initial = self.validation_mae(model, val_scenes, settings.eval_k)
            log.end_epoch(0, initial)
            logger.info(f"Epoch 0: val MAE {initial if initial is None else round(initial, 3)} deg (untrained)")

        checkpoint_path = os.path.join(output_dir, "last.ckpt")
        for iteration in range(start, total):
            batch = rng.choice(len(train_entries), size=min(settings.batch_scenes, len(train_entries)), replace=False)
            loss_low, loss_high, used = None, None, []
            for index in batch:
                entry = train_entries[int(index)]
                scene_set = self._load(manifest, entry)
                if not scene_set.mask.any():
                    logger.warning(f"Skipping {entry.directory}: no surface pixels in mask")
                    continue
                k = int(rng.integers(k_lo, k_hi + 1))
                subset = scene_set.permuted(rng.permutation(scene_set.num_images)[:k])
                coords = sample_pixels(scene_set.mask, samples, rng)
                low, high = model(subset.images, coords, subset.geo_features)
                part_low, part_high = scale_losses(low, high, scene_set.normals[coords.rows, coords.cols])
                loss_low = part_low if loss_low is None else loss_low + part_low
                loss_high = part_high if loss_high is None else loss_high + part_high
                used.append({"scene": entry.directory, "k": k})
            if not used:
                continue
            loss_low = loss_low / len(used)
            loss_high = loss_high / len(used)
            loss = loss_low + loss_high

            if not math.isfinite(loss.item()):
                dump_path = os.path.join(output_dir, NAN_DUMP_FILE)
                with open(dump_path, "w", encoding="utf-8") as handle:
                    json.dump({"iteration": iteration, "seed": settings.seed, "batch": used}, handle, indent=2)
                logger.error(f"Loss is {loss.item()} at iteration {iteration}; batch {used} dumped to {dump_path}")
                self._finish_run(run, "diverged", iteration, best_val)
                raise TrainingDivergedError(f"Non-finite loss at iteration {iteration}; see {dump_path}")

            optimizer.zero_grad()
            backward(loss)
            lr, grad_norm = optimizer.step()
            log.append(iteration + 1, loss_low.item(), loss_high.item(), lr, grad_norm)

            epoch = iteration // iters_per_epoch + 1
            if (iteration + 1) % iters_per_epoch and iteration + 1 != total:
                continue
            val_mae = self.validation_mae(model, val_scenes, settings.eval_k)
            log.end_epoch(epoch, val_mae)
            recent = log.losses()[-iters_per_epoch:]
            logger.info(f"Epoch {epoch}: iterations {iteration + 1}/{total}, mean loss {np.mean(recent):.4f}, "
                        f"lr {lr:.2e}, val MAE {val_mae if val_mae is None else round(val_mae, 3)} deg")
            if epoch % settings.checkpoint_every and iteration + 1 != total:
                continue
            extra = {"epoch": epoch, "iteration": iteration + 1, "val_mae": val_mae}
            path = os.path.join(output_dir, f"epoch_{epoch:03d}.ckpt")
            save_model(model, path, extra)
            self._save_optimizer(optimizer, os.path.join(output_dir, OPTIMIZER_FILE), epoch, iteration + 1)
            is_best = val_mae is not None and (best_val is None or val_mae < best_val)
            if is_best:
                best_val = val_mae
                best_path = os.path.join(output_dir, "best.ckpt")
                save_model(model, best_path, extra)
            self._record_checkpoint(run, path, epoch, iteration + 1, val_mae, is_best)

        save_model(model, checkpoint_path, {"iteration": total})
        log.write_csv(os.path.join(output_dir, "train_log.csv"))
        log.write_summary(os.path.join(output_dir, "train_summary.json"),
                          {"best_val_mae": best_val, "checkpoint": checkpoint_path, "seed": settings.seed})
        self._finish_run(run, "completed", total, best_val)
        logger.info(f"Training finished after {total} iterations; best val MAE {best_val}")
        return TrainResult(model=model, log=log, checkpoint_path=checkpoint_path, best_path=best_path,
                           best_val_mae=best_val)

    # --- Geometry proxy ---

    @staticmethod
    def _masked_normal_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray) -> Tensor:
        weight = mask.astype(np.float32)
        diff = pred - Tensor(gt)
        return ((diff * diff).sum(axis=-1) * Tensor(weight)).sum() / max(float(weight.sum()), 1.0)

    @staticmethod
    def single_image_mae(trunk: GeometryTrunk, head: PatchNormalHead, scenes: Sequence[MultiIllumSet]) -> float:
        values = []
        with no_grad():
            for scene_set in scenes:
                if not scene_set.mask.any():
                    continue
                pred = head(trunk(scene_set.images[:1])[-1]).numpy()[0]
                values.append(mae(pred, scene_set.normals, scene_set.mask))
        return float(np.mean(values)) if values else float("nan")

    def pretrain_geo(self, output_path: str, manifest_path: Optional[str] = None,
                     model_config: Optional[ModelConfig] = None) -> PretrainResult:
        """
        Monocular normal regression with a temporary head. The trunk weights are
        saved frozen and the head is discarded.
        """
        settings = self.config.pretrain
        model_config = model_config or self.config.model
        manifest = self._manifest(manifest_path)
        train_entries = [e for e in manifest.split("train")]
        if not train_entries:
            raise ConfigurationError(f"Dataset {manifest.root} has no training scenes")

        rng = np.random.default_rng(settings.seed)
        trunk = GeometryTrunk(model_config, np.random.default_rng(settings.seed))
        head = PatchNormalHead(model_config, np.random.default_rng(settings.seed + 1))
        params = [(f"trunk.{n}", p) for n, p in trunk.trainable_parameters()] + \
                 [(f"head.{n}", p) for n, p in head.trainable_parameters()]
        schedule = StepDecaySchedule(settings.lr, max(1, settings.iterations // 10), decay_factor=1.0,
                                     decay_interval=1, warmup_epochs=1)
        optimizer = AdamW(params, schedule, settings.weight_decay, settings.grad_clip)
        val_scenes = [self._load(manifest, e) for e in self._validation_entries(manifest, settings.val_scenes)]
        run = self._start_run("pretrain", os.path.dirname(os.path.abspath(output_path)), settings.seed)

        before = self.single_image_mae(trunk, head, val_scenes)
        losses = []
        for iteration in range(settings.iterations):
            picks = rng.choice(len(train_entries), size=settings.batch_images,
                               replace=len(train_entries) < settings.batch_images)
            scenes = [self._load(manifest, train_entries[int(i)]) for i in picks]
            images = np.stack([s.images[int(rng.integers(s.num_images))] for s in scenes])
            gt = np.stack([s.normals for s in scenes])
            mask = np.stack([s.mask for s in scenes])
            loss = self._masked_normal_loss(head(trunk(images)[-1]), gt, mask)
            if not math.isfinite(loss.item()):
                self._finish_run(run, "diverged", iteration, None)
                raise TrainingDivergedError(f"Non-finite pretraining loss at iteration {iteration} "
                                            f"(scenes {[train_entries[int(i)].directory for i in picks]})")
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()
            losses.append(loss.item())
            if (iteration + 1) % max(1, settings.iterations // 5) == 0:
                logger.info(f"Pretrain iteration {iteration + 1}/{settings.iterations}: loss {loss.item():.4f}")

        after = self.single_image_mae(trunk, head, val_scenes)
        trunk.freeze()
        save_trunk(trunk, output_path, model_config,
                   {"iterations": settings.iterations, "seed": settings.seed,
                    "val_mae_before": before, "val_mae_after": after})
        self._finish_run(run, "completed", settings.iterations, after)
        logger.info(f"Geometry trunk pretrained: single-image val MAE {before:.2f} -> {after:.2f} deg, "
                    f"saved to {output_path}")
        return PretrainResult(trunk=trunk, trunk_path=output_path, losses=losses,
                              val_mae_before=before, val_mae_after=after)
