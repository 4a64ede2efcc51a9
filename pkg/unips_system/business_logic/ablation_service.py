# unips_system/business_logic/ablation_service.py

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from matplotlib.figure import Figure
from sqlalchemy.orm import Session

from unips_system.business_logic.evaluation_service import EvaluationService, evaluate_entries, scene_mae
from unips_system.business_logic.training_service import TrainingService
from unips_system.config.schemas import UnipsConfig
from unips_system.core.exceptions import CheckpointError, ConfigurationError, ContractError
from unips_system.network.model import DualBranchModel, load_model
from unips_system.simulator.camera import ORTHOGRAPHIC, PERSPECTIVE
from unips_system.simulator.dataset_generator import gen_dataset
from unips_system.simulator.scene_io import DatasetManifest, ManifestEntry, load_manifest

logger = logging.getLogger(__name__)

ENCODER_CELLS = ("geo_only", "il_only", "dual")
PROJECTION_REGIMES = ("ortho_only", "persp_only", "mixed")
ORTHO_BUCKET = "ortho"
SHORT_FOCAL_MM = 35.0


def bucket_name(focal_mm: Optional[float]) -> str:
    return ORTHO_BUCKET if focal_mm is None else f"{focal_mm:g}mm"


def k_column(k: int) -> str:
    return f"K={k}"


# --- Trend rules ---

@dataclass
class TrendCheck:
    name: str
    passed: bool
    observed: float
    reference: float
    relative: float

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "observed": self.observed,
                "reference": self.reference, "relative": self.relative}


def check_trend(higher: float, lower: float, min_relative_gap: float = 0.10, name: str = "",
                relative_to: str = "lower") -> TrendCheck:
    """
    Passes when ``higher`` exceeds ``lower`` by at least ``min_relative_gap``.

    The gap is a fraction of ``lower`` ("A exceeds B by X%") unless ``relative_to``
    is ``"higher"`` ("B is X% below A").
    """
    if relative_to not in ("lower", "higher"):
        raise ConfigurationError(f"Trend gap must be relative to 'lower' or 'higher', got '{relative_to}'")
    base = lower if relative_to == "lower" else higher
    gap = (higher - lower) / base if base > 0 else 0.0
    return TrendCheck(name=name, passed=bool(gap >= min_relative_gap), observed=higher, reference=lower,
                      relative=float(gap))


def check_within(value: float, reference: float, tolerance: float = 0.20, name: str = "") -> TrendCheck:
    """Passes when ``value`` is no more than ``tolerance`` (relative) above ``reference``."""
    excess = (value - reference) / reference if reference > 0 else 0.0
    return TrendCheck(name=name, passed=bool(excess <= tolerance), observed=value, reference=reference,
                      relative=float(excess))


@dataclass
class AblationTable:
    kind: str
    columns: List[str]
    rows: Dict[str, Dict[str, float]] = field(default_factory=dict)
    checks: List[TrendCheck] = field(default_factory=list)
    meta: Dict[str, str] = field(default_factory=dict)

    def cell(self, row: str, column: str) -> float:
        return self.rows[row][column]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "columns": self.columns, "mae_deg": self.rows, "meta": self.meta,
                "checks": [c.to_dict() for c in self.checks]}

    def write(self, output_dir: str) -> str:
        os.makedirs(output_dir, exist_ok=True)
        with open(os.path.join(output_dir, f"{self.kind}.csv"), "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["cell"] + self.columns)
            for row, values in self.rows.items():
                writer.writerow([row] + [f"{values[c]:.6f}" for c in self.columns])
        path = os.path.join(output_dir, f"{self.kind}.json")
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
        return path


@dataclass
class KScalingCurve:
    k_list: List[int]
    mae: List[float]
    subset_std: List[float] = field(default_factory=list)
    checks: List[TrendCheck] = field(default_factory=list)

    def write(self, output_dir: str) -> str:
        os.makedirs(output_dir, exist_ok=True)
        with open(os.path.join(output_dir, "kscale.csv"), "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["k", "mae_deg"] + (["subset_std_deg"] if self.subset_std else []))
            for i, (k, value) in enumerate(zip(self.k_list, self.mae)):
                writer.writerow([k, f"{value:.6f}"] + ([f"{self.subset_std[i]:.6f}"] if self.subset_std else []))
        with open(os.path.join(output_dir, "kscale.json"), "w", encoding="utf-8") as handle:
            json.dump({"k": self.k_list, "mae_deg": self.mae, "subset_std_deg": self.subset_std,
                       "checks": [c.to_dict() for c in self.checks]}, handle, indent=2)

        figure = Figure(figsize=(4, 3))
        axis = figure.add_subplot()
        axis.plot(self.k_list, self.mae, marker="o")
        if self.subset_std:
            axis.errorbar(self.k_list, self.mae, yerr=self.subset_std, fmt="none", capsize=3)
        axis.set_xlabel("input images K")
        axis.set_ylabel("MAE (deg)")
        axis.grid(True, alpha=0.3)
        path = os.path.join(output_dir, "kscale.png")
        figure.tight_layout()
        figure.savefig(path, dpi=100)
        return path


def encoder_checks(table: AblationTable, k_list: Sequence[int], min_relative_gap: float) -> List[TrendCheck]:
    k_min, k_max = k_column(min(k_list)), k_column(max(k_list))
    checks = [check_trend(table.cell("il_only", k_min), table.cell("dual", k_min), min_relative_gap,
                          name=f"il_only above dual at {k_min}")]
    if k_min != k_max:
        checks.append(check_trend(table.cell("il_only", k_min), table.cell("il_only", k_max), 0.30,
                                  name=f"il_only improves from {k_min} to {k_max}", relative_to="higher"))
    return checks


def projection_checks(table: AblationTable, short_buckets: Sequence[str]) -> List[TrendCheck]:
    checks = []
    for bucket in short_buckets:
        checks.append(check_trend(table.cell("ortho_only", bucket), table.cell("persp_only", bucket), 0.25,
                                  name=f"ortho_only above persp_only at {bucket}"))
    for bucket in table.columns:
        best = min(table.cell("ortho_only", bucket), table.cell("persp_only", bucket))
        checks.append(check_within(table.cell("mixed", bucket), best, 0.20,
                                   name=f"mixed near the better specialist at {bucket}"))
    return checks


def kscale_checks(curve: KScalingCurve, min_relative_gap: float) -> List[TrendCheck]:
    pairs = sorted(zip(curve.k_list, curve.mae))
    return [check_trend(high, low, min_relative_gap, name=f"K={k1} above K={k2}")
            for (k1, high), (k2, low) in zip(pairs, pairs[1:])]


class AblationService:
    """Analytical studies over trained checkpoints: encoder branches, projection regimes and K scaling."""

    def __init__(self, config: UnipsConfig, db_session: Optional[Session] = None):
        self.config = config
        self.settings = config.ablation
        self.db_session = db_session
        self.evaluation_service = EvaluationService(config, db_session)
        self.training_service = TrainingService(config, db_session)

    # --- Helpers ---

    @staticmethod
    def _require(checkpoints: Dict[str, str], cells: Sequence[str]) -> Dict[str, str]:
        for cell in cells:
            if cell not in checkpoints:
                raise CheckpointError(f"No checkpoint given for ablation cell '{cell}' "
                                      f"(expected cells: {', '.join(cells)})")
            if not os.path.exists(checkpoints[cell]):
                raise CheckpointError(f"Checkpoint for ablation cell '{cell}' not found at {checkpoints[cell]}")
        return {cell: checkpoints[cell] for cell in cells}

    def _eval_entries(self, manifest: DatasetManifest) -> List[ManifestEntry]:
        entries = manifest.split(self.config.eval.split) or manifest.entries
        return entries[:self.config.eval.max_scenes]

    def _mean_mae(self, model: DualBranchModel, manifest: DatasetManifest, entries: Sequence[ManifestEntry],
                  k: Optional[int] = None) -> float:
        values = list(evaluate_entries(model, manifest, entries, k).values())
        if not values:
            raise ContractError(f"No evaluable scenes in {manifest.root}")
        return float(np.mean(values))

    # --- Tables ---

    def ablate_encoders(self, manifest_path: str, checkpoints: Dict[str, str], k_list: Sequence[int]) -> AblationTable:
        """MAE grid over encoder configuration x K; K subsets are the first K images of each scene."""
        checkpoints = self._require(checkpoints, ENCODER_CELLS)
        manifest = load_manifest(manifest_path)
        if max(k_list) > manifest.images_per_scene:
            raise ContractError(f"K list {list(k_list)} exceeds {manifest.images_per_scene} images per scene")
        entries = self._eval_entries(manifest)
        models = {cell: load_model(path)[0] for cell, path in checkpoints.items()}
        decoders = {cell: model.config.decoder_kind for cell, model in models.items()}
        if len(set(decoders.values())) > 1:
            raise ConfigurationError(f"Encoder cells must share one decoder, got {decoders}")
        decoder_kind = decoders[ENCODER_CELLS[0]]
        if decoder_kind != self.settings.encoder_decoder:
            logger.warning(f"Encoder cells use the {decoder_kind} decoder, "
                           f"ablation.encoder_decoder asks for {self.settings.encoder_decoder}")
        table = AblationTable(kind="encoders", columns=[k_column(k) for k in k_list],
                              meta={"decoder_kind": decoder_kind})
        for cell, path in checkpoints.items():
            model = models[cell]
            table.rows[cell] = {}
            for k in k_list:
                value = self._mean_mae(model, manifest, entries, k)
                table.rows[cell][k_column(k)] = value
                self.evaluation_service.record(path, manifest_path, value, kind="encoders", cell=cell, k=k)
            logger.info(f"Encoder cell {cell}: {table.rows[cell]}")
        table.checks = encoder_checks(table, k_list, self.settings.min_relative_gap)
        return table

    def ablate_projection(self, checkpoints: Dict[str, str], eval_sets: Dict[str, str]) -> AblationTable:
        """MAE per training regime x focal bucket."""
        checkpoints = self._require(checkpoints, PROJECTION_REGIMES)
        if not eval_sets:
            raise ConfigurationError("Projection ablation needs at least one focal-bucket eval set")
        table = AblationTable(kind="projection", columns=list(eval_sets))
        manifests = {bucket: load_manifest(path) for bucket, path in eval_sets.items()}
        for regime, path in checkpoints.items():
            model, _ = load_model(path)
            table.rows[regime] = {}
            for bucket, manifest in manifests.items():
                value = self._mean_mae(model, manifest, manifest.entries)
                table.rows[regime][bucket] = value
                self.evaluation_service.record(path, eval_sets[bucket], value, kind="projection",
                                               cell=f"{regime}/{bucket}")
            logger.info(f"Projection regime {regime}: {table.rows[regime]}")
        short = [b for b in table.columns if b.endswith("mm") and float(b[:-2]) <= SHORT_FOCAL_MM]
        table.checks = projection_checks(table, short)
        return table

    def k_scaling(self, manifest_path: str, checkpoint: str, k_list: Sequence[int],
                  output_dir: Optional[str] = None) -> KScalingCurve:
        model, _ = load_model(checkpoint)
        manifest = load_manifest(manifest_path)
        if max(k_list) > manifest.images_per_scene:
            raise ContractError(f"K list {list(k_list)} exceeds {manifest.images_per_scene} images per scene")
        entries = self._eval_entries(manifest)
        curve = KScalingCurve(k_list=list(k_list), mae=[])
        trials = self.config.eval.subset_trials
        rng = np.random.default_rng(self.config.train.seed)
        for k in k_list:
            value = self._mean_mae(model, manifest, entries, k)
            curve.mae.append(value)
            self.evaluation_service.record(checkpoint, manifest_path, value, kind="kscale", k=k)
            if trials:
                spread = []
                for entry in entries:
                    scene_set = manifest.load(entry)
                    if scene_set.mask.any():
                        spread.append(np.std([scene_mae(model, scene_set,
                                                        order=rng.permutation(scene_set.num_images)[:k])[0]
                                              for _ in range(trials)]))
                curve.subset_std.append(float(np.mean(spread)) if spread else 0.0)
            logger.info(f"K={k}: MAE {value:.3f} deg")
        curve.checks = kscale_checks(curve, self.settings.min_relative_gap)
        if output_dir:
            curve.write(output_dir)
        return curve

    # --- Orchestrated studies ---

    def build_focal_eval_sets(self, output_dir: str, overwrite: bool = False) -> Dict[str, str]:
        """One small perspective eval set per focal bucket plus an orthographic set."""
        sets = {}
        base = self.config.generation
        buckets = [(f, PERSPECTIVE) for f in self.settings.focal_buckets_mm] + [(None, ORTHOGRAPHIC)]
        for i, (focal, projection) in enumerate(buckets):
            name = bucket_name(focal)
            directory = os.path.join(output_dir, f"eval_{name}")
            if name in self.settings.manifests:
                sets[name] = self.settings.manifests[name]
                continue
            if os.path.exists(os.path.join(directory, "manifest.json")) and not overwrite:
                sets[name] = directory
                continue
            generation = base.model_copy(update={"n_scenes": self.settings.eval_scenes, "fixed_focal_mm": focal,
                                                 "force_projection": projection})
            gen_dataset(generation, directory, seed=base.seed + 1000 + i, overwrite=overwrite)
            sets[name] = directory
        return sets

    def _checkpoint_or_train(self, cell: str, output_dir: str, manifest_path: Optional[str],
                             branch_mode: Optional[str] = None, decoder_kind: Optional[str] = None) -> str:
        if cell in self.settings.checkpoints:
            return self.settings.checkpoints[cell]
        if not self.settings.train_missing:
            raise CheckpointError(f"No checkpoint for ablation cell '{cell}' and ablation.train_missing is off")
        model_config = self.config.model
        if branch_mode:
            model_config = model_config.model_copy(update={"branch_mode": branch_mode})
        if decoder_kind:
            model_config = model_config.model_copy(update={"decoder_kind": decoder_kind})
        logger.info(f"Training missing ablation cell '{cell}' under the shared budget")
        result = self.training_service.train_full(os.path.join(output_dir, f"train_{cell}"),
                                                  manifest_path=manifest_path, model_config=model_config)
        return result.checkpoint_path

    def _regime_manifest(self, regime: str, output_dir: str, overwrite: bool) -> str:
        if regime in self.settings.manifests:
            return self.settings.manifests[regime]
        if regime == "mixed" and self.config.train.manifest:
            return self.config.train.manifest
        directory = os.path.join(output_dir, f"data_{regime}")
        if os.path.exists(os.path.join(directory, "manifest.json")) and not overwrite:
            return directory
        force = {"ortho_only": ORTHOGRAPHIC, "persp_only": PERSPECTIVE, "mixed": None}[regime]
        gen_dataset(self.config.generation.model_copy(update={"force_projection": force}), directory,
                    overwrite=overwrite)
        return directory

    def run_encoder_study(self, output_dir: str) -> AblationTable:
        manifest_path = self.settings.manifests.get("eval") or self.config.eval.manifest or self.config.train.manifest
        if not manifest_path:
            raise ConfigurationError("Encoder study needs an eval manifest (ablation.manifests.eval or eval.manifest)")
        checkpoints = {cell: self._checkpoint_or_train(cell, output_dir, self.config.train.manifest, cell,
                                                       self.settings.encoder_decoder)
                       for cell in ENCODER_CELLS}
        table = self.ablate_encoders(manifest_path, checkpoints, self.settings.k_list)
        table.write(output_dir)
        return table

    def run_projection_study(self, output_dir: str, overwrite: bool = False) -> AblationTable:
        checkpoints = {}
        for regime in PROJECTION_REGIMES:
            if regime in self.settings.checkpoints:
                checkpoints[regime] = self.settings.checkpoints[regime]
                continue
            manifest_path = self._regime_manifest(regime, output_dir, overwrite) if self.settings.train_missing else None
            checkpoints[regime] = self._checkpoint_or_train(regime, output_dir, manifest_path)
        table = self.ablate_projection(checkpoints, self.build_focal_eval_sets(output_dir, overwrite))
        table.write(output_dir)
        return table

    def run_k_scaling(self, output_dir: str) -> KScalingCurve:
        manifest_path = self.settings.manifests.get("eval") or self.config.eval.manifest or self.config.train.manifest
        if not manifest_path:
            raise ConfigurationError("K scaling needs an eval manifest (ablation.manifests.eval or eval.manifest)")
        checkpoint = self.settings.checkpoints.get("dual") or self._checkpoint_or_train("dual", output_dir,
                                                                                        self.config.train.manifest)
        return self.k_scaling(manifest_path, checkpoint, self.settings.k_list, output_dir)

    def run(self, kind: str, output_dir: str, overwrite: bool = False):
        if kind == "encoders":
            result = self.run_encoder_study(output_dir)
        elif kind == "projection":
            result = self.run_projection_study(output_dir, overwrite)
        elif kind == "kscale":
            result = self.run_k_scaling(output_dir)
        else:
            raise ConfigurationError(f"Unknown ablation kind '{kind}'")
        for check in result.checks:
            if check.passed:
                logger.info(f"Trend holds: {check.name} (relative {check.relative:+.2%})")
            else:
                logger.warning(f"Trend not reproduced: {check.name} (relative {check.relative:+.2%})")
        return result
