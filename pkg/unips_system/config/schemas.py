# unips_system/config/schemas.py

import json
import logging
import os
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from unips_system.core.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_FILE = "resolved_config.json"

# Values used for the full-size training run, kept next to the desk defaults so
# every resolved config documents the scale gap.
FULL_SCALE: Dict[str, Dict[str, object]] = {
    "generation": {"n_scenes": 60297, "height": 512, "width": 512, "images_per_scene": 10},
    "model": {
        "patch_size": 14, "geo_dim": 1024, "geo_layers": 24, "tap_layers_geo": [4, 11, 17, 23],
        "il_dim": 1024, "il_layers": 12, "tap_layers_il": [2, 5, 8, 11], "heads": 16,
        "branch_channels": 128, "decoder_low_dim": 256, "decoder_pool_dim": 384,
        "decoder_high_dim": 256, "decoder_light_blocks": 5, "decoder_pixel_blocks": 2,
        "train_pixel_samples": 2048, "infer_pixel_samples": 10000,
    },
    "train": {"epochs": None, "batch_scenes": 2, "k_range": [3, 6], "pixel_samples": 2048,
              "lr": 1e-4, "weight_decay": 0.05, "decay_factor": 0.8, "decay_interval": 10},
}

Primitive = Literal["sphere", "superellipsoid", "box", "torus"]
Range = Tuple[float, float]


def _check_range(name: str, value: Range) -> Range:
    lo, hi = value
    if lo > hi:
        raise ValueError(f"{name} lower bound {lo} exceeds upper bound {hi}")
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=False)


class GenerationConfig(_Section):
    n_scenes: int = Field(600, ge=1, description="Scenes to generate (full scale: 60297).")
    images_per_scene: int = Field(10, ge=1, le=64, description="Images K per scene (full scale: 10).")
    height: int = Field(64, ge=8, description="Image height in pixels (full scale: 512).")
    width: int = Field(64, ge=8, description="Image width in pixels (full scale: 512).")
    ortho_fraction: float = Field(0.3, ge=0.0, le=1.0,
                                  description="Share of scenes rendered with an orthographic camera.")
    perspective_short_fraction: float = Field(
        0.73, ge=0.0, le=1.0, description="Share of perspective scenes with focal length below 70 mm.")
    focal_short_range_mm: Range = Field((20.0, 70.0), description="Short-lens focal range in mm.")
    focal_long_range_mm: Range = Field((70.0, 1000.0), description="Long-lens focal range in mm.")
    fixed_focal_mm: Optional[float] = Field(None, ge=20.0, le=1000.0,
                                            description="Force every perspective scene to this focal length.")
    force_projection: Optional[Literal["perspective", "orthographic"]] = Field(
        None, description="Force every scene to one projection.")
    sensor_width_mm: float = Field(36.0, gt=0.0, description="Sensor width for perspective cameras.")
    primitives: List[Primitive] = Field(default_factory=lambda: ["sphere", "superellipsoid", "box", "torus"],
                                        description="Primitive shapes scenes are built from.")
    objects_per_scene: Tuple[int, int] = Field((1, 3), description="Inclusive object-count range.")
    ground_plane_probability: float = Field(0.3, ge=0.0, le=1.0)
    point_light_probability: float = Field(0.3, ge=0.0, le=1.0,
                                           description="Chance that an image's key light is a point light.")
    ambient_probability: float = Field(0.5, ge=0.0, le=1.0,
                                       description="Chance that a rig carries an ambient term.")
    ambient_range: Range = Field((0.02, 0.15))
    light_intensity_range: Range = Field((0.6, 1.4))
    specular_range: Range = Field((0.0, 0.5))
    shininess_range: Range = Field((5.0, 80.0))
    shadows: bool = Field(True, description="Cast hard shadows with occlusion rays.")
    val_fraction: float = Field(1 / 12, ge=0.0, lt=1.0)
    test_fraction: float = Field(1 / 12, ge=0.0, lt=1.0)
    seed: int = Field(0, ge=0)

    @field_validator("focal_short_range_mm", "focal_long_range_mm", "ambient_range",
                     "light_intensity_range", "specular_range", "shininess_range")
    @classmethod
    def _ordered(cls, value, info):
        return _check_range(info.field_name, value)

    @field_validator("objects_per_scene")
    @classmethod
    def _object_count(cls, value):
        lo, hi = value
        if lo < 1 or lo > hi:
            raise ValueError(f"objects_per_scene must satisfy 1 <= lo <= hi, got {value}")
        return value

    @field_validator("primitives")
    @classmethod
    def _non_empty(cls, value):
        if not value:
            raise ValueError("at least one primitive type is required")
        return value

    @model_validator(mode="after")
    def _check_splits(self):
        if self.val_fraction + self.test_fraction >= 1.0:
            raise ValueError("val_fraction + test_fraction must leave room for a train split")
        for lo, hi in (self.focal_short_range_mm, self.focal_long_range_mm):
            if lo < 20.0 or hi > 1000.0:
                raise ValueError("focal ranges must lie within [20, 1000] mm")
        return self


class ModelConfig(_Section):
    patch_size: int = Field(4, ge=1, description="Token patch side in pixels (full scale: 14).")
    pos_grid: int = Field(16, ge=1, description="Side of the learned position tables (image side / patch).")
    geo_backbone: Literal["internal_frozen", "precomputed_files"] = "internal_frozen"
    geo_trunk_path: Optional[str] = Field(None, description="Pretrained geometry trunk checkpoint.")
    geo_dim: int = Field(64, ge=1, description="Geometry trunk width (full scale: 1024).")
    geo_layers: int = Field(4, ge=1, description="Geometry trunk depth (full scale: 24).")
    tap_layers_geo: List[int] = Field(default_factory=lambda: [1, 2, 3],
                                      description="0-based trunk blocks tapped for fusion (full scale: [4, 11, 17, 23]).")
    geo_feature_channels: int = Field(192, ge=1,
                                      description="Channels of precomputed geometry features (taps x width).")
    il_dim: int = Field(64, ge=1, description="Illumination encoder width.")
    il_layers: int = Field(4, ge=1, description="Illumination encoder depth (full scale: 12).")
    tap_layers_il: List[int] = Field(default_factory=lambda: [1, 2, 3],
                                     description="0-based encoder blocks tapped for fusion (full scale: [2, 5, 8, 11]).")
    heads: int = Field(4, ge=1, description="Attention heads (full scale: 16).")
    mlp_ratio: int = Field(2, ge=1)
    branch_channels: int = Field(32, ge=1, description="Per-branch fused channels (full scale: 128).")
    branch_mode: Literal["dual", "geo_only", "il_only"] = "dual"
    decoder_kind: Literal["dual_scale", "single_scale"] = Field(
        "dual_scale", description="Two-scale decoder with RGB embedding, or one scale with a pixel embedding.")
    decoder_low_dim: int = Field(64, ge=1, description="Light-axis width at low scale (full scale: 256).")
    decoder_pool_dim: int = Field(96, ge=1, description="Pooled width (full scale: 384).")
    decoder_high_dim: int = Field(64, ge=1, description="RGB embedding width at high scale (full scale: 256).")
    decoder_light_blocks: int = Field(2, ge=1, description="Light-axis blocks per scale (full scale: 5).")
    decoder_pixel_blocks: int = Field(1, ge=1, description="Pixel-sampling blocks (full scale: 2).")
    train_pixel_samples: int = Field(256, ge=1, description="Pixels per scene in training (full scale: 2048).")
    infer_pixel_samples: int = Field(1024, ge=1, description="Decoder chunk at inference (full scale: 10000).")
    seed: int = Field(0, ge=0, description="Initialization seed.")

    @model_validator(mode="after")
    def _check_contracts(self):
        for name in ("il_dim", "geo_dim", "decoder_low_dim", "decoder_pool_dim"):
            if getattr(self, name) % self.heads != 0:
                raise ValueError(f"{name}={getattr(self, name)} is not divisible by heads={self.heads}")
        for name, depth in (("tap_layers_geo", self.geo_layers), ("tap_layers_il", self.il_layers)):
            taps = getattr(self, name)
            if not taps:
                raise ValueError(f"{name} must list at least one block")
            if any(b <= a for a, b in zip(taps, taps[1:])):
                raise ValueError(f"{name} must be strictly increasing, got {taps}")
            if taps[0] < 0 or taps[-1] >= depth:
                raise ValueError(f"{name} indices must lie in [0, {depth - 1}], got {taps}")
        if self.geo_backbone == "internal_frozen":
            expected = len(self.tap_layers_geo) * self.geo_dim
            if self.geo_feature_channels != expected:
                raise ValueError(f"geo_feature_channels must equal taps x geo_dim = {expected}")
        return self

    def fingerprint(self) -> dict:
        """Fields that determine parameter shapes and semantics (paths excluded)."""
        return self.model_dump(exclude={"geo_trunk_path", "infer_pixel_samples"})


class PretrainConfig(_Section):
    iterations: int = Field(600, ge=0)
    batch_images: int = Field(4, ge=1)
    lr: float = Field(3e-4, ge=0.0)
    weight_decay: float = Field(0.05, ge=0.0)
    grad_clip: float = Field(1.0, ge=0.0)
    val_scenes: int = Field(16, ge=1)
    seed: int = Field(0, ge=0)


class TrainConfig(_Section):
    manifest: Optional[str] = Field(None, description="Dataset manifest path.")
    epochs: int = Field(12, ge=1)
    iterations_per_epoch: Optional[int] = Field(None, ge=1,
                                                description="Defaults to ceil(train scenes / batch_scenes).")
    max_iterations: Optional[int] = Field(None, ge=1, description="Hard cap on total iterations.")
    batch_scenes: int = Field(2, ge=1, description="Scenes per batch (full scale: 2).")
    k_range: Tuple[int, int] = Field((3, 6), description="Inclusive range for K per scene (full scale: [3, 6]).")
    pixel_samples: Optional[int] = Field(None, ge=1,
                                         description="Pixels per scene; defaults to model.train_pixel_samples.")
    lr: float = Field(1e-4, ge=0.0)
    weight_decay: float = Field(0.05, ge=0.0)
    decay_factor: float = Field(0.8, gt=0.0, le=1.0)
    decay_interval: int = Field(2, ge=1, description="Epochs between decays (full scale: 10).")
    warmup_epochs: int = Field(1, ge=0)
    grad_clip: float = Field(1.0, ge=0.0)
    checkpoint_every: int = Field(1, ge=1, description="Checkpoint cadence in epochs.")
    eval_k: int = Field(6, ge=1, description="Images per scene for validation MAE.")
    val_scenes: int = Field(16, ge=1, description="Validation scenes per epoch.")
    seed: int = Field(0, ge=0)

    @field_validator("k_range")
    @classmethod
    def _k_range(cls, value):
        lo, hi = value
        if lo < 1 or lo > hi:
            raise ValueError(f"k_range must satisfy 1 <= lo <= hi, got {value}")
        return value


class EvalConfig(_Section):
    manifest: Optional[str] = None
    split: Literal["train", "val", "test"] = "test"
    k: Optional[int] = Field(None, ge=1, description="First K images per scene; all when unset.")
    apply_mask: bool = True
    write_png: bool = True
    max_scenes: Optional[int] = Field(None, ge=1)
    subset_trials: int = Field(0, ge=0, description="Extra random K-subset trials per scene.")


class AblationConfig(_Section):
    kind: Literal["encoders", "projection", "kscale"] = "kscale"
    k_list: List[int] = Field(default_factory=lambda: [1, 4, 8])
    checkpoints: Dict[str, str] = Field(default_factory=dict,
                                        description="Cell name to checkpoint path.")
    manifests: Dict[str, str] = Field(default_factory=dict,
                                      description="Training regime or focal bucket to manifest path.")
    focal_buckets_mm: List[float] = Field(default_factory=lambda: [20.0, 35.0, 70.0, 200.0])
    eval_scenes: int = Field(10, ge=1, description="Scenes per focal-bucket eval set.")
    train_missing: bool = Field(False, description="Train absent checkpoints under the shared train budget.")
    min_relative_gap: float = Field(0.10, ge=0.0)
    encoder_decoder: Literal["dual_scale", "single_scale"] = Field(
        "single_scale", description="Decoder the encoder study trains and expects for every cell.")

    @field_validator("k_list")
    @classmethod
    def _k_list(cls, value):
        if not value or any(k < 1 for k in value):
            raise ValueError(f"k_list must hold positive counts, got {value}")
        return value


class RunConfig(_Section):
    subcommand: str
    config_path: Optional[str] = None
    seed: int = 0
    output_dir: str
    verbosity: int = 0
    overwrite: bool = False


class UnipsConfig(_Section):
    generation: GenerationConfig = Field(default_factory=GenerationConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    @model_validator(mode="after")
    def _check_patch_divisibility(self):
        step = 2 * self.model.patch_size
        if self.generation.height % step or self.generation.width % step:
            raise ValueError(f"image size {self.generation.height}x{self.generation.width} "
                             f"must be divisible by 2*patch_size={step}")
        return self


def _format_validation_error(path: str, error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        where = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{path}: {where}: {item['msg']}")
    return "; ".join(lines)


def parse_config(data: dict, source: str = "<dict>") -> UnipsConfig:
    try:
        return UnipsConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(_format_validation_error(source, e)) from e


def load_config(path: Optional[str]) -> UnipsConfig:
    """Load and validate a JSON config; ``None`` yields the desk-scale defaults."""
    if path is None:
        return UnipsConfig()
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as e:
        raise ConfigurationError(f"{path}: cannot read config file: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}:1:1: top-level JSON value must be an object")
    config = parse_config(data, source=path)
    logger.debug(f"Loaded config from {path}")
    return config


def write_resolved_config(run: RunConfig, config: UnipsConfig) -> str:
    """Snapshot the resolved config (with the full-scale reference values) into the run directory."""
    os.makedirs(run.output_dir, exist_ok=True)
    path = os.path.join(run.output_dir, RESOLVED_CONFIG_FILE)
    snapshot = {
        "run": run.model_dump(),
        "resolved": config.model_dump(mode="json"),
        "full_scale": FULL_SCALE,
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(snapshot, handle, indent=2, sort_keys=True)
    return path
