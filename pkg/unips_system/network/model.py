# unips_system/network/model.py

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from unips_system.config.schemas import ModelConfig
from unips_system.core.exceptions import CheckpointError, ContractError, DimensionError
from unips_system.core.nn import Module
from unips_system.core.serialization import config_hash, load_container, save_container
from unips_system.core.tensor import Tensor, concat
from unips_system.network.decoder import build_decoder
from unips_system.network.fusion_head import check_resolution
from unips_system.network.geometry_encoder import GeometryEncoder, GeometryTrunk, load_trunk
from unips_system.network.illumination_encoder import IlluminationEncoder, max_val_normalize

logger = logging.getLogger(__name__)

MODEL_KIND = "model"


@dataclass
class SampleCoords:
    """
    P pixel locations as 0-based (row, col). The feature-grid cell of pixel
    ``r`` is ``r // 2`` (the 1-based ``floor((x - 1) / 2) + 1`` mapping).
    """

    rows: np.ndarray
    cols: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        if self.rows.shape != self.cols.shape or self.rows.ndim != 1:
            raise ContractError(f"Sample rows {self.rows.shape} and cols {self.cols.shape} must be equal 1-D arrays")

    def __len__(self):
        return int(self.rows.size)

    @property
    def down_rows(self) -> np.ndarray:
        return self.rows // 2

    @property
    def down_cols(self) -> np.ndarray:
        return self.cols // 2

    def check_bounds(self, height: int, width: int):
        if len(self) and (self.rows.min() < 0 or self.cols.min() < 0
                          or self.rows.max() >= height or self.cols.max() >= width):
            raise ContractError(f"Sample coordinates fall outside the {height}x{width} image")

    def flat_indices(self, width: int) -> np.ndarray:
        return self.rows * width + self.cols

    @classmethod
    def from_flat(cls, indices: np.ndarray, width: int) -> "SampleCoords":
        indices = np.asarray(indices, dtype=np.int64)
        return cls(rows=indices // width, cols=indices % width)


@dataclass
class NormalSamples:
    low: np.ndarray
    high: np.ndarray
    coords: SampleCoords

    def scatter(self, height: int, width: int, scale: str = "high") -> np.ndarray:
        full = np.zeros((height, width, 3), dtype=np.float32)
        full[self.coords.rows, self.coords.cols] = getattr(self, scale)
        return full


class DualBranchModel(Module):
    """
    Geometry branch and illumination branch encoders feeding a pixel-sampling
    decoder (``decoder_kind``). ``branch_mode`` other than ``dual`` keeps the
    channel layout but zeroes the disabled branch.
    """

    def __init__(self, config: ModelConfig, trunk: Optional[GeometryTrunk] = None):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.mode = config.branch_mode
        self.channels = config.branch_channels
        self.geometry = None
        self.illumination = None
        if self.mode != "il_only":
            if trunk is None and config.geo_backbone == "internal_frozen":
                trunk = load_trunk(config.geo_trunk_path, config)
            self.geometry = GeometryEncoder(config, rng, trunk=trunk)
        if self.mode != "geo_only":
            self.illumination = IlluminationEncoder(config, rng)
        self.decoder = build_decoder(2 * config.branch_channels, config, rng)

    @property
    def trunk(self) -> Optional[GeometryTrunk]:
        return self.geometry.trunk if self.geometry is not None else None

    # --- Encoder ---

    def _zeros(self, k: int, height: int, width: int) -> Tensor:
        return Tensor(np.zeros((k, height // 2, width // 2, self.channels)))

    def encode_geo(self, images: np.ndarray, geo_features: Optional[np.ndarray] = None) -> Tensor:
        k, height, width, _ = images.shape
        check_resolution(height, width, self.config.patch_size)
        if self.geometry is None:
            return self._zeros(k, height, width)
        return self.geometry(images, geo_features)

    def encode_il(self, normalized: np.ndarray) -> Tensor:
        k, height, width, _ = normalized.shape
        check_resolution(height, width, self.config.patch_size)
        if self.illumination is None:
            return self._zeros(k, height, width)
        return self.illumination(normalized)

    def encode(self, images: np.ndarray, geo_features: Optional[np.ndarray] = None) -> Tensor:
        """(K, H, W, 3) raw images → FeatureMaps (K, H/2, W/2, 2*branch_channels), geometry channels first."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[0] < 1 or images.shape[-1] != 3:
            raise ContractError(f"Expected (K, H, W, 3) images with K >= 1, got {images.shape}")
        geo = self.encode_geo(images, geo_features)
        il = self.encode_il(max_val_normalize(images))
        if geo.shape != il.shape:
            raise DimensionError(f"Branch outputs disagree: geometry {geo.shape}, illumination {il.shape}")
        return concat([geo, il], axis=-1)

    # --- Decoder ---

    @staticmethod
    def gather(features: Tensor, pixels: np.ndarray, coords: SampleCoords) -> Tuple[Tensor, np.ndarray]:
        """Feature vectors at X↓ (K, P, C) and pixel values at X (K, P, 3)."""
        feature_samples = features[:, coords.down_rows, coords.down_cols, :]
        return feature_samples, pixels[:, coords.rows, coords.cols, :]

    def decode(self, features: Tensor, normalized: np.ndarray, coords: SampleCoords) -> Tuple[Tensor, Tensor]:
        if len(coords) == 0:
            raise ContractError("Decoder needs at least one sampled location")
        if features.shape[0] != normalized.shape[0]:
            raise ContractError(f"Features hold K={features.shape[0]} images, pixels hold K={normalized.shape[0]}")
        coords.check_bounds(normalized.shape[1], normalized.shape[2])
        feature_samples, pixel_samples = self.gather(features, normalized, coords)
        return self.decoder(feature_samples, pixel_samples)

    def forward(self, images: np.ndarray, coords: SampleCoords,
                geo_features: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        features = self.encode(images, geo_features)
        return self.decode(features, max_val_normalize(np.asarray(images, dtype=np.float32)), coords)

    def trunk_digest(self) -> Optional[str]:
        return self.trunk.digest() if self.trunk is not None else None


def model_config_hash(config: ModelConfig) -> str:
    return config_hash(config.fingerprint())


def save_model(model: DualBranchModel, path: str, extra: Optional[dict] = None):
    meta = {
        "kind": MODEL_KIND,
        "model_config": model.config.model_dump(mode="json"),
        "config_hash": model_config_hash(model.config),
        "trunk_digest": model.trunk_digest(),
    }
    meta.update(extra or {})
    save_container(path, model.state_dict(), meta)


def load_model(path: str, config: Optional[ModelConfig] = None, force: bool = False) -> Tuple[DualBranchModel, dict]:
    """
    Rebuild a model from a checkpoint. When ``config`` is given its hash must
    match the embedded one unless ``force`` is set.
    """
    params, meta = load_container(path)
    if meta.get("kind") != MODEL_KIND:
        raise CheckpointError(f"{path} holds a '{meta.get('kind')}' container, not a model checkpoint")
    stored = ModelConfig.model_validate(meta["model_config"])
    if config is not None and model_config_hash(config) != meta.get("config_hash"):
        if not force:
            raise CheckpointError(f"{path}: checkpoint config hash {meta.get('config_hash', '')[:12]} does not match "
                                  f"the requested config {model_config_hash(config)[:12]} (use --force to override)")
        logger.warning(f"Loading {path} despite a config hash mismatch (forced)")
    else:
        config = stored

    trunk = None
    if config.branch_mode != "il_only" and config.geo_backbone == "internal_frozen":
        # Weights come from the checkpoint; the initial draw is overwritten below.
        trunk = GeometryTrunk(config, np.random.default_rng(0))
    model = DualBranchModel(config, trunk=trunk)
    model.load_state_dict(params)
    if trunk is not None:
        trunk.freeze()
        if meta.get("trunk_digest") and trunk.digest() != meta["trunk_digest"]:
            raise CheckpointError(f"{path}: frozen trunk weights do not match their recorded digest")
    logger.info(f"Loaded model checkpoint {path}")
    return model, meta
