# unips_system/network/geometry_encoder.py

import logging
import os
from typing import List, Optional

import numpy as np

from unips_system.config.schemas import ModelConfig
from unips_system.core.exceptions import CheckpointError, DimensionError, GeometryBackboneError
from unips_system.core.nn import Linear, Module, TransformerBlock
from unips_system.core.serialization import array_digest, load_container, save_container
from unips_system.core.tensor import Tensor, concat, l2_normalize, no_grad
from unips_system.network.fusion_head import FusionHead, GridPositionEmbedding, patchify

logger = logging.getLogger(__name__)

TRUNK_KIND = "geo_trunk"


def channel_normalize(images: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-image, per-channel zero mean and unit deviation over pixels."""
    mean = images.mean(axis=(1, 2), keepdims=True)
    std = images.std(axis=(1, 2), keepdims=True)
    return ((images - mean) / (std + eps)).astype(np.float32)


class GeometryTrunk(Module):
    """
    Single-image transformer that serves as the frozen geometric prior.

    Images are processed independently (no attention across the image set),
    so repeated inputs give repeated features.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.patch = config.patch_size
        self.taps = list(config.tap_layers_geo)
        self.embed = Linear(self.patch * self.patch * 3, config.geo_dim, rng)
        self.position = GridPositionEmbedding(config.pos_grid, config.geo_dim, rng)
        self.blocks = [TransformerBlock(config.geo_dim, config.heads, rng, mlp_ratio=config.mlp_ratio)
                       for _ in range(config.geo_layers)]
        self.frozen = False

    def freeze(self):
        super().freeze()
        self.frozen = True

    def forward(self, images: np.ndarray) -> List[Tensor]:
        """(B, H, W, 3) raw images → tapped token grids, each (B, H/p, W/p, geo_dim)."""
        tokens = self.position(self.embed(Tensor(patchify(channel_normalize(images), self.patch))))
        batch, h, w, dim = tokens.shape
        x = tokens.reshape(batch, h * w, dim)
        taps = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in self.taps:
                taps.append(x.reshape(batch, h, w, dim))
        return taps

    def digest(self) -> str:
        return array_digest(self.state_dict())


class PatchNormalHead(Module):
    """Temporary pretraining head: last tap → per-pixel unit normals."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.patch = config.patch_size
        self.proj = Linear(config.geo_dim, self.patch * self.patch * 3, rng)

    def forward(self, tap: Tensor) -> Tensor:
        batch, h, w, _ = tap.shape
        p = self.patch
        grid = self.proj(tap).reshape(batch, h, w, p, p, 3).transpose(0, 1, 3, 2, 4, 5)
        return l2_normalize(grid.reshape(batch, h * p, w * p, 3))


def save_trunk(trunk: GeometryTrunk, path: str, config: ModelConfig, extra: Optional[dict] = None):
    meta = {"kind": TRUNK_KIND, "frozen": True, "digest": trunk.digest(),
            "model_config": config.model_dump(include={"patch_size", "pos_grid", "geo_dim", "geo_layers",
                                                       "tap_layers_geo", "heads", "mlp_ratio"})}
    meta.update(extra or {})
    save_container(path, trunk.state_dict(), meta)


def load_trunk(path: Optional[str], config: ModelConfig) -> GeometryTrunk:
    """Load pretrained trunk weights and freeze them; missing weights are a backbone error."""
    if not path or not os.path.exists(path):
        raise GeometryBackboneError(f"Geometry backbone weights not found at {path!r}; run pretrain-geo first")
    params, meta = load_container(path)
    if meta.get("kind") != TRUNK_KIND:
        raise CheckpointError(f"{path} holds a '{meta.get('kind')}' container, not a geometry trunk")
    trunk = GeometryTrunk(config, np.random.default_rng(0))
    trunk.load_state_dict(params)
    if meta.get("digest") and trunk.digest() != meta["digest"]:
        raise CheckpointError(f"{path}: trunk weights do not match their recorded digest")
    trunk.freeze()
    logger.info(f"Loaded frozen geometry trunk from {path}")
    return trunk


class GeometryEncoder(Module):
    """
    Geometry branch: frozen trunk (or precomputed feature grids) followed by a
    learnable fusion head producing (K, H/2, W/2, branch_channels).
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, trunk: Optional[GeometryTrunk] = None):
        self.precomputed = config.geo_backbone == "precomputed_files"
        self.feature_channels = config.geo_feature_channels
        if self.precomputed:
            self.trunk = None
            in_dims = [config.geo_feature_channels]
        else:
            if trunk is None:
                raise GeometryBackboneError("Internal geometry backbone requested but no trunk weights were given")
            trunk.freeze()
            self.trunk = trunk
            in_dims = [config.geo_dim] * len(config.tap_layers_geo)
        self.head = FusionHead(in_dims, config.branch_channels, rng)

    def forward(self, images: np.ndarray, geo_features: Optional[np.ndarray] = None) -> Tensor:
        k, height, width, _ = images.shape
        if self.precomputed:
            if geo_features is None:
                raise GeometryBackboneError("Precomputed geometry features are required but missing")
            if geo_features.shape[0] != k or geo_features.shape[-1] != self.feature_channels:
                raise DimensionError(f"Geometry features {geo_features.shape} do not match K={k} "
                                     f"and C={self.feature_channels}")
            taps = [Tensor(geo_features)]
        else:
            # Frozen: nothing upstream of the head joins the tape.
            with no_grad():
                taps = [tap.detach() for tap in self.trunk(images)]
        return self.head(taps, height // 2, width // 2)


def export_features(trunk: GeometryTrunk, images: np.ndarray) -> np.ndarray:
    """Concatenated trunk taps (K, H/p, W/p, taps*geo_dim) for the precomputed backend."""
    with no_grad():
        taps = trunk(images)
    return concat(taps, axis=-1).numpy().astype(np.float32)
