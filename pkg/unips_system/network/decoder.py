# unips_system/network/decoder.py

import logging
from typing import Tuple

import numpy as np

from unips_system.config.schemas import ModelConfig
from unips_system.core.exceptions import ContractError
from unips_system.core.nn import MLP, LayerNorm, Linear, Module, PoolingByAttention, TransformerBlock
from unips_system.core.tensor import Tensor, as_tensor, concat, gelu, l2_normalize

logger = logging.getLogger(__name__)


def check_decoder_inputs(features: Tensor, pixels: Tensor, feature_dim: int):
    if features.ndim != 3 or pixels.ndim != 3:
        raise ContractError(f"Decoder expects (K, P, C) inputs, got {features.shape} and {pixels.shape}")
    k, samples, channels = features.shape
    if samples == 0:
        raise ContractError("Decoder needs at least one sampled location")
    if pixels.shape[:2] != (k, samples):
        raise ContractError(f"Feature samples {features.shape[:2]} and pixel samples {pixels.shape[:2]} "
                            f"disagree on (K, P)")
    if channels != feature_dim:
        raise ContractError(f"Decoder built for {feature_dim} feature channels, got {channels}")


class LightAxisAggregator(Module):
    """
    Per-pixel set encoder over the K images: input projection, light-axis
    blocks, a widening projection with one more block, then pooling by
    attention collapses K. No position information enters along K.
    """

    def __init__(self, in_dim: int, config: ModelConfig, rng: np.random.Generator):
        self.proj_in = Linear(in_dim, config.decoder_low_dim, rng)
        self.blocks = [TransformerBlock(config.decoder_low_dim, config.heads, rng, mlp_ratio=config.mlp_ratio)
                       for _ in range(config.decoder_light_blocks)]
        self.proj_pool = Linear(config.decoder_low_dim, config.decoder_pool_dim, rng)
        self.pool_block = TransformerBlock(config.decoder_pool_dim, config.heads, rng, mlp_ratio=config.mlp_ratio)
        self.pool = PoolingByAttention(config.decoder_pool_dim, config.heads, rng)

    def forward(self, tokens: Tensor) -> Tensor:
        """(P, K, in_dim) → (P, pool_dim)."""
        x = self.proj_in(tokens)
        for block in self.blocks:
            x = block(x)
        return self.pool(self.pool_block(self.proj_pool(x)))


class PixelSamplingBlocks(Module):
    """Self-attention across the P sampled locations of one scene (no positional encoding)."""

    def __init__(self, dim: int, attn_dim: int, count: int, config: ModelConfig, rng: np.random.Generator):
        self.blocks = [TransformerBlock(dim, config.heads, rng, mlp_ratio=config.mlp_ratio, attn_dim=attn_dim)
                       for _ in range(count)]

    def forward(self, x: Tensor) -> Tensor:
        """(P, D) → (P, D)."""
        samples, dim = x.shape
        x = x.reshape(1, samples, dim)
        for block in self.blocks:
            x = block(x)
        return x.reshape(samples, dim)


class RGBEmbedding(Module):
    """3 → high_dim MLP with two LayerNorms."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(3, dim, rng)
        self.norm1 = LayerNorm(dim)
        self.fc2 = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)

    def forward(self, rgb: Tensor) -> Tensor:
        return self.norm2(self.fc2(gelu(self.norm1(self.fc1(rgb)))))


class PixelSamplingDecoder(Module):
    """
    Two-scale normal decoder over P sampled pixels.

    The low scale sees fused features only; the high scale adds an embedding of
    each image's raw RGB at the pixel, and its pooled code is extended with the
    low-scale normal before pixel-sampling attention and regression.
    """

    def __init__(self, feature_dim: int, config: ModelConfig, rng: np.random.Generator):
        pool = config.decoder_pool_dim
        self.feature_dim = feature_dim
        self.low_aggregator = LightAxisAggregator(feature_dim, config, rng)
        self.low_pixels = PixelSamplingBlocks(pool, pool, config.decoder_pixel_blocks, config, rng)
        self.low_regressor = MLP([pool, pool // 2, 3], rng)
        self.rgb_embedding = RGBEmbedding(config.decoder_high_dim, rng)
        self.high_aggregator = LightAxisAggregator(feature_dim + config.decoder_high_dim, config, rng)
        self.high_pixels = PixelSamplingBlocks(pool + 3, pool, config.decoder_pixel_blocks, config, rng)
        self.high_regressor = MLP([pool + 3, pool, pool // 2, 3], rng)

    def forward(self, features: Tensor, pixels) -> Tuple[Tensor, Tensor]:
        """
        ``features``: (K, P, C) fused features at the downsampled coordinates;
        ``pixels``: (K, P, 3) normalized RGB at the full-resolution coordinates.
        Returns unit normals (P, 3) at the low and high scale.
        """
        pixels = as_tensor(pixels)
        check_decoder_inputs(features, pixels, self.feature_dim)

        per_pixel = features.transpose(1, 0, 2)
        low_code = self.low_pixels(self.low_aggregator(per_pixel))
        normals_low = l2_normalize(self.low_regressor(low_code))

        rgb = self.rgb_embedding(pixels.transpose(1, 0, 2))
        high_code = self.high_aggregator(concat([per_pixel, rgb], axis=-1))
        high_code = self.high_pixels(concat([high_code, normals_low], axis=-1))
        normals_high = l2_normalize(self.high_regressor(high_code))
        return normals_low, normals_high


class SingleScaleDecoder(Module):
    """
    One-scale normal decoder with a pixel embedding: each image's raw RGB at the
    pixel is appended to its feature vector before light-axis aggregation.
    The single prediction is returned for both scales.
    """

    def __init__(self, feature_dim: int, config: ModelConfig, rng: np.random.Generator):
        pool = config.decoder_pool_dim
        self.feature_dim = feature_dim
        self.aggregator = LightAxisAggregator(feature_dim + 3, config, rng)
        self.pixels = PixelSamplingBlocks(pool, pool, config.decoder_pixel_blocks, config, rng)
        self.regressor = MLP([pool, pool // 2, 3], rng)

    def forward(self, features: Tensor, pixels) -> Tuple[Tensor, Tensor]:
        pixels = as_tensor(pixels)
        check_decoder_inputs(features, pixels, self.feature_dim)
        tokens = concat([features.transpose(1, 0, 2), pixels.transpose(1, 0, 2)], axis=-1)
        normals = l2_normalize(self.regressor(self.pixels(self.aggregator(tokens))))
        return normals, normals


DECODERS = {"dual_scale": PixelSamplingDecoder, "single_scale": SingleScaleDecoder}


def build_decoder(feature_dim: int, config: ModelConfig, rng: np.random.Generator) -> Module:
    logger.debug(f"Building {config.decoder_kind} decoder over {feature_dim} feature channels")
    return DECODERS[config.decoder_kind](feature_dim, config, rng)
