# unips_system/network/fusion_head.py

import logging
from typing import List, Sequence

import numpy as np

from unips_system.core.exceptions import ContractError, DimensionError
from unips_system.core.nn import Conv3x3, Linear, Module
from unips_system.core.tensor import Parameter, Tensor, gelu, upsample_bilinear

logger = logging.getLogger(__name__)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) → (B, H/p, W/p, p*p*C), each token holding one non-overlapping patch."""
    batch, height, width, channels = images.shape
    if height % patch or width % patch:
        raise ContractError(f"Image size {height}x{width} is not divisible by patch size {patch}")
    h, w = height // patch, width // patch
    grid = images.reshape(batch, h, patch, w, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(grid.reshape(batch, h, w, patch * patch * channels))


def check_resolution(height: int, width: int, patch: int):
    step = 2 * patch
    if height % step or width % step:
        raise ContractError(f"Resolution {height}x{width} must be divisible by 2*patch_size={step}")


class GridPositionEmbedding(Module):
    """Learned 2D position table, bilinearly resampled when the token grid differs from its base size."""

    def __init__(self, grid: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(rng.normal(0.0, 0.02, size=(1, grid, grid, dim)))

    def forward(self, tokens: Tensor) -> Tensor:
        _, h, w, _ = tokens.shape
        table = self.table
        if table.shape[1:3] != (h, w):
            table = upsample_bilinear(table, h, w)
        return tokens + table


class FusionHead(Module):
    """
    Multi-level projection head: each tapped token grid is projected to
    ``out_channels``, resized to the output grid and summed; two 3x3
    refinements follow.
    """

    def __init__(self, in_dims: Sequence[int], out_channels: int, rng: np.random.Generator):
        self.projections = [Linear(dim, out_channels, rng) for dim in in_dims]
        self.refine1 = Conv3x3(out_channels, out_channels, rng)
        self.refine2 = Conv3x3(out_channels, out_channels, rng)

    def forward(self, taps: List[Tensor], out_h: int, out_w: int) -> Tensor:
        if len(taps) != len(self.projections):
            raise DimensionError(f"Fusion head expects {len(self.projections)} taps, got {len(taps)}")
        fused = None
        for tap, projection in zip(taps, self.projections):
            level = projection(tap)
            if level.shape[1:3] != (out_h, out_w):
                level = upsample_bilinear(level, out_h, out_w)
            fused = level if fused is None else fused + level
        return self.refine2(gelu(self.refine1(fused)))
