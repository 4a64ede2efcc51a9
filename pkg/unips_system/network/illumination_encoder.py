# unips_system/network/illumination_encoder.py

import logging

import numpy as np

from unips_system.config.schemas import ModelConfig
from unips_system.core.nn import Linear, Module, TransformerBlock
from unips_system.core.tensor import Tensor
from unips_system.network.fusion_head import FusionHead, GridPositionEmbedding, patchify

logger = logging.getLogger(__name__)

NORMALIZATION_EPS = 1e-8


def max_val_normalize(images: np.ndarray) -> np.ndarray:
    """Divide the whole image set by its single largest intensity."""
    peak = float(np.max(images, initial=0.0))
    if peak <= NORMALIZATION_EPS:
        logger.warning(f"Image set peak {peak:.3e} is at or below {NORMALIZATION_EPS}; normalization guarded")
    return (images / max(peak, NORMALIZATION_EPS)).astype(np.float32)


class IlluminationEncoder(Module):
    """
    Illumination branch: patch tokenizer, then blocks alternating frame
    attention (tokens of one image) and light-axis attention (the K tokens at
    one grid cell). Position embeddings are spatial only, so the branch is
    equivariant to the order of the images.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.patch = config.patch_size
        self.taps = list(config.tap_layers_il)
        self.tokenizer = Linear(self.patch * self.patch * 3, config.il_dim, rng)
        self.position = GridPositionEmbedding(config.pos_grid, config.il_dim, rng)
        self.blocks = [TransformerBlock(config.il_dim, config.heads, rng, mlp_ratio=config.mlp_ratio)
                       for _ in range(config.il_layers)]
        self.head = FusionHead([config.il_dim] * len(self.taps), config.branch_channels, rng)

    def forward(self, normalized: np.ndarray) -> Tensor:
        """``normalized``: (K, H, W, 3) max-val-normalized images → (K, H/2, W/2, branch_channels)."""
        k, height, width, _ = normalized.shape
        tokens = self.position(self.tokenizer(Tensor(patchify(normalized, self.patch))))
        _, h, w, dim = tokens.shape
        frame = tokens.reshape(k, h * w, dim)
        taps = []
        for i, block in enumerate(self.blocks):
            if i % 2 == 0:
                frame = block(frame)
            else:
                light_axis = frame.transpose(1, 0, 2)
                frame = block(light_axis).transpose(1, 0, 2)
            if i in self.taps:
                taps.append(frame.reshape(k, h, w, dim))
        return self.head(taps, height // 2, width // 2)
