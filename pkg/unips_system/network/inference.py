# unips_system/network/inference.py

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from unips_system.core.exceptions import ContractError
from unips_system.core.tensor import no_grad
from unips_system.network.fusion_head import check_resolution
from unips_system.network.illumination_encoder import max_val_normalize
from unips_system.network.model import DualBranchModel, SampleCoords
from unips_system.simulator.renderer import MultiIllumSet

logger = logging.getLogger(__name__)


@dataclass
class InferenceResult:
    normals: np.ndarray
    normals_low: np.ndarray
    chunks: int


def chunk_coords(height: int, width: int, chunk: int) -> List[SampleCoords]:
    """Row-major partition of every pixel into consecutive chunks of at most ``chunk`` locations."""
    if chunk < 1:
        raise ContractError(f"Chunk size must be positive, got {chunk}")
    total = height * width
    return [SampleCoords.from_flat(np.arange(start, min(start + chunk, total)), width)
            for start in range(0, total, chunk)]


def infer_full(scene_set: MultiIllumSet, model: DualBranchModel, chunk: Optional[int] = None,
               apply_mask: bool = False) -> InferenceResult:
    """
    Encode the image set once, decode every pixel chunk by chunk and scatter the
    normals into full maps. The mask is applied only on request.
    """
    images = scene_set.images
    check_resolution(scene_set.height, scene_set.width, model.config.patch_size)
    chunk = chunk or model.config.infer_pixel_samples
    height, width = scene_set.height, scene_set.width
    normals = np.zeros((height, width, 3), dtype=np.float32)
    normals_low = np.zeros_like(normals)
    partitions = chunk_coords(height, width, chunk)

    with no_grad():
        features = model.encode(images, scene_set.geo_features)
        normalized = max_val_normalize(images)
        for coords in partitions:
            low, high = model.decode(features, normalized, coords)
            normals[coords.rows, coords.cols] = high.numpy()
            normals_low[coords.rows, coords.cols] = low.numpy()

    if apply_mask:
        normals[~scene_set.mask] = 0.0
        normals_low[~scene_set.mask] = 0.0
    logger.debug(f"Inferred {height}x{width} normal map in {len(partitions)} chunk(s) of <= {chunk}")
    return InferenceResult(normals=normals, normals_low=normals_low, chunks=len(partitions))
