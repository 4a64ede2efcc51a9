# unips_system/simulator/camera.py

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from unips_system.core.exceptions import ParameterError

logger = logging.getLogger(__name__)

PERSPECTIVE = "perspective"
ORTHOGRAPHIC = "orthographic"

MIN_FOCAL_MM = 20.0
MAX_FOCAL_MM = 1000.0


@dataclass(frozen=True)
class CameraSpec:
    """
    Camera at the origin looking down +z (x right, y down).

    The scene is framed identically for every lens: a perspective camera is
    pushed back in proportion to its focal length so that ``frame_half_width``
    scene units span half the image width at the scene center.
    """

    projection: str
    height: int
    width: int
    focal_length_mm: Optional[float] = None
    sensor_width_mm: float = 36.0
    frame_half_width: float = 1.25

    def __post_init__(self):
        if self.projection not in (PERSPECTIVE, ORTHOGRAPHIC):
            raise ParameterError(f"Unknown projection '{self.projection}'")
        if self.height < 1 or self.width < 1:
            raise ParameterError(f"Image size must be positive, got {self.height}x{self.width}")
        if self.projection == PERSPECTIVE:
            if self.focal_length_mm is None or not MIN_FOCAL_MM <= self.focal_length_mm <= MAX_FOCAL_MM:
                raise ParameterError(
                    f"Perspective focal length must lie in [{MIN_FOCAL_MM}, {MAX_FOCAL_MM}] mm, "
                    f"got {self.focal_length_mm}")

    @property
    def is_perspective(self) -> bool:
        return self.projection == PERSPECTIVE

    @property
    def sensor_height_mm(self) -> float:
        return self.sensor_width_mm * self.height / self.width

    @property
    def scene_distance(self) -> float:
        """Distance along +z from the camera to the scene center."""
        if self.is_perspective:
            return self.frame_half_width * self.focal_length_mm / (0.5 * self.sensor_width_mm)
        return 4.0

    def ray_directions(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """
        Unit ray directions for continuous pixel coordinates (pixel ``(i, j)``
        has its center at ``(i + 0.5, j + 0.5)``; ``(H/2, W/2)`` is the principal point).
        """
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        if not self.is_perspective:
            dirs = np.zeros(rows.shape + (3,))
            dirs[..., 2] = 1.0
            return dirs
        x = (cols / self.width - 0.5) * self.sensor_width_mm
        y = (rows / self.height - 0.5) * self.sensor_height_mm
        dirs = np.stack([x, y, np.full_like(x, self.focal_length_mm)], axis=-1)
        return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)

    def ray_origins(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        origins = np.zeros(rows.shape + (3,))
        if not self.is_perspective:
            pixel = 2.0 * self.frame_half_width / self.width
            origins[..., 0] = (cols - 0.5 * self.width) * pixel
            origins[..., 1] = (rows - 0.5 * self.height) * pixel
        return origins

    def pixel_rays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions through every pixel center, each (H, W, 3)."""
        rows, cols = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        return self.ray_origins(rows, cols), self.ray_directions(rows, cols)

    def corner_ray_angle(self) -> float:
        """Angle between the optical axis and the ray through a sensor corner (0 for orthographic)."""
        if not self.is_perspective:
            return 0.0
        half_diagonal = 0.5 * math.hypot(self.sensor_width_mm, self.sensor_height_mm)
        return math.atan(half_diagonal / self.focal_length_mm)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CameraSpec":
        return cls(**data)
