# unips_system/simulator/scene.py

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial.transform import Rotation

from unips_system.config.schemas import GenerationConfig
from unips_system.core.exceptions import ConfigurationError, ParameterError
from unips_system.simulator.camera import ORTHOGRAPHIC, PERSPECTIVE, CameraSpec

logger = logging.getLogger(__name__)

DIRECTIONAL = "directional"
POINT = "point"
AMBIENT = "ambient"

# Objects live in a scene-local frame centered on the point the camera frames;
# the renderer shifts them by the camera's scene distance along +z.
PLACEMENT_HALF_EXTENT = (0.5, 0.5, 0.3)
BACKDROP_DEPTH = 1.0


@dataclass
class Material:
    albedo: np.ndarray
    specular: float = 0.0
    shininess: float = 20.0

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.albedo.shape != (3,) or np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ParameterError(f"Albedo must be three values in [0, 1], got {self.albedo}")
        if self.specular < 0:
            raise ParameterError(f"Specular weight must be non-negative, got {self.specular}")

    def to_dict(self) -> dict:
        return {"albedo": self.albedo.tolist(), "specular": float(self.specular),
                "shininess": float(self.shininess)}

    @classmethod
    def from_dict(cls, data: dict) -> "Material":
        return cls(albedo=np.array(data["albedo"]), specular=data["specular"], shininess=data["shininess"])


@dataclass
class SceneObject:
    """
    A primitive in the scene-local frame.

    ``scale`` holds the sphere radius (first entry), box half extents, superellipsoid
    radii, or torus (major radius, minor radius, unused).
    """

    kind: str
    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    exponents: tuple = (1.0, 1.0)
    material: Material = field(default_factory=lambda: Material(albedo=np.full(3, 0.8)))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.exponents = tuple(float(e) for e in self.exponents)

    @property
    def bounding_radius(self) -> float:
        if self.kind == "torus":
            return float(self.scale[0] + self.scale[1])
        if self.kind == "sphere":
            return float(self.scale[0])
        return float(np.linalg.norm(self.scale))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": self.center.tolist(), "scale": self.scale.tolist(),
                "rotation": self.rotation.tolist(), "exponents": list(self.exponents),
                "material": self.material.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "SceneObject":
        return cls(kind=data["kind"], center=np.array(data["center"]), scale=np.array(data["scale"]),
                   rotation=np.array(data["rotation"]), exponents=tuple(data["exponents"]),
                   material=Material.from_dict(data["material"]))


@dataclass
class Light:
    """
    ``direction`` points from the surface toward a directional light; point-light
    ``position`` is scene-local and ``falloff`` is the distance exponent.
    """

    kind: str
    intensity: np.ndarray
    direction: Optional[np.ndarray] = None
    position: Optional[np.ndarray] = None
    falloff: float = 2.0

    def __post_init__(self):
        self.intensity = np.broadcast_to(np.asarray(self.intensity, dtype=np.float64), (3,)).copy()
        if np.any(self.intensity < 0):
            raise ParameterError(f"Light intensity must be non-negative, got {self.intensity}")
        if self.kind == DIRECTIONAL:
            direction = np.asarray(self.direction, dtype=np.float64)
            self.direction = direction / np.linalg.norm(direction)
        elif self.kind == POINT:
            self.position = np.asarray(self.position, dtype=np.float64)
        elif self.kind != AMBIENT:
            raise ParameterError(f"Unknown light kind '{self.kind}'")

    def to_dict(self) -> dict:
        data = {"kind": self.kind, "intensity": self.intensity.tolist()}
        if self.kind == DIRECTIONAL:
            data["direction"] = self.direction.tolist()
        if self.kind == POINT:
            data["position"] = self.position.tolist()
            data["falloff"] = float(self.falloff)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "Light":
        return cls(kind=data["kind"], intensity=np.array(data["intensity"]),
                   direction=np.array(data["direction"]) if "direction" in data else None,
                   position=np.array(data["position"]) if "position" in data else None,
                   falloff=data.get("falloff", 2.0))


@dataclass
class SceneSpec:
    """Procedural scene: primitives, an optional backdrop plane, one light rig per image, and the camera."""

    objects: List[SceneObject]
    rigs: List[List[Light]]
    camera: CameraSpec
    ground_plane: bool = False
    ground_material: Material = field(default_factory=lambda: Material(albedo=np.full(3, 0.6)))
    shadows: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.rigs:
            raise ParameterError("A scene needs at least one light rig")
        for i, rig in enumerate(self.rigs):
            if not rig:
                raise ParameterError(f"Light rig {i} is empty")

    @property
    def num_images(self) -> int:
        return len(self.rigs)

    def to_dict(self) -> dict:
        return {
            "objects": [o.to_dict() for o in self.objects],
            "rigs": [[l.to_dict() for l in rig] for rig in self.rigs],
            "camera": self.camera.to_dict(),
            "ground_plane": self.ground_plane,
            "ground_material": self.ground_material.to_dict(),
            "shadows": self.shadows,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        return cls(objects=[SceneObject.from_dict(o) for o in data["objects"]],
                   rigs=[[Light.from_dict(l) for l in rig] for rig in data["rigs"]],
                   camera=CameraSpec.from_dict(data["camera"]),
                   ground_plane=data["ground_plane"],
                   ground_material=Material.from_dict(data["ground_material"]),
                   shadows=data["shadows"], seed=data["seed"])


def _sample_focal(rng: np.random.Generator, config: GenerationConfig) -> float:
    if config.fixed_focal_mm is not None:
        return float(config.fixed_focal_mm)
    if rng.random() < config.perspective_short_fraction:
        lo, hi = config.focal_short_range_mm
        return float(rng.uniform(lo, hi))
    lo, hi = config.focal_long_range_mm
    # Log-uniform keeps long lenses spread across the decade instead of piling up near 1000 mm.
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _sample_toward_camera(rng: np.random.Generator, max_polar_deg: float = 70.0) -> np.ndarray:
    """Unit vector within a cone around -z (the camera side of the scene)."""
    cos_max = math.cos(math.radians(max_polar_deg))
    cos_theta = rng.uniform(cos_max, 1.0)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    sin_theta = math.sqrt(1.0 - cos_theta * cos_theta)
    return np.array([sin_theta * math.cos(phi), sin_theta * math.sin(phi), -cos_theta])


def _sample_object(rng: np.random.Generator, config: GenerationConfig) -> SceneObject:
    kind = config.primitives[int(rng.integers(len(config.primitives)))]
    center = rng.uniform(-1.0, 1.0, size=3) * np.array(PLACEMENT_HALF_EXTENT)
    size = rng.uniform(0.25, 0.45)
    rotation = Rotation.random(random_state=rng).as_matrix()
    exponents = (1.0, 1.0)
    if kind == "sphere":
        scale = np.array([size, size, size])
        rotation = np.eye(3)
    elif kind == "box":
        scale = size * rng.uniform(0.6, 1.0, size=3)
    elif kind == "superellipsoid":
        scale = size * rng.uniform(0.7, 1.0, size=3)
        exponents = tuple(float(e) for e in rng.uniform(0.5, 1.5, size=2))
    else:
        major = size * 0.75
        scale = np.array([major, major * rng.uniform(0.3, 0.5), 0.0])
    albedo = rng.uniform(0.15, 0.95, size=3)
    material = Material(albedo=albedo,
                        specular=float(rng.uniform(*config.specular_range)),
                        shininess=float(rng.uniform(*config.shininess_range)))
    return SceneObject(kind=kind, center=center, scale=scale, rotation=rotation,
                       exponents=exponents, material=material)


def _sample_rig(rng: np.random.Generator, config: GenerationConfig) -> List[Light]:
    strength = rng.uniform(*config.light_intensity_range)
    intensity = strength * rng.uniform(0.85, 1.0, size=3)
    if rng.random() < config.point_light_probability:
        position = _sample_toward_camera(rng) * rng.uniform(2.0, 3.5)
        rig = [Light(kind=POINT, intensity=intensity, position=position)]
    else:
        rig = [Light(kind=DIRECTIONAL, intensity=intensity, direction=_sample_toward_camera(rng))]
    if rng.random() < config.ambient_probability:
        rig.append(Light(kind=AMBIENT, intensity=np.full(3, rng.uniform(*config.ambient_range))))
    return rig


def sample_scene(seed: int, config: GenerationConfig, projection: Optional[str] = None) -> SceneSpec:
    """
    Draw a deterministic scene for ``seed``.

    ``projection`` overrides the random projection draw (used when the dataset
    generator assigns orthographic scenes by quota).
    """
    if not config.primitives:
        raise ConfigurationError("Scene sampling needs at least one primitive type")
    rng = np.random.default_rng(seed)

    if projection is None:
        projection = config.force_projection
    if projection is None:
        projection = ORTHOGRAPHIC if rng.random() < config.ortho_fraction else PERSPECTIVE
    focal = _sample_focal(rng, config) if projection == PERSPECTIVE else None
    camera = CameraSpec(projection=projection, height=config.height, width=config.width,
                        focal_length_mm=focal, sensor_width_mm=config.sensor_width_mm)

    lo, hi = config.objects_per_scene
    count = int(rng.integers(lo, hi + 1))
    objects = [_sample_object(rng, config) for _ in range(count)]
    ground = bool(rng.random() < config.ground_plane_probability)
    ground_material = Material(albedo=rng.uniform(0.3, 0.8, size=3))
    rigs = [_sample_rig(rng, config) for _ in range(config.images_per_scene)]

    return SceneSpec(objects=objects, rigs=rigs, camera=camera, ground_plane=ground,
                     ground_material=ground_material, shadows=config.shadows, seed=int(seed))
