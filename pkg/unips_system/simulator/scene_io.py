# unips_system/simulator/scene_io.py

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import cv2
import numpy as np

from unips_system.core.exceptions import DatasetWriteError, SceneLoadError
from unips_system.simulator.camera import CameraSpec
from unips_system.simulator.renderer import MultiIllumSet
from unips_system.simulator.scene import Light, SceneSpec

logger = logging.getLogger(__name__)

NORMALS_MAGIC = b"NRM1"
GEO_MAGIC = b"GEOF"
NORMALS_FILE = "normals.f32"
MASK_FILE = "mask.png"
META_FILE = "meta.json"
GEO_FEATURE_FILE = "geo_feat.f32"
MANIFEST_FILE = "manifest.json"
SPLITS = ("train", "val", "test")


def image_file(k: int) -> str:
    return f"img_{k:02d}.png"


# --- Raw float maps ---

def write_normal_map(normals: np.ndarray, path: str):
    """Header magic "NRM1", u32 H, u32 W, then H*W*3 little-endian f32 in row-major order."""
    normals = np.ascontiguousarray(normals, dtype="<f4")
    height, width = normals.shape[:2]
    with open(path, "wb") as handle:
        handle.write(NORMALS_MAGIC + struct.pack("<II", height, width) + normals.tobytes())


def read_normal_map(path: str) -> np.ndarray:
    name = os.path.basename(path)
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as e:
        raise SceneLoadError(f"Missing or unreadable {name} at {path}: {e}") from e
    if len(blob) < 12 or blob[:4] != NORMALS_MAGIC:
        raise SceneLoadError(f"{name} at {path} does not start with the {NORMALS_MAGIC!r} header")
    height, width = struct.unpack("<II", blob[4:12])
    expected = 12 + height * width * 3 * 4
    if len(blob) != expected:
        raise SceneLoadError(f"{name} at {path} holds {len(blob)} bytes, expected {expected} for {height}x{width}")
    return np.frombuffer(blob[12:], dtype="<f4").reshape(height, width, 3).astype(np.float32)


def write_geo_features(features: np.ndarray, path: str):
    """Header magic "GEOF", u32 K, H', W', C, then little-endian f32 payload."""
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 4:
        raise DatasetWriteError(f"Geometry features must be (K, H', W', C), got {features.shape}")
    try:
        with open(path, "wb") as handle:
            handle.write(GEO_MAGIC + struct.pack("<IIII", *features.shape) + features.tobytes())
    except OSError as e:
        raise DatasetWriteError(f"Failed to write {path}: {e}") from e


def read_geo_features(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as e:
        raise SceneLoadError(f"Missing or unreadable {GEO_FEATURE_FILE} at {path}: {e}") from e
    if len(blob) < 20 or blob[:4] != GEO_MAGIC:
        raise SceneLoadError(f"{path} does not start with the {GEO_MAGIC!r} header")
    shape = struct.unpack("<IIII", blob[4:20])
    expected = 20 + int(np.prod(shape)) * 4
    if len(blob) != expected:
        raise SceneLoadError(f"{path} holds {len(blob)} bytes, expected {expected} for shape {shape}")
    return np.frombuffer(blob[20:], dtype="<f4").reshape(shape).astype(np.float32)


# --- PNG images ---

def write_image16(image: np.ndarray, path: str) -> bool:
    """Linear radiance in [0, 1] to a 16-bit RGB PNG; returns True when values had to be clipped."""
    clipped = bool(np.any(image > 1.0))
    quantized = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if not cv2.imwrite(path, cv2.cvtColor(quantized, cv2.COLOR_RGB2BGR)):
        raise DatasetWriteError(f"Failed to write image {path}")
    return clipped


def read_image16(path: str) -> np.ndarray:
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise SceneLoadError(f"Missing or unreadable image {os.path.basename(path)} at {path}")
    if raw.dtype != np.uint16 or raw.ndim != 3 or raw.shape[2] != 3:
        raise SceneLoadError(f"{path} is not a 16-bit RGB PNG (dtype {raw.dtype}, shape {raw.shape})")
    return cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).astype(np.float32) / 65535.0


# --- Scene directories ---

def write_scene(scene_set: MultiIllumSet, directory: str, extra_meta: Optional[dict] = None):
    try:
        os.makedirs(directory, exist_ok=True)
        clipped = False
        for k in range(scene_set.num_images):
            clipped |= write_image16(scene_set.images[k], os.path.join(directory, image_file(k)))
        if clipped:
            logger.warning(f"Radiance above 1.0 clipped while writing {directory}")
        write_normal_map(scene_set.normals, os.path.join(directory, NORMALS_FILE))
        if not cv2.imwrite(os.path.join(directory, MASK_FILE), scene_set.mask.astype(np.uint8) * 255):
            raise DatasetWriteError(f"Failed to write {os.path.join(directory, MASK_FILE)}")
        meta = {
            "num_images": scene_set.num_images,
            "height": scene_set.height,
            "width": scene_set.width,
            "camera": scene_set.camera.to_dict(),
            "lights": [[light.to_dict() for light in rig] for rig in scene_set.lights],
            "seed": scene_set.seed,
            "exposure": scene_set.exposure,
            "scene": scene_set.scene.to_dict() if scene_set.scene is not None else None,
        }
        meta.update(extra_meta or {})
        with open(os.path.join(directory, META_FILE), "w", encoding="utf-8") as handle:
            json.dump(meta, handle, indent=2, sort_keys=True)
    except OSError as e:
        raise DatasetWriteError(f"Failed to write scene to {directory}: {e}") from e


def read_meta(directory: str) -> dict:
    path = os.path.join(directory, META_FILE)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except OSError as e:
        raise SceneLoadError(f"Missing or unreadable {META_FILE} at {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise SceneLoadError(f"Corrupt {META_FILE} at {path}:{e.lineno}:{e.colno}: {e.msg}") from e


def read_scene(directory: str) -> MultiIllumSet:
    if not os.path.isdir(directory):
        raise SceneLoadError(f"Scene directory {directory} does not exist")
    meta = read_meta(directory)
    try:
        count = int(meta["num_images"])
        camera = CameraSpec.from_dict(meta["camera"])
        lights = [[Light.from_dict(item) for item in rig] for rig in meta.get("lights", [])]
        scene = SceneSpec.from_dict(meta["scene"]) if meta.get("scene") else None
    except (KeyError, TypeError, ValueError) as e:
        raise SceneLoadError(f"Corrupt {META_FILE} in {directory}: {e}") from e
    images = np.stack([read_image16(os.path.join(directory, image_file(k))) for k in range(count)])
    normals = read_normal_map(os.path.join(directory, NORMALS_FILE))
    mask_path = os.path.join(directory, MASK_FILE)
    mask = cv2.imread(mask_path, cv2.IMREAD_GRAYSCALE)
    if mask is None:
        raise SceneLoadError(f"Missing or unreadable {MASK_FILE} at {mask_path}")
    geo_path = os.path.join(directory, GEO_FEATURE_FILE)
    geo_features = read_geo_features(geo_path) if os.path.exists(geo_path) else None
    return MultiIllumSet(images=images, normals=normals, mask=mask > 127, camera=camera, lights=lights,
                         seed=int(meta.get("seed", 0)), exposure=float(meta.get("exposure", 1.0)), scene=scene,
                         geo_features=geo_features)


# --- Dataset manifests ---

@dataclass
class ManifestEntry:
    directory: str
    seed: int
    split: str
    projection: str
    focal_length_mm: Optional[float] = None

    def to_dict(self) -> dict:
        return {"dir": self.directory, "seed": self.seed, "split": self.split,
                "projection": self.projection, "focal_length_mm": self.focal_length_mm}


@dataclass
class DatasetManifest:
    root: str
    entries: List[ManifestEntry]
    images_per_scene: int
    height: int
    width: int
    seed: int = 0
    generation: Dict = field(default_factory=dict)

    def split(self, name: str) -> List[ManifestEntry]:
        return [entry for entry in self.entries if entry.split == name]

    def scene_path(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.directory)

    def load(self, entry: ManifestEntry) -> MultiIllumSet:
        return read_scene(self.scene_path(entry))

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "seed": self.seed,
            "n_scenes": len(self.entries),
            "images_per_scene": self.images_per_scene,
            "height": self.height,
            "width": self.width,
            "generation": self.generation,
            "scenes": [entry.to_dict() for entry in self.entries],
        }


def write_manifest(manifest: DatasetManifest) -> str:
    path = os.path.join(manifest.root, MANIFEST_FILE)
    try:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
            handle.write("\n")
    except OSError as e:
        raise DatasetWriteError(f"Failed to write manifest {path}: {e}") from e
    return path


def load_manifest(path: str) -> DatasetManifest:
    """Accepts the manifest file or the dataset directory that holds it."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_FILE)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except OSError as e:
        raise SceneLoadError(f"Missing or unreadable manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise SceneLoadError(f"Corrupt manifest {path}:{e.lineno}:{e.colno}: {e.msg}") from e
    try:
        entries = [ManifestEntry(directory=item["dir"], seed=int(item["seed"]), split=item["split"],
                                 projection=item["projection"], focal_length_mm=item.get("focal_length_mm"))
                   for item in data["scenes"]]
        return DatasetManifest(root=os.path.dirname(os.path.abspath(path)), entries=entries,
                               images_per_scene=int(data["images_per_scene"]), height=int(data["height"]),
                               width=int(data["width"]), seed=int(data.get("seed", 0)),
                               generation=data.get("generation", {}))
    except (KeyError, TypeError, ValueError) as e:
        raise SceneLoadError(f"Manifest {path} is missing required fields: {e}") from e
