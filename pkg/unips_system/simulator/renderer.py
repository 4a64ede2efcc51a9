# unips_system/simulator/renderer.py

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from unips_system.core.exceptions import ContractError, RenderError
from unips_system.simulator.camera import CameraSpec
from unips_system.simulator.scene import (
    AMBIENT,
    BACKDROP_DEPTH,
    DIRECTIONAL,
    POINT,
    Light,
    SceneObject,
    SceneSpec,
)

logger = logging.getLogger(__name__)

T_MIN = 1e-6
SHADOW_OFFSET = 1e-4
GROUND_HALF_EXTENT = 1.0
MARCH_STEPS = 96
BISECTION_ITERS = 32


@dataclass
class RenderResult:
    image: np.ndarray
    normals: np.ndarray
    mask: np.ndarray


@dataclass
class MultiIllumSet:
    """
    K images of one fixed-view scene with ground-truth camera-space normals.

    ``lights`` keeps the per-image light records; they serve the calibrated
    baseline only and are never fed to the network.
    """

    images: np.ndarray
    normals: np.ndarray
    mask: np.ndarray
    camera: CameraSpec
    lights: List[List[Light]] = field(default_factory=list)
    seed: int = 0
    exposure: float = 1.0
    scene: Optional[SceneSpec] = None
    geo_features: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.normals = np.asarray(self.normals, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.images.ndim != 4 or self.images.shape[0] < 1 or self.images.shape[-1] != 3:
            raise ContractError(f"Images must be (K, H, W, 3) with K >= 1, got {self.images.shape}")
        height, width = self.images.shape[1:3]
        if self.normals.shape != (height, width, 3) or self.mask.shape != (height, width):
            raise ContractError(f"Normals {self.normals.shape} and mask {self.mask.shape} "
                                f"do not match images {self.images.shape}")
        if (height, width) != (self.camera.height, self.camera.width):
            raise ContractError(f"Camera is {self.camera.height}x{self.camera.width}, images are {height}x{width}")

    @property
    def num_images(self) -> int:
        return self.images.shape[0]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def first_k(self, k: int) -> "MultiIllumSet":
        if not 1 <= k <= self.num_images:
            raise ContractError(f"Requested {k} images from a set of {self.num_images}")
        return self.permuted(list(range(k)))

    def permuted(self, order: Sequence[int]) -> "MultiIllumSet":
        order = list(order)
        lights = [self.lights[i] for i in order] if self.lights else []
        return MultiIllumSet(images=self.images[order], normals=self.normals, mask=self.mask,
                             camera=self.camera, lights=lights, seed=self.seed,
                             exposure=self.exposure, scene=self.scene,
                             geo_features=None if self.geo_features is None else self.geo_features[order])


# --- Intersection ---

def _slab(origins: np.ndarray, dirs: np.ndarray, half: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    safe = np.where(np.abs(dirs) < 1e-12, np.where(dirs < 0, -1e-12, 1e-12), dirs)
    t0 = (-half - origins) / safe
    t1 = (half - origins) / safe
    return np.minimum(t0, t1), np.maximum(t0, t1)


def _intersect_sphere(radius: float, o: np.ndarray, d: np.ndarray, t_min: float):
    b = np.einsum("ij,ij->i", o, d)
    c = np.einsum("ij,ij->i", o, o) - radius * radius
    disc = b * b - c
    hit = disc >= 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t_near, t_far = -b - root, -b + root
    t = np.where(t_near > t_min, t_near, np.where(t_far > t_min, t_far, np.inf))
    t = np.where(hit, t, np.inf)
    points = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    return t, points / radius


def _intersect_box(half: np.ndarray, o: np.ndarray, d: np.ndarray, t_min: float):
    t_lo, t_hi = _slab(o, d, half)
    near, far = t_lo.max(axis=1), t_hi.min(axis=1)
    hit = (near <= far) & (far > t_min)
    entering = near > t_min
    t = np.where(hit, np.where(entering, near, far), np.inf)
    axis = np.where(entering, t_lo.argmax(axis=1), t_hi.argmin(axis=1))
    rows = np.arange(o.shape[0])
    along = np.sign(d[rows, axis])
    normals = np.zeros_like(o)
    normals[rows, axis] = np.where(entering, -along, along)
    return t, normals


def _superellipsoid_fn(obj: SceneObject) -> Callable[[np.ndarray], np.ndarray]:
    radii = obj.scale
    e1, e2 = obj.exponents

    def fn(p):
        q = np.abs(p / radii)
        xy = q[..., 0] ** (2.0 / e2) + q[..., 1] ** (2.0 / e2)
        return xy ** (e2 / e1) + q[..., 2] ** (2.0 / e1) - 1.0

    return fn


def _torus_fn(obj: SceneObject) -> Callable[[np.ndarray], np.ndarray]:
    major, minor = obj.scale[0], obj.scale[1]

    def fn(p):
        rho = np.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2)
        return (rho - major) ** 2 + p[..., 2] ** 2 - minor * minor

    return fn


def _gradient(fn: Callable[[np.ndarray], np.ndarray], points: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.empty_like(points)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        grad[:, axis] = (fn(points + step) - fn(points - step)) / (2.0 * h)
    return grad / np.maximum(np.linalg.norm(grad, axis=1, keepdims=True), 1e-300)


def _march(fn: Callable[[np.ndarray], np.ndarray], half: np.ndarray, o: np.ndarray, d: np.ndarray,
           t_min: float):
    """First sign change of an implicit surface inside its bounding box, refined by bisection."""
    t = np.full(o.shape[0], np.inf)
    normals = np.zeros_like(o)
    t_lo, t_hi = _slab(o, d, half * 1.001)
    near = np.maximum(t_lo.max(axis=1), t_min)
    far = t_hi.min(axis=1)
    candidates = np.nonzero(near < far)[0]
    if candidates.size == 0:
        return t, normals

    oc, dc = o[candidates], d[candidates]
    fractions = np.linspace(0.0, 1.0, MARCH_STEPS)
    ts = near[candidates, None] + (far - near)[candidates, None] * fractions[None, :]
    inside = fn(oc[:, None, :] + ts[..., None] * dc[:, None, :]) <= 0
    rows = np.nonzero(inside.any(axis=1))[0]
    if rows.size == 0:
        return t, normals

    first = inside[rows].argmax(axis=1)
    hi = ts[rows, first]
    lo = ts[rows, np.maximum(first - 1, 0)]
    oh, dh = oc[rows], dc[rows]
    for _ in range(BISECTION_ITERS):
        mid = 0.5 * (lo + hi)
        outside = fn(oh + mid[:, None] * dh) > 0
        lo = np.where(outside, mid, lo)
        hi = np.where(outside, hi, mid)
    hits = candidates[rows]
    t[hits] = hi
    normals[hits] = _gradient(fn, oh + hi[:, None] * dh)
    return t, normals


def intersect_object(obj: SceneObject, depth: float, origins: np.ndarray, dirs: np.ndarray,
                     t_min: float = T_MIN) -> Tuple[np.ndarray, np.ndarray]:
    """Hit distance (inf on miss) and camera-space unit normal for rays against one primitive."""
    center = obj.center + np.array([0.0, 0.0, depth])
    # Rows are vectors: local = world @ R, world = local @ R.T.
    o = (origins - center) @ obj.rotation
    d = dirs @ obj.rotation
    if obj.kind == "sphere":
        t, n = _intersect_sphere(float(obj.scale[0]), o, d, t_min)
    elif obj.kind == "box":
        t, n = _intersect_box(obj.scale, o, d, t_min)
    elif obj.kind == "superellipsoid":
        t, n = _march(_superellipsoid_fn(obj), obj.scale, o, d, t_min)
    elif obj.kind == "torus":
        major, minor = obj.scale[0], obj.scale[1]
        t, n = _march(_torus_fn(obj), np.array([major + minor, major + minor, minor]), o, d, t_min)
    else:
        raise RenderError(f"Unknown primitive '{obj.kind}'")
    return t, n @ obj.rotation.T


def intersect_ground(depth: float, origins: np.ndarray, dirs: np.ndarray,
                     t_min: float = T_MIN) -> Tuple[np.ndarray, np.ndarray]:
    plane_z = depth + BACKDROP_DEPTH
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (plane_z - origins[:, 2]) / dz
    points = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    inside = (np.abs(points[:, 0]) <= GROUND_HALF_EXTENT) & (np.abs(points[:, 1]) <= GROUND_HALF_EXTENT)
    t = np.where((dz > 1e-12) & inside & (t > t_min), t, np.inf)
    normals = np.zeros_like(origins)
    normals[:, 2] = -1.0
    return t, normals


def trace(scene: SceneSpec, camera: CameraSpec, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit per ray: distance, camera-space normal and surface index (-1 miss, len(objects) ground)."""
    depth = camera.scene_distance
    best_t = np.full(origins.shape[0], np.inf)
    best_n = np.zeros_like(origins)
    index = np.full(origins.shape[0], -1)
    surfaces = [(i, obj) for i, obj in enumerate(scene.objects)]
    for i, obj in surfaces:
        t, n = intersect_object(obj, depth, origins, dirs)
        closer = t < best_t
        best_t[closer], best_n[closer], index[closer] = t[closer], n[closer], i
    if scene.ground_plane:
        t, n = intersect_ground(depth, origins, dirs)
        closer = t < best_t
        best_t[closer], best_n[closer], index[closer] = t[closer], n[closer], len(scene.objects)
    return best_t, best_n, index


def _occluded(scene: SceneSpec, depth: float, points: np.ndarray, to_light: np.ndarray,
              max_dist: np.ndarray) -> np.ndarray:
    blocked = np.zeros(points.shape[0], dtype=bool)
    for obj in scene.objects:
        t, _ = intersect_object(obj, depth, points, to_light)
        blocked |= t < max_dist
    if scene.ground_plane:
        t, _ = intersect_ground(depth, points, to_light)
        blocked |= t < max_dist
    return blocked


# --- Shading ---

@dataclass
class _Geometry:
    points: np.ndarray
    normals: np.ndarray
    view: np.ndarray
    index: np.ndarray
    mask: np.ndarray


def _trace_camera(scene: SceneSpec, camera: CameraSpec) -> _Geometry:
    origins, dirs = camera.pixel_rays()
    origins, dirs = origins.reshape(-1, 3), dirs.reshape(-1, 3)
    t, normals, index = trace(scene, camera, origins, dirs)
    hit = np.isfinite(t)
    facing = np.einsum("ij,ij->i", normals, dirs) > 0
    normals[facing] *= -1.0
    points = origins + np.where(hit, t, 0.0)[:, None] * dirs
    return _Geometry(points=points[hit], normals=normals[hit], view=-dirs[hit], index=index[hit],
                     mask=hit.reshape(camera.height, camera.width))


def _material_tables(scene: SceneSpec):
    materials = [obj.material for obj in scene.objects] + [scene.ground_material]
    albedo = np.stack([m.albedo for m in materials])
    specular = np.array([m.specular for m in materials])
    shininess = np.array([m.shininess for m in materials])
    return albedo, specular, shininess


def shade(scene: SceneSpec, camera: CameraSpec, geometry: _Geometry, rig: Sequence[Light]) -> np.ndarray:
    """Direct lighting for one rig: Lambertian + Blinn-Phong per light, hard shadows, constant ambient."""
    albedo_table, specular_table, shininess_table = _material_tables(scene)
    albedo = albedo_table[geometry.index]
    ks = specular_table[geometry.index][:, None]
    shininess = shininess_table[geometry.index][:, None]
    n, x = geometry.normals, geometry.points
    depth = camera.scene_distance
    radiance = np.zeros_like(x)

    for light in rig:
        if light.kind == AMBIENT:
            radiance += albedo * light.intensity
            continue
        if light.kind == DIRECTIONAL:
            to_light = np.broadcast_to(light.direction, x.shape)
            dist = np.full(x.shape[0], np.inf)
            attenuation = np.ones(x.shape[0])
        elif light.kind == POINT:
            position = light.position + np.array([0.0, 0.0, depth])
            offset = position - x
            dist = np.linalg.norm(offset, axis=1)
            to_light = offset / dist[:, None]
            reference = max(float(np.linalg.norm(light.position)), 1e-6)
            attenuation = (reference / dist) ** light.falloff
        else:
            raise RenderError(f"Unknown light kind '{light.kind}'")

        n_dot_l = np.einsum("ij,ij->i", n, to_light)
        lit = n_dot_l > 0
        if scene.shadows and lit.any():
            origin = x[lit] + SHADOW_OFFSET * n[lit]
            blocked = _occluded(scene, depth, origin, np.ascontiguousarray(to_light[lit]), dist[lit])
            lit[np.nonzero(lit)[0][blocked]] = False
        half = to_light + geometry.view
        half /= np.maximum(np.linalg.norm(half, axis=1, keepdims=True), 1e-12)
        n_dot_h = np.clip(np.einsum("ij,ij->i", n, half), 0.0, None)[:, None]
        diffuse = albedo * np.clip(n_dot_l, 0.0, None)[:, None]
        specular = ks * n_dot_h ** shininess
        weight = (lit * attenuation)[:, None]
        radiance += (diffuse + specular) * light.intensity * weight

    if not np.all(np.isfinite(radiance)):
        raise RenderError(f"Non-finite radiance in scene seed {scene.seed}")
    return radiance


def _scatter(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    full = np.zeros(mask.shape + (values.shape[-1],), dtype=np.float64)
    full[mask] = values
    return full


def render(scene: SceneSpec, camera: Optional[CameraSpec] = None, light_index: int = 0) -> RenderResult:
    """Render image ``light_index`` of ``scene``; missed pixels carry zero radiance and zero normals."""
    camera = camera or scene.camera
    if not 0 <= light_index < scene.num_images:
        raise ContractError(f"Light index {light_index} outside [0, {scene.num_images})")
    geometry = _trace_camera(scene, camera)
    radiance = shade(scene, camera, geometry, scene.rigs[light_index])
    return RenderResult(image=_scatter(radiance, geometry.mask).astype(np.float32),
                        normals=_scatter(geometry.normals, geometry.mask).astype(np.float32),
                        mask=geometry.mask)


def render_scene(scene: SceneSpec, normalize_exposure: bool = True) -> MultiIllumSet:
    """Render every rig of ``scene``, tracing primary rays once; exposure scales the peak to at most 1."""
    camera = scene.camera
    geometry = _trace_camera(scene, camera)
    images = np.stack([_scatter(shade(scene, camera, geometry, rig), geometry.mask) for rig in scene.rigs])
    exposure = 1.0
    peak = float(images.max(initial=0.0))
    if normalize_exposure and peak > 1.0:
        exposure = 1.0 / peak
        images *= exposure
    logger.debug(f"Rendered scene seed {scene.seed}: {scene.num_images} images, "
                 f"{int(geometry.mask.sum())} surface pixels, exposure {exposure:.4f}")
    return MultiIllumSet(images=images, normals=_scatter(geometry.normals, geometry.mask),
                         mask=geometry.mask, camera=camera, lights=[list(rig) for rig in scene.rigs],
                         seed=scene.seed, exposure=exposure, scene=scene)
