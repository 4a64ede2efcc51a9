# unips_system/tests/renderer_test.py

import math

import numpy as np
import pytest

from unips_system.config.schemas import GenerationConfig
from unips_system.core.exceptions import ContractError, ParameterError
from unips_system.simulator.camera import ORTHOGRAPHIC, PERSPECTIVE, CameraSpec
from unips_system.simulator.renderer import render, render_scene
from unips_system.simulator.scene import (
    AMBIENT,
    DIRECTIONAL,
    Light,
    Material,
    SceneObject,
    SceneSpec,
    _sample_focal,
    sample_scene,
)
from unips_system.tests.conftest import directional_rigs, sphere_scene


# --- Camera ---

def test_perspective_focal_range_is_enforced():
    with pytest.raises(ParameterError):
        CameraSpec(projection=PERSPECTIVE, height=16, width=16, focal_length_mm=10.0)
    with pytest.raises(ParameterError):
        CameraSpec(projection=PERSPECTIVE, height=16, width=16)
    with pytest.raises(ParameterError):
        CameraSpec(projection="fisheye", height=16, width=16)


def test_principal_ray_is_optical_axis_and_corner_angle_matches():
    camera = CameraSpec(projection=PERSPECTIVE, height=48, width=64, focal_length_mm=35.0)
    center = camera.ray_directions(np.array(24.0), np.array(32.0))
    np.testing.assert_allclose(center, [0.0, 0.0, 1.0], atol=1e-12)

    corner = camera.ray_directions(np.array(0.0), np.array(0.0))
    angle = math.acos(float(corner[2]))
    assert angle == pytest.approx(camera.corner_ray_angle(), abs=1e-6)
    half_diagonal = 0.5 * math.hypot(36.0, 27.0)
    assert camera.corner_ray_angle() == pytest.approx(math.atan(half_diagonal / 35.0), abs=1e-12)


def test_orthographic_rays_are_parallel():
    camera = CameraSpec(projection=ORTHOGRAPHIC, height=8, width=8)
    origins, dirs = camera.pixel_rays()
    np.testing.assert_array_equal(dirs[..., 2], 1.0)
    assert len(np.unique(origins[..., 0])) == 8
    assert camera.corner_ray_angle() == 0.0


# --- Shading ---

def test_lambertian_sphere_matches_closed_form(lambertian_sphere):
    result = render(lambertian_sphere, light_index=0)
    light = lambertian_sphere.rigs[0][0]
    albedo = lambertian_sphere.objects[0].material.albedo
    expected = albedo * np.clip(result.normals @ light.direction, 0.0, None)[..., None]

    rows, cols = np.nonzero(result.mask)
    pick = np.random.default_rng(0).choice(len(rows), size=100, replace=False)
    np.testing.assert_allclose(result.image[rows[pick], cols[pick]], expected[rows[pick], cols[pick]], atol=1e-5)


def test_light_behind_object_leaves_only_ambient():
    rig = [Light(kind=DIRECTIONAL, intensity=np.ones(3), direction=np.array([0.0, 0.0, 1.0])),
           Light(kind=AMBIENT, intensity=np.full(3, 0.1))]
    scene = sphere_scene([rig])
    result = render(scene)
    albedo = scene.objects[0].material.albedo
    np.testing.assert_allclose(result.image[result.mask], np.tile(0.1 * albedo, (result.mask.sum(), 1)),
                               atol=1e-6)


def test_mask_consistency(lambertian_sphere):
    scene_set = render_scene(lambertian_sphere)
    norms = np.linalg.norm(scene_set.normals, axis=-1)
    np.testing.assert_allclose(norms[scene_set.mask], 1.0, atol=1e-5)
    assert np.all(scene_set.normals[~scene_set.mask] == 0.0)
    assert np.all(scene_set.images[:, ~scene_set.mask] == 0.0)
    assert scene_set.mask.any() and not scene_set.mask.all()


def test_off_axis_cube_face_view_spread_shrinks_with_long_lens():
    def face_view_spread(focal):
        camera = CameraSpec(projection=PERSPECTIVE, height=48, width=48, focal_length_mm=focal)
        cube = SceneObject(kind="box", center=np.array([0.45, 0.35, 0.0]), scale=np.full(3, 0.3),
                           material=Material(albedo=np.full(3, 0.5)))
        rig = [Light(kind=DIRECTIONAL, intensity=np.ones(3), direction=np.array([0.0, 0.0, -1.0]))]
        scene = SceneSpec(objects=[cube], rigs=[rig], camera=camera, shadows=False)
        result = render(scene)
        face = result.mask & (result.normals[..., 2] < -0.999)
        rows, cols = np.nonzero(face)
        view = -camera.ray_directions(rows + 0.5, cols + 0.5)
        n_dot_v = np.einsum("ij,ij->i", result.normals[face].astype(np.float64), view)
        assert face.sum() > 20
        return float(n_dot_v.max() - n_dot_v.min())

    assert face_view_spread(20.0) > 1e-2
    assert face_view_spread(1000.0) <= 1e-3


def test_cast_shadow_darkens_the_ground():
    rig = [Light(kind=DIRECTIONAL, intensity=np.ones(3), direction=np.array([0.0, 0.0, -1.0]))]
    lit = render(sphere_scene([rig], radius=0.4, ground_plane=True, shadows=False))
    shadowed = render(sphere_scene([rig], radius=0.4, ground_plane=True, shadows=True))
    # sphere pixels are unaffected, the backdrop behind it is hidden either way
    np.testing.assert_allclose(lit.image, shadowed.image, atol=1e-6)

    oblique = [Light(kind=DIRECTIONAL, intensity=np.ones(3), direction=np.array([0.6, 0.0, -0.8]))]
    lit = render(sphere_scene([oblique], radius=0.4, ground_plane=True, shadows=False))
    shadowed = render(sphere_scene([oblique], radius=0.4, ground_plane=True, shadows=True))
    assert shadowed.image.sum() < lit.image.sum()


def test_exposure_normalization_caps_peak():
    scene_set = render_scene(sphere_scene(directional_rigs(intensity=3.0)))
    assert scene_set.images.max() == pytest.approx(1.0, abs=1e-6)
    assert scene_set.exposure < 1.0


def test_render_and_set_contracts(lambertian_sphere):
    with pytest.raises(ContractError):
        render(lambertian_sphere, light_index=4)
    scene_set = render_scene(lambertian_sphere)
    with pytest.raises(ContractError):
        scene_set.first_k(0)
    with pytest.raises(ContractError):
        scene_set.first_k(5)
    reordered = scene_set.permuted([2, 0, 3, 1])
    np.testing.assert_array_equal(reordered.images[0], scene_set.images[2])
    assert reordered.lights[0] is scene_set.lights[2]
    assert scene_set.first_k(2).num_images == 2


# --- Scene sampling ---

def test_sample_scene_is_deterministic():
    config = GenerationConfig(height=16, width=16)
    assert sample_scene(7, config).to_dict() == sample_scene(7, config).to_dict()
    assert sample_scene(7, config).to_dict() != sample_scene(8, config).to_dict()


def test_short_focal_fraction():
    config = GenerationConfig(perspective_short_fraction=0.73)
    rng = np.random.default_rng(0)
    focals = np.array([_sample_focal(rng, config) for _ in range(10000)])
    assert np.mean(focals < 70.0) == pytest.approx(0.73, abs=0.02)
    assert focals.min() >= 20.0 and focals.max() <= 1000.0


def test_constrained_sampling_gives_requested_elements():
    config = GenerationConfig(height=16, width=16, primitives=["sphere"], objects_per_scene=(1, 1),
                              images_per_scene=3, point_light_probability=0.0, ambient_probability=0.0,
                              ground_plane_probability=0.0, force_projection="orthographic")
    scene = sample_scene(5, config)
    assert [o.kind for o in scene.objects] == ["sphere"]
    assert scene.num_images == 3
    assert all(len(rig) == 1 and rig[0].kind == DIRECTIONAL for rig in scene.rigs)
    assert scene.camera.projection == ORTHOGRAPHIC
    assert not scene.ground_plane
