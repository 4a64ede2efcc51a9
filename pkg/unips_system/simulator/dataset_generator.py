# unips_system/simulator/dataset_generator.py

import logging
import os
import re
import shutil
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Tuple

import numpy as np

from unips_system.config.schemas import RESOLVED_CONFIG_FILE, GenerationConfig
from unips_system.config.settings import get_threads
from unips_system.core.exceptions import DatasetWriteError
from unips_system.simulator.camera import ORTHOGRAPHIC, PERSPECTIVE
from unips_system.simulator.renderer import render_scene
from unips_system.simulator.scene import sample_scene
from unips_system.simulator.scene_io import (
    MANIFEST_FILE,
    DatasetManifest,
    ManifestEntry,
    write_manifest,
    write_scene,
)

logger = logging.getLogger(__name__)

SCENE_DIR_PATTERN = re.compile(r"scene_\d{4,}")


def scene_dir_name(index: int) -> str:
    return f"scene_{index:04d}"


def plan_dataset(config: GenerationConfig, seed: int) -> List[Tuple[int, int, str, str]]:
    """
    Deterministic (index, scene seed, projection, split) plan.

    Orthographic scenes are assigned by quota rather than per-scene coin flips so
    the manifest carries exactly round(ortho_fraction * N) of them.
    """
    n = config.n_scenes
    rng = np.random.default_rng(seed)
    scene_seeds = rng.integers(0, 2 ** 31 - 1, size=n)

    if config.force_projection is not None:
        projections = [config.force_projection] * n
    else:
        n_ortho = int(round(config.ortho_fraction * n))
        ortho = set(rng.permutation(n)[:n_ortho].tolist())
        projections = [ORTHOGRAPHIC if i in ortho else PERSPECTIVE for i in range(n)]

    n_val = int(round(config.val_fraction * n))
    n_test = int(round(config.test_fraction * n))
    order = rng.permutation(n).tolist()
    splits = ["train"] * n
    for i in order[:n_val]:
        splits[i] = "val"
    for i in order[n_val:n_val + n_test]:
        splits[i] = "test"
    return [(i, int(scene_seeds[i]), projections[i], splits[i]) for i in range(n)]


def _generate_one(args) -> dict:
    index, scene_seed, projection, split, config_data, out_dir = args
    config = GenerationConfig.model_validate(config_data)
    scene = sample_scene(scene_seed, config, projection=projection)
    scene_set = render_scene(scene)
    directory = scene_dir_name(index)
    write_scene(scene_set, os.path.join(out_dir, directory), extra_meta={"split": split})
    return ManifestEntry(directory=directory, seed=scene_seed, split=split, projection=projection,
                         focal_length_mm=scene.camera.focal_length_mm).to_dict()


def is_generated(name: str) -> bool:
    return name in (MANIFEST_FILE, RESOLVED_CONFIG_FILE) or SCENE_DIR_PATTERN.fullmatch(name) is not None


def prepare_output_dir(out_dir: str, overwrite: bool):
    """
    Refuse directories holding anything the generator does not write. With
    ``overwrite``, remove only the generator's own scene directories and files.
    """
    if not os.path.exists(out_dir):
        return
    if not os.path.isdir(out_dir):
        raise DatasetWriteError(f"{out_dir} exists and is not a directory")
    existing = sorted(os.listdir(out_dir))
    foreign = [name for name in existing if not is_generated(name)]
    if foreign:
        raise DatasetWriteError(f"{out_dir} is not empty and holds files that are not part of a generated "
                                f"dataset: {', '.join(foreign[:5])}")
    if not existing:
        return
    manifest_path = os.path.join(out_dir, MANIFEST_FILE)
    if not overwrite:
        if os.path.exists(manifest_path):
            raise DatasetWriteError(f"{manifest_path} already exists; pass overwrite to regenerate")
        raise DatasetWriteError(f"{out_dir} holds an unfinished dataset; pass overwrite to regenerate")
    for name in existing:
        path = os.path.join(out_dir, name)
        if os.path.isdir(path):
            shutil.rmtree(path)
        else:
            os.remove(path)
    logger.info(f"Removed {len(existing)} generated entries from {out_dir}")


def gen_dataset(config: GenerationConfig, out_dir: str, seed: Optional[int] = None,
                overwrite: bool = False, workers: Optional[int] = None) -> DatasetManifest:
    """Render ``config.n_scenes`` scenes into ``out_dir`` and write the manifest last."""
    seed = config.seed if seed is None else seed
    prepare_output_dir(out_dir, overwrite)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise DatasetWriteError(f"Cannot create dataset directory {out_dir}: {e}") from e

    plan = plan_dataset(config, seed)
    config_data = config.model_dump(mode="json")
    jobs = [(i, s, projection, split, config_data, out_dir) for i, s, projection, split in plan]
    workers = workers or get_threads()
    logger.info(f"Generating {len(jobs)} scenes x {config.images_per_scene} images "
                f"at {config.height}x{config.width} into {out_dir} with {workers} worker(s)")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_generate_one, jobs))
    else:
        rows = [_generate_one(job) for job in jobs]

    entries = [ManifestEntry(directory=r["dir"], seed=r["seed"], split=r["split"], projection=r["projection"],
                             focal_length_mm=r["focal_length_mm"]) for r in rows]
    manifest = DatasetManifest(root=os.path.abspath(out_dir), entries=entries,
                               images_per_scene=config.images_per_scene, height=config.height,
                               width=config.width, seed=seed, generation=config_data)
    write_manifest(manifest)
    counts = {split: len(manifest.split(split)) for split in ("train", "val", "test")}
    logger.info(f"Dataset written: {counts}, orthographic scenes: "
                f"{sum(e.projection == ORTHOGRAPHIC for e in entries)}")
    return manifest
