# unips_system/core/serialization.py

import hashlib
import json
import logging
import os
import struct
import tempfile
from collections import OrderedDict
from typing import Dict, Tuple

import numpy as np

from unips_system.core.exceptions import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"UNIPSCKPT"
VERSION = 1


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def array_digest(arrays: Dict[str, np.ndarray]) -> str:
    """Order-independent digest of named float32 payloads (used to pin frozen weights)."""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    return digest.hexdigest()


def dumps_container(params: Dict[str, np.ndarray], config: dict) -> bytes:
    """
    Serialize parameters into the container layout:
    magic, u32 version, u32 config length + JSON, u32 record count, then per record
    u32 name length, name, u32 rank, rank x u32 dims, little-endian f32 payload.
    """
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(config_bytes)), config_bytes,
              struct.pack("<I", len(params))]
    for name, array in params.items():
        array = np.ascontiguousarray(array, dtype="<f4")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def loads_container(blob: bytes, source: str = "<bytes>") -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    offset = 0

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(blob):
            raise CheckpointError(f"{source}: truncated container at byte {offset}")
        chunk = blob[offset:offset + count]
        offset += count
        return chunk

    def take_u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint container (bad magic)")
    version = take_u32()
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported container version {version}")
    try:
        config = json.loads(take(take_u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: corrupt embedded config block: {e}") from e

    params = OrderedDict()
    for _ in range(take_u32()):
        name = take(take_u32()).decode("utf-8")
        rank = take_u32()
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(take(4 * count), dtype="<f4")
        params[name] = payload.reshape(dims).astype(np.float32)
    if offset != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - offset} trailing bytes after last record")
    return params, config


def atomic_write_bytes(path: str, blob: bytes):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(blob)
        os.replace(tmp_path, path)
    except OSError:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def save_container(path: str, params: Dict[str, np.ndarray], config: dict):
    try:
        atomic_write_bytes(path, dumps_container(params, config))
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint written to {path} ({len(params)} tensors)")


def load_container(path: str) -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as e:
        raise CheckpointError(f"Failed to read checkpoint {path}: {e}") from e
    return loads_container(blob, source=path)
