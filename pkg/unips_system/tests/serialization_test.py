# unips_system/tests/serialization_test.py

import os
from collections import OrderedDict

import numpy as np
import pytest

from unips_system.core.exceptions import CheckpointError
from unips_system.core.serialization import (
    MAGIC,
    array_digest,
    config_hash,
    dumps_container,
    load_container,
    loads_container,
    save_container,
)


@pytest.fixture
def params():
    rng = np.random.default_rng(0)
    return OrderedDict([
        ("encoder.weight", rng.normal(size=(3, 4)).astype(np.float32)),
        ("encoder.bias", np.zeros(4, dtype=np.float32)),
        ("scale", np.array(2.5, dtype=np.float32)),
    ])


def test_container_preserves_names_order_shapes_and_config(tmp_path, params):
    path = str(tmp_path / "model.ckpt")
    save_container(path, params, {"kind": "model", "seed": 7})
    loaded, config = load_container(path)
    assert list(loaded) == list(params)
    for name in params:
        assert loaded[name].shape == params[name].shape
        np.testing.assert_array_equal(loaded[name], params[name])
    assert config == {"kind": "model", "seed": 7}
    assert [f for f in os.listdir(tmp_path) if f.startswith(".tmp-")] == []


def test_container_starts_with_magic(params):
    assert dumps_container(params, {}).startswith(MAGIC)


def test_bad_magic_is_rejected(params):
    blob = b"NOTACKPT!" + dumps_container(params, {})[len(MAGIC):]
    with pytest.raises(CheckpointError, match="bad magic"):
        loads_container(blob)


def test_truncated_and_padded_containers_are_rejected(params):
    blob = dumps_container(params, {"a": 1})
    with pytest.raises(CheckpointError, match="truncated"):
        loads_container(blob[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        loads_container(blob + b"\x00\x00")


def test_missing_file_names_the_path(tmp_path):
    missing = str(tmp_path / "absent.ckpt")
    with pytest.raises(CheckpointError, match="absent.ckpt"):
        load_container(missing)


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_array_digest_detects_weight_changes(params):
    digest = array_digest(params)
    assert digest == array_digest(OrderedDict(reversed(list(params.items()))))
    changed = dict(params)
    changed["encoder.bias"] = changed["encoder.bias"] + 1e-3
    assert array_digest(changed) != digest
