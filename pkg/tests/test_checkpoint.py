# -*- coding: utf-8 -*-
import numpy as np
import pytest

from subgroup_robustness.checkpoint import MAGIC, load_container, read_container, save_container, write_container
from subgroup_robustness.errors import AuditError
from subgroup_robustness.seeding import derive_seed


def _tensors():
    return {
        "decoder.weight": np.arange(6, dtype=np.float32).reshape(2, 3),
        "encoder.bias": np.array([1.5, -2.0], dtype=np.float64),
        "counts": np.array([3, 1, 4], dtype=np.int64),
    }


def test_container_restores_meta_and_tensors(tmp_path):
    meta = {"kind": "vae", "beta": 5.0, "history": [{"epoch": 0, "total": 1.25}]}
    loaded_meta, tensors = load_container(save_container(tmp_path / "a.ckpt", meta, _tensors()))
    assert loaded_meta == meta
    assert sorted(tensors) == sorted(_tensors())
    for name, value in _tensors().items():
        assert tensors[name].dtype == value.dtype
        np.testing.assert_array_equal(tensors[name], value)


def test_container_bytes_do_not_depend_on_insertion_order():
    tensors = _tensors()
    reordered = dict(reversed(list(tensors.items())))
    assert write_container({"b": 1, "a": 2}, tensors) == write_container({"a": 2, "b": 1}, reordered)


def test_reading_then_writing_is_byte_identical():
    data = write_container({"kind": "probe"}, _tensors())
    assert write_container(*read_container(data)) == data
    assert data.startswith(MAGIC)


def test_bad_magic_is_rejected():
    with pytest.raises(AuditError):
        read_container(b"NOTACKPT" + write_container({}, {})[len(MAGIC):])


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(0, "attack", "img1.png") == derive_seed(0, "attack", "img1.png")
    assert derive_seed(0, "attack", "img1.png") != derive_seed(0, "attack", "img2.png")
    assert derive_seed(0, "attack") != derive_seed(1, "attack")
