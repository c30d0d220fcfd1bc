# -*- coding: utf-8 -*-
import numpy as np
import pandas as pd
import pytest
import torch
from PIL import Image

from conftest import SMALL_CARDINALITIES, constant_prototypes, synthetic
from subgroup_robustness.config import DEFAULT_GROUP_LABELS
from subgroup_robustness.dataio import (
    EvaluationSet,
    SubgroupKey,
    SubgroupTable,
    attributes_frame,
    build_subgroups,
    cardinality_frame,
    format_attribute_file,
    generate_synthetic_dataset,
    load_celeba,
    load_dataset_folder,
    load_image_folder,
    normalize_image,
    parse_attribute_file,
    sample_evaluation_set,
    write_dataset_folder,
)
from subgroup_robustness.errors import AttributeFileError, SchemaError


# =============================================================================
# 속성 파일
# =============================================================================

def test_parse_attribute_file_reads_header_and_rows():
    schema, rows = parse_attribute_file("2\nMale Young\nimg1.jpg 1 -1\nimg2.jpg -1 1")
    assert schema.names == ("Male", "Young")
    assert rows["img1.jpg"] == {"Male": 1, "Young": -1}
    assert rows["img2.jpg"] == {"Male": -1, "Young": 1}


@pytest.mark.parametrize("text, line", [
    ("3\nMale Young\nimg1.jpg 1 -1\nimg2.jpg -1 1", 1),
    ("1\nMale\nimg1.jpg 0", 3),
    ("2\nMale\nimg1.jpg 1\nimg1.jpg -1", 4),
    ("1\nMale Young\nimg1.jpg 1", 3),
    ("1\nMale\nimg1.jpg 1 1", 3),
    ("x\nMale\nimg1.jpg 1", 1),
])
def test_parse_attribute_file_rejects_with_line_number(text, line):
    with pytest.raises(AttributeFileError) as info:
        parse_attribute_file(text)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_format_attribute_file_is_parseable():
    schema, rows = parse_attribute_file("2\nMale Young\nimg1.jpg 1 -1\nimg2.jpg -1 1\n")
    frame = pd.DataFrame.from_dict(rows, orient="index")
    text = format_attribute_file(schema, frame)
    assert parse_attribute_file(text) == (schema, rows)


# =============================================================================
# 하위집단
# =============================================================================

def _attribute_frame(n, names, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.choice([-1, 1], size=(n, len(names)))
    return pd.DataFrame(values, columns=names, index=[f"img{i:04d}.jpg" for i in range(n)])


def test_two_protected_attributes_form_four_subgroups(small_data):
    dataset, _ = small_data
    table = build_subgroups(dataset, ["Male", "Young"])
    assert len(table.keys()) == 4
    assert {key.name for key in table.keys()} == set(SMALL_CARDINALITIES)
    assert sum(table.cardinalities.values()) == len(dataset)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_subgroups_partition_the_dataset(k):
    names = ["Male", "Young", "Smiling"][:k]
    frame = _attribute_frame(200, names, seed=k)
    table = build_subgroups(frame, names)
    assert len(table.keys()) == 2 ** k
    members = [sample_id for ids in table.groups.values() for sample_id in ids]
    assert sorted(members) == sorted(frame.index)
    for key, ids in table.groups.items():
        for sample_id in ids:
            assert all(frame.loc[sample_id, name] == key.value(name) for name in names)


def test_empty_protected_set_gives_single_subgroup():
    frame = _attribute_frame(10, ["Male", "Young"])
    table = build_subgroups(frame, [])
    assert table.keys() == [SubgroupKey(())]
    assert table.keys()[0].name == "all"
    assert table.size == 10


def test_unknown_protected_attribute_is_rejected():
    with pytest.raises(SchemaError):
        build_subgroups(_attribute_frame(5, ["Male"]), ["Age"])


def test_missing_protected_value_is_rejected():
    frame = _attribute_frame(5, ["Male", "Young"])
    frame.loc["img0002.jpg", "Young"] = 0
    with pytest.raises(SchemaError, match="img0002.jpg"):
        build_subgroups(frame, ["Male", "Young"])


def test_subgroup_key_names_and_labels():
    key = SubgroupKey.from_values(("Male", "Young"), (-1, 1))
    assert key.name == "not_Male-Young"
    assert SubgroupKey.from_name(key.name) == key
    assert key.label(DEFAULT_GROUP_LABELS) == "women-young"
    assert key.restrict("Male").name == "not_Male"


def test_cardinality_frame_shares_sum_to_one(small_data):
    _, table = small_data
    frame = cardinality_frame(table, DEFAULT_GROUP_LABELS)
    assert frame["count"].sum() == 72
    assert frame["share"].sum() == pytest.approx(1.0)
    assert "women-old" in set(frame["label"])


# =============================================================================
# 평가 샘플
# =============================================================================

def _table(sizes):
    groups = {}
    for name, size in sizes.items():
        groups[SubgroupKey.from_name(name)] = tuple(f"{name}_{i:03d}" for i in range(size))
    return SubgroupTable(("Male", "Young"), groups)


def test_evaluation_set_takes_n_per_subgroup():
    table = _table({"Male-Young": 80, "Male-not_Young": 70, "not_Male-Young": 100, "not_Male-not_Young": 60})
    evaluation = sample_evaluation_set(table, 60, seed=7)
    assert evaluation.size == 240
    assert all(len(ids) == 60 for ids in evaluation.per_subgroup.values())
    assert not evaluation.warnings
    for key, ids in evaluation.per_subgroup.items():
        assert set(ids) <= set(table.groups[key])
        assert len(set(ids)) == len(ids)


def test_evaluation_set_truncates_small_subgroup_with_warning():
    table = _table({"Male-Young": 10, "Male-not_Young": 3})
    evaluation = sample_evaluation_set(table, 5, seed=0)
    assert len(evaluation.per_subgroup[SubgroupKey.from_name("Male-not_Young")]) == 3
    assert len(evaluation.warnings) == 1
    assert evaluation.warnings[0].available == 3


def test_evaluation_set_keeps_empty_subgroup():
    table = _table({"Male-Young": 10, "Male-not_Young": 0})
    evaluation = sample_evaluation_set(table, 5, seed=0)
    assert evaluation.per_subgroup[SubgroupKey.from_name("Male-not_Young")] == ()
    assert "비어 있음" in evaluation.warnings[0].message


def test_evaluation_set_is_deterministic():
    table = _table({"Male-Young": 50, "not_Male-Young": 50})
    first = sample_evaluation_set(table, 20, seed=3)
    assert first == sample_evaluation_set(table, 20, seed=3)
    assert first != sample_evaluation_set(table, 20, seed=4)
    assert EvaluationSet.from_dict(first.to_dict()).per_subgroup == first.per_subgroup


# =============================================================================
# 정규화 / 합성 데이터
# =============================================================================

def test_normalize_image_clips_to_unit_interval():
    np.testing.assert_array_equal(normalize_image(np.array([1.3, -0.2, 0.4])), [1.0, 0.0, 0.4])
    grid = np.random.default_rng(0).uniform(size=(4, 4, 1))
    np.testing.assert_array_equal(normalize_image(grid), grid)
    assert torch.equal(normalize_image(torch.tensor([1.3, -0.2])), torch.tensor([1.0, 0.0]))


def test_normalize_image_rejects_non_finite():
    with pytest.raises(ValueError):
        normalize_image(np.array([0.5, np.nan]))


def test_synthetic_dataset_matches_cardinalities():
    cardinalities = {"Male": 100, "not_Male": 10}
    dataset, table = generate_synthetic_dataset(cardinalities, constant_prototypes({"Male": 0.3, "not_Male": 0.7}),
                                                0.05, seed=0)
    assert len(dataset) == 110
    assert {key.name: count for key, count in table.cardinalities.items()} == cardinalities


def test_zero_noise_reproduces_prototypes():
    prototypes = constant_prototypes({"Male": 0.25, "not_Male": 0.75})
    dataset, table = generate_synthetic_dataset({"Male": 3, "not_Male": 2}, prototypes, 0.0, seed=0)
    for key, ids in table.groups.items():
        for sample_id in ids:
            np.testing.assert_array_equal(dataset.image(sample_id), prototypes[key])


def test_large_noise_stays_in_range():
    dataset, _ = generate_synthetic_dataset({"Male": 50}, constant_prototypes({"Male": 0.9}), 0.5, seed=1)
    assert dataset.pixels.min() >= 0.0
    assert dataset.pixels.max() <= 1.0


def test_negative_cardinality_is_rejected():
    with pytest.raises(ValueError):
        generate_synthetic_dataset({"Male": -1}, constant_prototypes({"Male": 0.5}), 0.1, seed=0)


def test_dataset_folder_round_trip_and_determinism(tmp_path):
    dataset, table = synthetic(seed=5)
    manifest = write_dataset_folder(dataset, table, tmp_path / "a", seed=5)
    write_dataset_folder(dataset, table, tmp_path / "b", seed=5)

    assert manifest.cardinalities == SMALL_CARDINALITIES
    for path in sorted((tmp_path / "a").rglob("*")):
        if path.is_file():
            twin = tmp_path / "b" / path.relative_to(tmp_path / "a")
            assert path.read_bytes() == twin.read_bytes(), path.name

    loaded, loaded_table, _ = load_dataset_folder(tmp_path / "a")
    assert loaded.ids == dataset.ids
    assert loaded_table.cardinalities == table.cardinalities
    np.testing.assert_allclose(loaded.pixels, dataset.pixels, atol=1 / 255)


def test_load_celeba_resizes_and_limits(tmp_path):
    image_dir = tmp_path / "img_align_celeba"
    image_dir.mkdir()
    levels = {"000001.jpg": 64, "000002.jpg": 128, "000003.jpg": 192}
    for name, level in levels.items():
        Image.new("RGB", (16, 20), (level, level, level)).save(image_dir / name, format="PNG")
    attribute_file = tmp_path / "list_attr_celeba.txt"
    attribute_file.write_text(
        "3\nSmiling Male Young\n000001.jpg 1 1 -1\n000002.jpg -1 -1 1\n000003.jpg 1 1 1\n", encoding="utf-8"
    )

    dataset, table = load_celeba(image_dir, attribute_file, ["Male", "Young"], resolution=(8, 8), limit=2)
    assert dataset.ids == ("000001.jpg", "000002.jpg")
    assert dataset.image_shape == (8, 8, 3)
    np.testing.assert_allclose(dataset.image("000002.jpg"), 128 / 255, atol=1e-6)
    assert list(dataset.attributes.columns) == ["Smiling", "Male", "Young"]
    assert table.cardinalities == {SubgroupKey.from_name("Male-not_Young"): 1,
                                   SubgroupKey.from_name("not_Male-Young"): 1}


def test_attributes_frame_keeps_schema_order():
    schema, rows = parse_attribute_file("2\nMale Young\nb.png -1 1\na.png 1 -1")
    frame = attributes_frame(rows, schema)
    assert list(frame.columns) == ["Male", "Young"]
    assert frame.loc["a.png", "Male"] == 1
    assert frame.index.name == "image_id"


def test_missing_image_file_is_reported(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image_folder(tmp_path, ["nope.png"], resolution=(8, 8))
