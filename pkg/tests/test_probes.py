# -*- coding: utf-8 -*-
import numpy as np
import pytest

from conftest import IdentityAutoencoder, InvertingAutoencoder, MeanProbe, SMALL_SHAPE, constant_prototypes, synthetic
from subgroup_robustness.attack import AttackArtifact, AttackConfig, attack_many
from subgroup_robustness.dataio import SubgroupKey, generate_synthetic_dataset, make_prototypes, sample_evaluation_set
from subgroup_robustness.errors import ProbeTrainingError, ShapeMismatchError
from subgroup_robustness.probes import (
    ABSENT,
    ADVERSARIAL,
    DIRECT,
    RECONSTRUCTION,
    ProbeConfig,
    ProbeReport,
    accuracy_table,
    format_accuracy,
    load_probe,
    predict,
    predict_batch,
    save_probe,
    subgroup_switch_rate,
    switch_frame,
    train_probe,
)
from subgroup_robustness.vae import ModelConfig, TrainConfig, train

BRIGHT_MEN = {"Male-Young": 0.8, "Male-not_Young": 0.8, "not_Male-Young": 0.2, "not_Male-not_Young": 0.2}
LINEAR_PROBE = ProbeConfig(architecture="linear", epochs=30, batch_size=16, learning_rate=1e-2)


def _constant_data(count=6):
    cardinalities = {name: count for name in BRIGHT_MEN}
    return generate_synthetic_dataset(cardinalities, constant_prototypes(BRIGHT_MEN), 0.0, seed=0)


def _zero_artifacts(ids):
    config = AttackConfig(budget=0.0, steps=0)
    return {sample_id: AttackArtifact(sample_id, np.zeros(SMALL_SHAPE), 0.0, (0.0,), config) for sample_id in ids}


# =============================================================================
# 셀 형식
# =============================================================================

def test_format_accuracy():
    assert format_accuracy(35, 60) == "0.5833"
    assert format_accuracy(60, 60) == "1.0000"
    assert format_accuracy(0, 60) == "0.0000"
    assert format_accuracy(0, 0) == ABSENT


# =============================================================================
# 학습 / 예측
# =============================================================================

def test_probe_learns_separable_attribute():
    cardinalities = {"Male": 40, "not_Male": 40}
    prototypes = make_prototypes(cardinalities, SMALL_SHAPE, seed=0)
    dataset, _ = generate_synthetic_dataset(cardinalities, prototypes, 0.05, seed=0)
    held_out, _ = generate_synthetic_dataset(cardinalities, prototypes, 0.05, seed=1)
    probe = train_probe(dataset, "Male", LINEAR_PROBE)
    labels, confidence = predict_batch(probe, held_out.pixels)
    accuracy = np.mean(labels == held_out.labels(held_out.ids, "Male"))
    assert accuracy > 0.95
    assert probe.metadata["training_inputs"] == DIRECT
    assert np.all((confidence >= 0) & (confidence <= 1))


def test_zero_epoch_probe_still_predicts(small_data):
    dataset, _ = small_data
    probe = train_probe(dataset, "Young", ProbeConfig(epochs=0))
    assert probe.metadata["epochs"] == 0
    prediction = predict(probe, dataset.image(dataset.ids[0]))
    assert prediction.label in (-1, 1)
    assert 0.0 <= prediction.confidence <= 1.0


def test_probe_training_is_seeded(small_data):
    dataset, _ = small_data
    config = ProbeConfig(epochs=2, channels=(4, 8))
    first = train_probe(dataset, "Male", config, seed=3)
    second = train_probe(dataset, "Male", config, seed=3)
    for name in first.tensors:
        np.testing.assert_array_equal(first.tensors[name], second.tensors[name])


def test_single_class_training_data_is_rejected(small_data):
    dataset, table = small_data
    men = table.groups[SubgroupKey.from_name("Male-Young")]
    with pytest.raises(ProbeTrainingError):
        train_probe(dataset, "Male", ProbeConfig(epochs=1), ids=men)
    with pytest.raises(ProbeTrainingError):
        train_probe(dataset, "Smiling", ProbeConfig(epochs=1))


def test_predict_rejects_wrong_shape(small_data):
    dataset, _ = small_data
    probe = train_probe(dataset, "Male", ProbeConfig(epochs=0))
    with pytest.raises(ShapeMismatchError):
        predict(probe, np.zeros((4, 4, 1)))
    with pytest.raises(ShapeMismatchError):
        predict(probe, np.zeros((2, 8, 8, 1)))


def test_probe_save_and_load(small_data, tmp_path):
    dataset, _ = small_data
    probe = train_probe(dataset, "Male", ProbeConfig(epochs=1, channels=(4, 8)))
    loaded = load_probe(save_probe(probe, tmp_path / "probe_Male.ckpt"))
    assert loaded.target == "Male"
    assert loaded.config == probe.config
    np.testing.assert_array_equal(loaded.logits(dataset.pixels), probe.logits(dataset.pixels))


# =============================================================================
# 정확도 표
# =============================================================================

def test_accuracy_table_layout_and_values():
    dataset, table = _constant_data()
    evaluation = sample_evaluation_set(table, 4, seed=0)
    models = {1.0: IdentityAutoencoder(), 5.0: InvertingAutoencoder(), 10.0: IdentityAutoencoder()}
    artifacts = {1.0: _zero_artifacts(evaluation.ids()), 10.0: _zero_artifacts(evaluation.ids())}

    report = accuracy_table(MeanProbe("Male"), dataset, evaluation, models, artifacts)
    frame = report.table()
    assert list(frame.columns) == [
        "subgroup", "direct",
        "reconstruction_beta1", "reconstruction_beta5", "reconstruction_beta10",
        "adversarial_beta1", "adversarial_beta5", "adversarial_beta10",
    ]
    assert len(frame) == 4
    assert set(frame["direct"]) == {"1.0000"}
    assert set(frame["reconstruction_beta1"]) == {"1.0000"}
    assert set(frame["reconstruction_beta5"]) == {"0.0000"}
    assert set(frame["adversarial_beta5"]) == {ABSENT}
    assert set(frame["adversarial_beta10"]) == {"1.0000"}

    key = SubgroupKey.from_name("Male-Young")
    assert report.accuracy(key, RECONSTRUCTION, 5.0) == 0.0
    assert report.accuracy(key, ADVERSARIAL, 5.0) is None
    assert report.recompute() == report.cells


def test_accuracy_cells_recompute_from_log():
    dataset, table = _constant_data()
    evaluation = sample_evaluation_set(table, 3, seed=1)
    report = accuracy_table(MeanProbe("Male", threshold=0.9), dataset, evaluation,
                            {1.0: IdentityAutoencoder()}, {1.0: _zero_artifacts(evaluation.ids())})
    rebuilt = ProbeReport.from_log(report.target, report.log, report.betas, report.subgroups)
    assert rebuilt.cells == report.cells
    # 임계값 0.9 → 모두 −1 예측, 여성만 정답
    women = SubgroupKey.from_name("not_Male-Young")
    men = SubgroupKey.from_name("Male-Young")
    assert report.accuracy(women, DIRECT, 1.0) == 1.0
    assert report.accuracy(men, DIRECT, 1.0) == 0.0
    assert report.to_dict()["training_inputs"] == DIRECT


# =============================================================================
# 하위집단 전환율
# =============================================================================

def test_switch_rate_is_one_when_reconstruction_inverts():
    dataset, table = _constant_data()
    evaluation = sample_evaluation_set(table, 4, seed=0)
    probes = [MeanProbe("Male"), MeanProbe("Young", threshold=0.1)]
    rates = subgroup_switch_rate(probes, dataset, evaluation, InvertingAutoencoder(), _zero_artifacts(evaluation.ids()))
    assert set(rates) == set(table.keys())
    assert all(rate == 1.0 for rate in rates.values())


def test_switch_rate_is_zero_for_identity_without_perturbation():
    dataset, table = _constant_data()
    evaluation = sample_evaluation_set(table, 4, seed=0)
    rates = subgroup_switch_rate([MeanProbe("Male")], dataset, evaluation, IdentityAutoencoder(),
                                 _zero_artifacts(evaluation.ids()))
    assert all(rate == 0.0 for rate in rates.values())


def test_switch_rate_marks_missing_artifacts_absent():
    dataset, table = _constant_data()
    evaluation = sample_evaluation_set(table, 4, seed=0)
    men = set(table.groups[SubgroupKey.from_name("Male-Young")])
    artifacts = _zero_artifacts([sample_id for sample_id in evaluation.ids() if sample_id not in men])
    rates = subgroup_switch_rate([MeanProbe("Male")], dataset, evaluation, IdentityAutoencoder(), artifacts)
    assert rates[SubgroupKey.from_name("Male-Young")] is None

    frame = switch_frame({1.0: rates})
    assert list(frame.columns) == ["subgroup", "switch_beta1"]
    assert ABSENT in set(frame["switch_beta1"])
    assert "0.0000" in set(frame["switch_beta1"])


# =============================================================================
# 합성 불균형 벤치마크 (방향성 재현)
# =============================================================================

@pytest.mark.slow
def test_minority_switches_at_least_as_often_on_imbalanced_benchmark():
    cardinalities = {"not_Male-Young": 100, "Male-Young": 100, "Male-not_Young": 100, "not_Male-not_Young": 10}
    majority, minority = SubgroupKey.from_name("Male-not_Young"), SubgroupKey.from_name("not_Male-not_Young")
    config = AttackConfig(budget=0.1, steps=40)
    majority_rates, minority_rates = [], []
    for seed in range(5):
        dataset, table = synthetic(cardinalities, noise_scale=0.05, seed=seed)
        model = train(dataset, ModelConfig.small_profile(beta=1.0),
                      TrainConfig(epochs=30, batch_size=16, learning_rate=1e-3, seed=seed)).to_model()
        classifiers = [train_probe(dataset, target, LINEAR_PROBE, seed=seed) for target in ("Male", "Young")]
        evaluation = sample_evaluation_set(table, 10, seed=seed)
        batch = attack_many(model, [(sample_id, dataset.image(sample_id)) for sample_id in evaluation.ids()],
                            config, progress=False)
        rates = subgroup_switch_rate(classifiers, dataset, evaluation, model, batch.artifacts)
        majority_rates.append(rates[majority])
        minority_rates.append(rates[minority])

    assert None not in majority_rates + minority_rates
    assert np.median(minority_rates) >= np.median(majority_rates)
