#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
하위 분류기(probe) 평가

- 보호 속성(성별, 연령 등) 이진 분류기를 원본 이미지로 학습
- 입력 종류별 정확도: 원본(direct), 재구성(reconstruction), 적대적 재구성(adversarial)
- 하위집단 전환율: 적대적 재구성의 결합 예측이 원본 결합 예측과 달라진 비율
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy.special import expit
from torch import nn

from .checkpoint import load_container, save_container
from .dataio import SubgroupKey, normalize_image
from .errors import ConfigError, ProbeTrainingError, ShapeMismatchError
from .seeding import derive_seed, torch_generator
from .vae import as_model, reconstruct_many, to_tensor

DIRECT = "direct"
RECONSTRUCTION = "reconstruction"
ADVERSARIAL = "adversarial"
INPUT_KINDS = (DIRECT, RECONSTRUCTION, ADVERSARIAL)
ABSENT = "absent"
THRESHOLD = 0.5

LOG_COLUMNS = ["id", "subgroup", "kind", "beta", "true", "predicted", "confidence"]


# =============================================================================
# 설정 / 모델
# =============================================================================

@dataclass(frozen=True)
class ProbeConfig:
    """프로브 분류기 설정"""

    architecture: str = "conv"
    channels: tuple = (16, 32)
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    tolerance: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if self.architecture not in ("conv", "linear"):
            raise ConfigError(f"알 수 없는 프로브 구조: {self.architecture}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("프로브 epochs ≥ 0, batch_size ≥ 1, learning_rate > 0 이어야 합니다.")

    def to_dict(self):
        return {
            "architecture": self.architecture,
            "channels": list(self.channels),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "tolerance": self.tolerance,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(**payload)


def build_classifier(config, input_dims):
    """이미지 (B,C,H,W) → 로짓 (B,)"""
    height, width, channels = input_dims
    if config.architecture == "linear":
        return nn.Sequential(nn.Flatten(), nn.Linear(height * width * channels, 1), nn.Flatten(0))

    factor = 2 ** len(config.channels)
    if height % factor or width % factor:
        raise ConfigError(f"해상도 {height}×{width} 는 2^{len(config.channels)} 로 나누어떨어져야 합니다.")
    layers = []
    fan_in = channels
    for fan_out in config.channels:
        layers += [nn.Conv2d(fan_in, fan_out, kernel_size=3, stride=2, padding=1), nn.ReLU()]
        fan_in = fan_out
    flat = fan_in * (height // factor) * (width // factor)
    layers += [nn.Flatten(), nn.Linear(flat, 1), nn.Flatten(0)]
    return nn.Sequential(*layers)


@dataclass(frozen=True, eq=False)
class ProbeModel:
    """대상 속성 이진 분류기 (양성 = +1)"""

    target: str
    config: ProbeConfig
    input_dims: tuple
    tensors: dict
    metadata: dict = field(default_factory=dict)
    _module: object = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(v) for v in self.input_dims))
        module = build_classifier(self.config, self.input_dims)
        module.load_state_dict({name: torch.from_numpy(value.copy()) for name, value in self.tensors.items()})
        module.eval()
        module.requires_grad_(False)
        object.__setattr__(self, "_module", module)

    def logits(self, pixels):
        with torch.no_grad():
            return self._module(to_tensor(pixels, torch.float32)).to(torch.float64).numpy()


class Prediction(NamedTuple):
    """label ∈ {+1, −1}, confidence = P(+1)"""

    label: int
    confidence: float


# =============================================================================
# 학습 / 예측
# =============================================================================

def train_probe(dataset, target, config=None, seed=None, ids=None):
    """원본 이미지로 이진 분류기 학습"""
    config = config or ProbeConfig()
    seed = config.seed if seed is None else int(seed)
    ids = list(dataset.ids if ids is None else ids)
    if target not in dataset.schema.names:
        raise ProbeTrainingError(f"알 수 없는 대상 속성: {target}")
    labels = dataset.labels(ids, target)
    if len(np.unique(labels)) < 2:
        raise ProbeTrainingError(f"{target}: 학습 데이터가 한 클래스뿐입니다 ({len(ids)}개 샘플)")

    pixels = to_tensor(dataset.images(ids), torch.float32)
    targets = torch.from_numpy((labels == 1).astype(np.float32))

    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "probe", target))
        module = build_classifier(config, dataset.image_shape)
    optimizer = torch.optim.Adam(module.parameters(), lr=config.learning_rate)
    generator = torch_generator(derive_seed(seed, "probe-order", target))

    print(f"🔧 프로브 학습: {target} (샘플 {len(ids):,}개, 최대 {config.epochs} epoch)")
    history = []
    epochs_run = 0
    module.train()
    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(len(pixels), generator=generator)
        total = 0.0
        for start in range(0, len(pixels), config.batch_size):
            index = order[start:start + config.batch_size]
            loss = F.binary_cross_entropy_with_logits(module(pixels[index]), targets[index])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(index)
        epochs_run = epoch
        history.append(total / len(pixels))
        if history[-1] < config.tolerance:
            break
    module.eval()

    with torch.no_grad():
        predicted = module(pixels) >= 0
    accuracy = float((predicted.to(torch.float32) == targets).to(torch.float64).mean())
    print(f"✅ 프로브 {target}: 학습 정확도 {accuracy:.4f} ({epochs_run} epoch)")

    tensors = {name: value.detach().numpy().copy() for name, value in module.state_dict().items()}
    metadata = {
        "epochs": epochs_run,
        "seed": seed,
        "train_accuracy": accuracy,
        "train_size": len(ids),
        "loss_history": history,
        "training_inputs": DIRECT,
    }
    return ProbeModel(target, config, dataset.image_shape, tensors, metadata)


def _check_input(probe, pixels):
    shape = tuple(np.shape(pixels))[-3:]
    if shape != probe.input_dims:
        raise ShapeMismatchError(f"이미지 크기 {shape} 가 프로브 입력 {probe.input_dims} 와 다름")


def predict_batch(probe, pixels, batch_size=256):
    """(n,H,W,C) → (라벨 ±1 배열, P(+1) 배열)"""
    pixels = np.asarray(pixels)
    if len(pixels) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
    _check_input(probe, pixels)
    logits = np.concatenate([probe.logits(pixels[start:start + batch_size])
                             for start in range(0, len(pixels), batch_size)])
    confidence = expit(logits)
    labels = np.where(confidence >= THRESHOLD, 1, -1)
    return labels.astype(np.int64), confidence


def predict(probe, image):
    """이미지 한 장 → Prediction(label, confidence)"""
    if np.ndim(image) != 3:
        raise ShapeMismatchError(f"이미지 한 장은 (H,W,C) 여야 합니다: {np.shape(image)}")
    labels, confidence = predict_batch(probe, np.asarray(image)[None])
    return Prediction(label=int(labels[0]), confidence=float(confidence[0]))


def save_probe(probe, path):
    meta = {
        "kind": "probe",
        "target": probe.target,
        "config": probe.config.to_dict(),
        "input_dims": list(probe.input_dims),
        "metadata": probe.metadata,
    }
    return save_container(path, meta, probe.tensors)


def load_probe(path):
    meta, tensors = load_container(path)
    return ProbeModel(meta["target"], ProbeConfig.from_dict(meta["config"]), tuple(meta["input_dims"]), tensors,
                      meta["metadata"])


# =============================================================================
# 입력 구성
# =============================================================================

@dataclass(frozen=True)
class InputBank:
    """입력 종류/β 별 (id 목록, 픽셀 배열)"""

    direct: tuple
    reconstructions: dict
    adversarial: dict
    betas: tuple


def build_input_bank(dataset, evaluation_set, models, artifacts):
    """원본, β 별 재구성, β 별 적대적 재구성 이미지 준비

    models: {β: 모델/체크포인트}, artifacts: {β: {id: AttackArtifact}}
    """
    ids = [sample_id for sample_id, _ in evaluation_set.items()]
    pixels = dataset.images(ids) if ids else np.zeros((0,) + dataset.image_shape, dtype=np.float32)
    reconstructions, adversarial = {}, {}
    for beta in sorted(models):
        model = as_model(models[beta])
        reconstructions[beta] = (tuple(ids), reconstruct_many(model, pixels))
        available = artifacts.get(beta, {})
        attacked = [sample_id for sample_id in ids if sample_id in available]
        if attacked:
            inputs = np.stack([
                normalize_image(dataset.image(sample_id).astype(np.float64) + available[sample_id].delta)
                for sample_id in attacked
            ])
        else:
            inputs = np.zeros((0,) + dataset.image_shape)
        adversarial[beta] = (tuple(attacked), reconstruct_many(model, inputs))
    return InputBank((tuple(ids), pixels), reconstructions, adversarial, tuple(sorted(models)))


# =============================================================================
# 정확도 표
# =============================================================================

def format_accuracy(correct, count):
    """정확도 셀 문자열 (소수점 4자리, 샘플 없으면 absent)"""
    if not count:
        return ABSENT
    return f"{correct / count:.4f}"


def _cells_from_log(log, subgroups, betas):
    cells = {}
    for key in subgroups:
        for kind in INPUT_KINDS:
            for beta in betas:
                cells[(key, kind, beta)] = None
    for (name, kind, beta), group in log.groupby(["subgroup", "kind", "beta"], dropna=False, sort=True):
        key = SubgroupKey.from_name(name)
        correct = int((group["true"] == group["predicted"]).sum())
        if kind == DIRECT:
            # β 와 무관하므로 모든 β 열에 동일하게 전개
            for every in betas:
                cells[(key, kind, every)] = (correct, len(group))
        else:
            cells[(key, kind, float(beta))] = (correct, len(group))
    return cells


@dataclass(frozen=True, eq=False)
class ProbeReport:
    """정확도 격자 [하위집단][입력 종류][β] 와 샘플별 예측 기록"""

    target: str
    betas: tuple
    subgroups: tuple
    log: pd.DataFrame
    cells: dict

    def accuracy(self, subgroup, kind, beta):
        cell = self.cells.get((subgroup, kind, float(beta)))
        if cell is None or cell[1] == 0:
            return None
        return cell[0] / cell[1]

    def recompute(self):
        """예측 기록에서 모든 셀을 다시 계산"""
        return _cells_from_log(self.log, self.subgroups, self.betas)

    def table(self, group_labels=None):
        """행: 하위집단, 열: direct | reconstruction β… | adversarial β…"""
        rows = []
        for key in self.subgroups:
            first = self.betas[0] if self.betas else None
            row = {"subgroup": key.label(group_labels)}
            row[DIRECT] = format_accuracy(*(self.cells.get((key, DIRECT, first)) or (0, 0)))
            for kind in (RECONSTRUCTION, ADVERSARIAL):
                for beta in self.betas:
                    row[f"{kind}_beta{beta:g}"] = format_accuracy(*(self.cells.get((key, kind, beta)) or (0, 0)))
            rows.append(row)
        columns = ["subgroup", DIRECT] + [f"{kind}_beta{beta:g}" for kind in (RECONSTRUCTION, ADVERSARIAL)
                                          for beta in self.betas]
        return pd.DataFrame(rows, columns=columns)

    def to_dict(self):
        return {
            "target": self.target,
            "training_inputs": DIRECT,
            "betas": list(self.betas),
            "cells": {
                f"{key.name}|{kind}|{beta:g}": (None if cell is None else {"correct": cell[0], "count": cell[1]})
                for (key, kind, beta), cell in sorted(self.cells.items(), key=lambda item: (item[0][0], item[0][1],
                                                                                              item[0][2]))
            },
        }

    @classmethod
    def from_log(cls, target, log, betas, subgroups=None):
        betas = tuple(sorted(float(beta) for beta in betas))
        if subgroups is None:
            subgroups = tuple(sorted({SubgroupKey.from_name(name) for name in log["subgroup"]}))
        return cls(target, betas, tuple(subgroups), log, _cells_from_log(log, subgroups, betas))


def _log_rows(probe, dataset, evaluation_set, ids, pixels, kind, beta):
    labels, confidence = predict_batch(probe, pixels)
    truth = dataset.labels(ids, probe.target) if ids else np.zeros(0, dtype=np.int64)
    return [
        {
            "id": sample_id,
            "subgroup": evaluation_set.subgroup_of(sample_id).name,
            "kind": kind,
            "beta": beta,
            "true": int(truth[index]),
            "predicted": int(labels[index]),
            "confidence": float(confidence[index]),
        }
        for index, sample_id in enumerate(ids)
    ]


def accuracy_table(probe, dataset, evaluation_set, models, artifacts, bank=None):
    """하위집단 × 입력 종류 × β 별 정확도 → ProbeReport (결손 artifact 셀은 absent)"""
    bank = bank or build_input_bank(dataset, evaluation_set, models, artifacts)
    ids, pixels = bank.direct
    rows = _log_rows(probe, dataset, evaluation_set, list(ids), pixels, DIRECT, np.nan)
    for beta in bank.betas:
        recon_ids, recon_pixels = bank.reconstructions[beta]
        rows += _log_rows(probe, dataset, evaluation_set, list(recon_ids), recon_pixels, RECONSTRUCTION, float(beta))
        adv_ids, adv_pixels = bank.adversarial[beta]
        rows += _log_rows(probe, dataset, evaluation_set, list(adv_ids), adv_pixels, ADVERSARIAL, float(beta))

    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    subgroups = tuple(sorted(key for key, members in evaluation_set.per_subgroup.items() if members))
    report = ProbeReport.from_log(probe.target, log, bank.betas, subgroups)
    print(f"📊 프로브 {probe.target}: {len(log):,}개 예측 기록")
    return report


def subgroup_switch_rate(probes, dataset, evaluation_set, model, artifacts, bank=None, beta=None):
    """적대적 재구성의 결합 예측이 원본 결합 예측과 다른 샘플 비율 (하위집단별)

    artifacts: {id: AttackArtifact}; 공격 결과가 없는 하위집단은 None
    """
    probes = list(probes)
    if not probes:
        raise ValueError("프로브가 하나 이상 필요합니다.")
    if beta is None:
        beta = float(getattr(as_model(model), "beta", 1.0))
    bank = bank or build_input_bank(dataset, evaluation_set, {beta: model}, {beta: artifacts})
    ids, pixels = bank.direct
    adv_ids, adv_pixels = bank.adversarial[beta]
    position = {sample_id: index for index, sample_id in enumerate(ids)}
    selected = [position[sample_id] for sample_id in adv_ids]

    direct_joint = np.stack([predict_batch(probe, pixels[selected])[0] for probe in probes], axis=1) \
        if selected else np.zeros((0, len(probes)), dtype=np.int64)
    adversarial_joint = np.stack([predict_batch(probe, adv_pixels)[0] for probe in probes], axis=1) \
        if selected else np.zeros((0, len(probes)), dtype=np.int64)
    switched = dict(zip(adv_ids, np.any(direct_joint != adversarial_joint, axis=1)))

    rates = {}
    for key, members in sorted(evaluation_set.per_subgroup.items()):
        observed = [bool(switched[sample_id]) for sample_id in members if sample_id in switched]
        rates[key] = float(np.mean(observed)) if observed else None
    return rates


def switch_frame(rates_by_beta, group_labels=None):
    """{β: {하위집단: 전환율}} → DataFrame (행: 하위집단, 열: β)"""
    keys = sorted({key for rates in rates_by_beta.values() for key in rates})
    rows = []
    for key in keys:
        row = {"subgroup": key.label(group_labels)}
        for beta in sorted(rates_by_beta):
            rate = rates_by_beta[beta].get(key)
            row[f"switch_beta{beta:g}"] = ABSENT if rate is None else f"{rate:.4f}"
        rows.append(row)
    return pd.DataFrame(rows, columns=["subgroup"] + [f"switch_beta{beta:g}" for beta in sorted(rates_by_beta)])
