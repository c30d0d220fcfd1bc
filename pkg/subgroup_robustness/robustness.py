#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
적대적 편차(adversarial deviation) Δc 계산과 하위집단별 집계

Δc = ‖x̂(normalize(x + δ)) − x̂(x)‖₂   (픽셀 격자 전체에 대한 L2, 결정적 재구성)
recon_loss = 픽셀 평균 제곱 오차 (비섭동 재구성)
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import pandas as pd
import torch

from .attack import attack_many
from .dataio import SubgroupKey, normalize_image
from .errors import SchemaError, ShapeMismatchError
from .vae import as_model, check_image, model_dtype, recon_loss, to_tensor

LOW_ROBUSTNESS_THRESHOLD = 0.2
STATUS_OK = "ok"
STATUS_FAILED = "failed"

RECORD_COLUMNS = ["id", "subgroup", "beta", "deviation", "recon_loss", "achieved_objective", "status", "low_robustness"]
STATS_COLUMNS = ["subgroup", "count", "failures", "median", "mean", "variance", "q1", "q3", "min", "max"]


# =============================================================================
# 도메인 타입
# =============================================================================

@dataclass(frozen=True)
class RobustnessRecord:
    """샘플 하나의 Δc, 비섭동 재구성 손실, 하위집단, β"""

    sample_id: str
    subgroup: SubgroupKey
    deviation: float
    recon_loss: float
    beta: float
    achieved_objective: float
    status: str = STATUS_OK
    error: str = ""

    def __post_init__(self):
        if self.status == STATUS_OK and not self.deviation >= 0:
            raise ValueError(f"Δc 는 0 이상이어야 합니다: {self.deviation}")

    @property
    def ok(self):
        return self.status == STATUS_OK

    @property
    def low_robustness(self):
        return self.ok and self.deviation >= LOW_ROBUSTNESS_THRESHOLD

    @classmethod
    def failed(cls, sample_id, subgroup, beta, error):
        return cls(sample_id, subgroup, float("nan"), float("nan"), beta, float("nan"), STATUS_FAILED, str(error))


@dataclass(frozen=True)
class SubgroupStats:
    """하위집단 Δc 박스플롯 통계 (사분위수는 선형 보간)"""

    subgroup: SubgroupKey
    count: int
    median: float
    mean: float
    variance: float
    q1: float
    q3: float
    min: float
    max: float
    failures: int = 0

    def to_dict(self):
        return {
            "count": self.count,
            "failures": self.failures,
            "median": self.median,
            "mean": self.mean,
            "variance": self.variance,
            "q1": self.q1,
            "q3": self.q3,
            "min": self.min,
            "max": self.max,
        }


@dataclass(frozen=True)
class DisparityMetrics:
    """하위집단 중앙값 간 비율/차이와 가장 취약한 하위집단"""

    ratio: float
    gap: float
    worst: SubgroupKey
    best: SubgroupKey

    def to_dict(self):
        return {
            "max_min_median_ratio": "inf" if np.isinf(self.ratio) else self.ratio,
            "max_min_median_gap": self.gap,
            "worst_subgroup": self.worst.name,
            "best_subgroup": self.best.name,
        }


class ScatterPoint(NamedTuple):
    recon_loss: float
    deviation: float
    subgroup: str
    beta: float


# =============================================================================
# 편차 계산
# =============================================================================

def adversarial_deviation(model, x, delta):
    """Δc = ‖x̂(normalize(x + δ)) − x̂(x)‖₂"""
    model = as_model(model)
    check_image(model, x)
    if np.shape(delta) != np.shape(x):
        raise ShapeMismatchError(f"δ 크기 {np.shape(delta)} 가 이미지 {np.shape(x)} 와 다름")
    dtype = model_dtype(model)
    adversarial = normalize_image(np.asarray(x, dtype=np.float64) + np.asarray(delta, dtype=np.float64))
    with torch.no_grad():
        clean = model.reconstruct_tensor(to_tensor(x, dtype)).to(torch.float64)
        perturbed = model.reconstruct_tensor(to_tensor(adversarial, dtype)).to(torch.float64)
    return float(torch.linalg.vector_norm((perturbed - clean).flatten()))


def evaluate_subgroups(model, dataset, evaluation_set, attack_config, artifacts=None, workers=1, beta=None,
                       cache=None, progress=True):
    """평가 샘플마다 공격 → Δc, recon_loss 계산 → id 순 RobustnessRecord 목록"""
    model = as_model(model)
    if beta is None:
        beta = float(getattr(model, "beta", 1.0))
    pairs = evaluation_set.items()
    if not pairs:
        return []

    failures = {}
    if artifacts is None:
        batch = attack_many(model, [(sample_id, dataset.image(sample_id)) for sample_id, _ in pairs],
                            attack_config, workers=workers, cache=cache, progress=progress)
        artifacts, failures = batch.artifacts, batch.failures

    records = []
    for sample_id, key in pairs:
        if sample_id in failures:
            records.append(RobustnessRecord.failed(sample_id, key, beta, failures[sample_id]))
            continue
        artifact = artifacts.get(sample_id)
        if artifact is None:
            records.append(RobustnessRecord.failed(sample_id, key, beta, "공격 결과 없음"))
            continue
        x = dataset.image(sample_id)
        try:
            deviation = adversarial_deviation(model, x, artifact.delta)
            loss = recon_loss(model, x)
        except Exception as exc:
            print(f"⚠️ Δc 계산 실패 ({sample_id}): {exc}")
            records.append(RobustnessRecord.failed(sample_id, key, beta, f"{type(exc).__name__}: {exc}"))
            continue
        records.append(RobustnessRecord(
            sample_id=sample_id,
            subgroup=key,
            deviation=deviation,
            recon_loss=loss,
            beta=beta,
            achieved_objective=artifact.achieved_objective,
        ))

    failed = sum(1 for record in records if not record.ok)
    flagged = sum(1 for record in records if record.low_robustness)
    print(f"📊 β={beta:g}: 기록 {len(records)}개 (실패 {failed}개, Δc ≥ {LOW_ROBUSTNESS_THRESHOLD} {flagged}개)")
    return records


# =============================================================================
# 집계
# =============================================================================

def records_frame(records):
    """레코드 → CSV 스키마 DataFrame"""
    rows = [
        {
            "id": record.sample_id,
            "subgroup": record.subgroup.name,
            "beta": record.beta,
            "deviation": record.deviation,
            "recon_loss": record.recon_loss,
            "achieved_objective": record.achieved_objective,
            "status": record.status,
            "low_robustness": record.low_robustness,
        }
        for record in sorted(records, key=lambda record: (record.sample_id, record.beta))
    ]
    return pd.DataFrame(rows, columns=RECORD_COLUMNS)


def _stats_frame(frame):
    ok = frame[frame["status"] == STATUS_OK]
    stats = ok.groupby("subgroup")["deviation"].agg(
        count="count",
        median="median",
        mean="mean",
        variance=lambda s: s.var(ddof=0),
        q1=lambda s: s.quantile(0.25, interpolation="linear"),
        q3=lambda s: s.quantile(0.75, interpolation="linear"),
        min="min",
        max="max",
    )
    failures = frame[frame["status"] != STATUS_OK].groupby("subgroup").size()
    stats["failures"] = failures.reindex(stats.index, fill_value=0)
    return stats


def omitted_subgroups(records):
    """성공한 기록이 하나도 없는 하위집단"""
    keys = {record.subgroup for record in records}
    succeeded = {record.subgroup for record in records if record.ok}
    return sorted(keys - succeeded)


def aggregate(records):
    """하위집단별 Δc 순서 통계 → {SubgroupKey: SubgroupStats}"""
    records = list(records)
    if not records:
        raise ValueError("집계할 기록이 없습니다.")
    for key in omitted_subgroups(records):
        print(f"⚠️ 하위집단 {key.name}: 성공한 공격이 없어 통계에서 제외")

    keys = {record.subgroup.name: record.subgroup for record in records}
    stats = _stats_frame(records_frame(records))
    result = {}
    for name, row in stats.iterrows():
        key = keys[name]
        result[key] = SubgroupStats(
            subgroup=key,
            count=int(row["count"]),
            median=float(row["median"]),
            mean=float(row["mean"]),
            variance=float(row["variance"]),
            q1=float(row["q1"]),
            q3=float(row["q3"]),
            min=float(row["min"]),
            max=float(row["max"]),
            failures=int(row["failures"]),
        )
    return dict(sorted(result.items()))


def marginal_aggregate(records, attribute):
    """보호 속성 하나로 주변화한 그룹별 통계 (예: 여성 전체 vs 남성 전체)"""
    records = list(records)
    if not records:
        raise ValueError("집계할 기록이 없습니다.")
    unknown = [record.sample_id for record in records if attribute not in record.subgroup.attributes]
    if unknown:
        raise SchemaError(f"보호 속성이 아님: {attribute}")
    marginal = [
        RobustnessRecord(
            record.sample_id, record.subgroup.restrict(attribute), record.deviation, record.recon_loss,
            record.beta, record.achieved_objective, record.status, record.error,
        )
        for record in records
    ]
    return aggregate(marginal)


def stats_frame(stats, group_labels=None):
    """SubgroupStats 딕셔너리 → DataFrame"""
    rows = [{"subgroup": key.name, "label": key.label(group_labels), **value.to_dict()} for key, value in stats.items()]
    return pd.DataFrame(rows, columns=["subgroup", "label"] + STATS_COLUMNS[1:])


def disparity_metrics(stats):
    """중앙값 최대/최소 비율, 최대−최소 차이, 최악 하위집단"""
    if len(stats) < 2:
        raise ValueError(f"불균형 지표에는 하위집단이 2개 이상 필요합니다: {len(stats)}개")
    keys = sorted(stats)
    medians = np.array([stats[key].median for key in keys])
    largest, smallest = medians.max(), medians.min()
    ratio = float("inf") if smallest == 0 else float(largest / smallest)
    return DisparityMetrics(
        ratio=ratio,
        gap=float(largest - smallest),
        worst=keys[int(np.argmax(medians))],
        best=keys[int(np.argmin(medians))],
    )


def scatter_data(records):
    """(recon_loss, Δc, 하위집단, β) 튜플, id 순 (실패 기록 제외)"""
    ordered = sorted((record for record in records if record.ok), key=lambda record: (record.sample_id, record.beta))
    return [ScatterPoint(record.recon_loss, record.deviation, record.subgroup.name, record.beta) for record in ordered]


def max_damage_samples(records, per_subgroup=3):
    """하위집단별 Δc 상위 샘플 (동률은 id 순)"""
    grouped = {}
    for record in records:
        if record.ok:
            grouped.setdefault(record.subgroup, []).append(record)
    return {
        key: sorted(items, key=lambda record: (-record.deviation, record.sample_id))[:per_subgroup]
        for key, items in sorted(grouped.items())
    }


def cross_beta_frame(records):
    """같은 평가 샘플의 β 별 Δc 비교표 (행: id, 열: β)"""
    frame = records_frame([record for record in records if record.ok])
    if frame.empty:
        return pd.DataFrame(columns=["subgroup"])
    table = frame.pivot_table(index=["id", "subgroup"], columns="beta", values="deviation", aggfunc="first")
    table.columns = [f"beta_{beta:g}" for beta in table.columns]
    return table.reset_index(level="subgroup")
