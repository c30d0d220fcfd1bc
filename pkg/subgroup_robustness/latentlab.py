#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
잠재 공간 포렌식

- 사후 평균 μ 임베딩 행렬
- 하위집단별 k-최근접 이웃 구성 (동률은 id 오름차순)
- 적대적 "끌림(pull) 효과": 섭동 전후 임베딩, 이웃, 최근접 중심 하위집단
- 2차원 투영 (PCA: 결정적, t-SNE: 시각화 전용)
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from sklearn.decomposition import PCA
from sklearn.manifold import TSNE

from .attack import BUDGET_TOLERANCE
from .dataio import SubgroupKey, normalize_image
from .errors import BudgetError
from .vae import as_model, encode, encode_many

KNN_MODES = ("per_subgroup", "global")
PROJECTION_METHODS = ("pca", "tsne")


# =============================================================================
# 임베딩 행렬
# =============================================================================

@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """행: 샘플 id (오름차순), 값: μ 벡터, 하위집단 라벨"""

    ids: tuple
    vectors: np.ndarray
    subgroups: tuple

    def __post_init__(self):
        ids = tuple(self.ids)
        vectors = np.array(self.vectors, dtype=np.float64, copy=True)
        subgroups = tuple(self.subgroups)
        if vectors.ndim != 2 or len(vectors) != len(ids) or len(subgroups) != len(ids):
            raise ValueError(f"임베딩 행렬 크기 불일치: ids {len(ids)}, vectors {vectors.shape}, "
                             f"subgroups {len(subgroups)}")
        order = sorted(range(len(ids)), key=lambda index: ids[index])
        vectors = vectors[order] if len(order) else vectors
        vectors.setflags(write=False)
        object.__setattr__(self, "ids", tuple(ids[index] for index in order))
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "subgroups", tuple(subgroups[index] for index in order))

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def keys(self):
        return sorted(set(self.subgroups))

    def rows_of(self, key):
        return np.array([index for index, subgroup in enumerate(self.subgroups) if subgroup == key], dtype=np.int64)

    def to_frame(self):
        frame = pd.DataFrame(self.vectors, columns=[f"v_{j + 1}" for j in range(self.dim)])
        frame.insert(0, "subgroup", [key.name for key in self.subgroups])
        frame.insert(0, "id", list(self.ids))
        return frame

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return Path(path)

    @classmethod
    def read_csv(cls, path):
        frame = pd.read_csv(path, dtype={"id": str, "subgroup": str})
        columns = [column for column in frame.columns if column.startswith("v_")]
        return cls(
            tuple(frame["id"]),
            frame[columns].to_numpy(dtype=np.float64),
            tuple(SubgroupKey.from_name(name) for name in frame["subgroup"]),
        )


def embed_dataset(model, dataset, groups, ids=None):
    """데이터셋 샘플 → μ 임베딩 행렬

    groups: SubgroupTable 또는 EvaluationSet (subgroup_of 제공)
    """
    model = as_model(model)
    ids = sorted(dataset.ids if ids is None else ids)
    pixels = dataset.images(ids) if ids else np.zeros((0,) + dataset.image_shape, dtype=np.float32)
    vectors = encode_many(model, pixels)
    return EmbeddingMatrix(tuple(ids), vectors, tuple(groups.subgroup_of(sample_id) for sample_id in ids))


# =============================================================================
# 최근접 이웃
# =============================================================================

def _ordered(matrix, rows, distances):
    """거리 오름차순, 동률은 id 오름차순 (행은 id 순으로 정렬되어 있음)"""
    rows = np.asarray(rows, dtype=np.int64)
    order = np.lexsort((rows, distances[rows]))
    return [int(rows[index]) for index in order]


def knn_composition(matrix, query, k=10, mode="per_subgroup"):
    """질의 벡터 주변 k-NN id 목록 (하위집단별)

    per_subgroup: 각 하위집단에서 독립적으로 k개 (부족하면 전부)
    global: 전체 k개를 고른 뒤 하위집단별로 분류
    """
    if k < 1:
        raise ValueError(f"k 는 1 이상이어야 합니다: {k}")
    if len(matrix) == 0:
        raise ValueError("빈 임베딩 행렬입니다.")
    if mode not in KNN_MODES:
        raise ValueError(f"알 수 없는 k-NN 모드: {mode}")
    query = np.asarray(query, dtype=np.float64).reshape(1, -1)
    if query.shape[1] != matrix.dim:
        raise ValueError(f"질의 차원 {query.shape[1]} 가 임베딩 차원 {matrix.dim} 와 다름")
    distances = cdist(query, matrix.vectors)[0]

    if mode == "global":
        nearest = _ordered(matrix, np.arange(len(matrix)), distances)[:k]
        result = {key: [] for key in matrix.keys()}
        for row in nearest:
            result[matrix.subgroups[row]].append(matrix.ids[row])
        return result

    return {
        key: [matrix.ids[row] for row in _ordered(matrix, matrix.rows_of(key), distances)[:k]]
        for key in matrix.keys()
    }


def subgroup_centroids(matrix):
    """하위집단별 평균 임베딩"""
    return {key: matrix.vectors[matrix.rows_of(key)].mean(axis=0) for key in matrix.keys()}


def nearest_centroid(centroids, vector):
    keys = sorted(centroids)
    distances = cdist(np.asarray(vector, dtype=np.float64).reshape(1, -1), np.stack([centroids[key] for key in keys]))[0]
    return keys[int(np.argmin(distances))]


def neighborhood_purity(matrix, k=10):
    """각 행의 전역 k-NN (자기 자신 제외) 중 같은 하위집단 비율의 하위집단별 평균"""
    if len(matrix) < 2:
        raise ValueError("이웃 순도 계산에는 행이 2개 이상 필요합니다.")
    distances = cdist(matrix.vectors, matrix.vectors)
    np.fill_diagonal(distances, np.inf)
    purity = np.zeros(len(matrix))
    everything = np.arange(len(matrix))
    for row in everything:
        nearest = _ordered(matrix, everything[everything != row], distances[row])[:k]
        purity[row] = np.mean([matrix.subgroups[other] == matrix.subgroups[row] for other in nearest])
    return {key: float(purity[matrix.rows_of(key)].mean()) for key in matrix.keys()}


# =============================================================================
# 끌림 효과
# =============================================================================

@dataclass(frozen=True, eq=False)
class PullRecord:
    """섭동 전후 임베딩과 이웃 구성"""

    sample_id: str
    clean_embedding: np.ndarray
    adversarial_embedding: np.ndarray
    neighbors_before: dict
    neighbors_after: dict
    centroid_before: SubgroupKey
    centroid_after: SubgroupKey
    displacement: float

    @property
    def switched(self):
        return self.centroid_before != self.centroid_after

    def to_dict(self):
        return {
            "id": self.sample_id,
            "clean_embedding": self.clean_embedding.tolist(),
            "adversarial_embedding": self.adversarial_embedding.tolist(),
            "neighbors_before": {key.name: list(ids) for key, ids in sorted(self.neighbors_before.items())},
            "neighbors_after": {key.name: list(ids) for key, ids in sorted(self.neighbors_after.items())},
            "centroid_before": self.centroid_before.name,
            "centroid_after": self.centroid_after.name,
            "displacement": self.displacement,
        }


def pull_effect(model, matrix, x, delta, k=10, sample_id="", mode="per_subgroup", budget=None):
    """x 와 normalize(x + δ) 의 임베딩, k-NN, 최근접 중심 하위집단 비교

    budget 이 주어지면 ‖δ‖∞ ≤ budget + 1e-6 를 먼저 확인 (위반 시 BudgetError)
    """
    if len(matrix) == 0:
        raise ValueError("빈 임베딩 행렬입니다.")
    if mode not in KNN_MODES:
        raise ValueError(f"알 수 없는 k-NN 모드: {mode}")
    delta = np.asarray(delta, dtype=np.float64)
    if budget is not None:
        linf = float(np.max(np.abs(delta))) if delta.size else 0.0
        if linf > budget + BUDGET_TOLERANCE:
            raise BudgetError(f"섭동 예산 초과 ({sample_id}): ‖δ‖∞={linf:.6g} > {budget:.6g}")
    model = as_model(model)
    clean = encode(model, x).mean
    adversarial = encode(model, normalize_image(np.asarray(x, dtype=np.float64) + delta)).mean
    centroids = subgroup_centroids(matrix)
    return PullRecord(
        sample_id=sample_id,
        clean_embedding=clean,
        adversarial_embedding=adversarial,
        neighbors_before=knn_composition(matrix, clean, k, mode),
        neighbors_after=knn_composition(matrix, adversarial, k, mode),
        centroid_before=nearest_centroid(centroids, clean),
        centroid_after=nearest_centroid(centroids, adversarial),
        displacement=float(np.linalg.norm(adversarial - clean)),
    )


def save_pull_records(records, path):
    path = Path(path)
    payload = [record.to_dict() for record in sorted(records, key=lambda record: record.sample_id)]
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def pull_frame(records):
    """끌림 기록 요약표 (id, 전/후 중심 하위집단, 이동 거리)"""
    rows = [
        {
            "id": record.sample_id,
            "centroid_before": record.centroid_before.name,
            "centroid_after": record.centroid_after.name,
            "switched": record.switched,
            "displacement": record.displacement,
        }
        for record in sorted(records, key=lambda record: record.sample_id)
    ]
    return pd.DataFrame(rows, columns=["id", "centroid_before", "centroid_after", "switched", "displacement"])


# =============================================================================
# 2차원 투영
# =============================================================================

@dataclass(frozen=True, eq=False)
class Projection2D:
    """샘플별 2차원 좌표 (PCA 는 주성분/평균 포함)"""

    ids: tuple
    coordinates: np.ndarray
    method: str
    components: object = None
    mean: object = None

    def transform(self, vectors):
        """같은 PCA 좌표계로 새 벡터 투영"""
        if self.components is None:
            raise ValueError(f"{self.method} 투영은 새 벡터를 투영할 수 없습니다.")
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        coordinates = (vectors - self.mean) @ self.components.T
        if coordinates.shape[1] < 2:
            coordinates = np.hstack([coordinates, np.zeros((len(coordinates), 2 - coordinates.shape[1]))])
        return coordinates

    def to_frame(self, matrix=None):
        frame = pd.DataFrame({"id": list(self.ids), "x": self.coordinates[:, 0], "y": self.coordinates[:, 1]})
        if matrix is not None:
            lookup = dict(zip(matrix.ids, matrix.subgroups))
            frame.insert(1, "subgroup", [lookup[sample_id].name for sample_id in self.ids])
        return frame


def project_2d(matrix, method="pca", seed=0):
    """임베딩 → 2차원 좌표 (pca: 부호 고정 결정적, tsne: 시드 고정)"""
    if len(matrix) < 2:
        raise ValueError(f"투영에는 행이 2개 이상 필요합니다: {len(matrix)}개")
    if method not in PROJECTION_METHODS:
        raise ValueError(f"알 수 없는 투영 방법: {method}")
    vectors = np.asarray(matrix.vectors, dtype=np.float64)

    if method == "tsne":
        tsne = TSNE(n_components=2, perplexity=min(30.0, len(matrix) - 1.0), init="pca", random_state=seed)
        return Projection2D(matrix.ids, tsne.fit_transform(vectors), method)

    pca = PCA(n_components=min(2, len(matrix), matrix.dim), svd_solver="full")
    pca.fit(vectors)
    components = pca.components_.copy()
    # 절댓값이 가장 큰 적재값이 양수가 되도록 부호 고정
    for row in range(len(components)):
        if components[row, np.argmax(np.abs(components[row]))] < 0:
            components[row] = -components[row]
    projection = Projection2D(matrix.ids, np.zeros((len(matrix), 2)), method, components, pca.mean_.copy())
    object.__setattr__(projection, "coordinates", projection.transform(vectors))
    return projection
