#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
L∞ 예산 하의 최대 손상(maximum-damage) 공격

- 잠재 공간 목적함수: ‖q(z | normalize(x + δ)) − q(z | x)‖
- 출력 공간 목적함수: ‖x̂(normalize(x + δ)) − x̂(x)‖₂
- 부호 경사 PGD + 최선값(best-so-far) 추적
"""

import json
from collections.abc import MutableMapping
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple
from urllib.parse import quote

import numpy as np
import torch
from tqdm import tqdm

from .checkpoint import canonical_json, sha256_bytes, sha256_file
from .dataio import normalize_image
from .errors import AttackDivergedError, AuditError, BudgetError, ConfigError
from .seeding import derive_seed, torch_generator
from .vae import as_model, check_image, model_dtype, to_tensor

BUDGET_TOLERANCE = 1e-6
DEFAULT_BUDGET = 0.05
DEFAULT_STEPS = 200
STEP_SIZE_DIVISOR = 20

INITS = ("zero", "uniform")
OBJECTIVES = ("latent", "output")
DISTANCES = ("mean_l2", "gaussian_w2")

RECORD_SUFFIX = ".json"
DELTA_SUFFIX = ".npy"
BATCH_MANIFEST_NAME = "batch_manifest.json"


# =============================================================================
# 설정 / 결과 타입
# =============================================================================

@dataclass(frozen=True)
class AttackConfig:
    """공격 설정 (step_size 가 None 이면 budget / 20)"""

    budget: float = DEFAULT_BUDGET
    steps: int = DEFAULT_STEPS
    step_size: object = None
    init: str = "zero"
    objective: str = "latent"
    distance: str = "mean_l2"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "budget", float(self.budget))
        if self.step_size is not None:
            object.__setattr__(self, "step_size", float(self.step_size))
        if not np.isfinite(self.budget) or self.budget < 0:
            raise BudgetError(f"예산 c 는 0 이상이어야 합니다: {self.budget}")
        if self.steps < 0:
            raise ConfigError(f"steps 는 0 이상이어야 합니다: {self.steps}")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError(f"step_size 는 양수여야 합니다: {self.step_size}")
        if self.init not in INITS:
            raise ConfigError(f"알 수 없는 초기화: {self.init}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"알 수 없는 목적함수: {self.objective}")
        if self.distance not in DISTANCES:
            raise ConfigError(f"알 수 없는 거리: {self.distance}")

    @property
    def effective_step_size(self):
        if self.step_size is not None:
            return self.step_size
        return self.budget / STEP_SIZE_DIVISOR

    def with_budget(self, budget):
        return replace(self, budget=float(budget))

    def to_dict(self):
        return {
            "budget": self.budget,
            "steps": self.steps,
            "step_size": self.step_size,
            "init": self.init,
            "objective": self.objective,
            "distance": self.distance,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(**payload)

    def config_hash(self):
        return sha256_bytes(canonical_json(self.to_dict()).encode("utf-8"))


@dataclass(frozen=True, eq=False)
class AttackArtifact:
    """샘플별 최적 섭동 δ 와 목적함수 궤적"""

    sample_id: str
    delta: np.ndarray
    achieved_objective: float
    trajectory: tuple
    config: AttackConfig

    @property
    def budget(self):
        return self.config.budget

    @property
    def linf(self):
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0

    def record(self):
        return {
            "id": self.sample_id,
            "config": self.config.to_dict(),
            "achieved_objective": self.achieved_objective,
            "trajectory": list(self.trajectory),
        }


class AttackBatch(NamedTuple):
    artifacts: dict
    failures: dict


# =============================================================================
# 기본 연산
# =============================================================================

def project_linf(delta, c):
    """δ 를 [−c, c] 로 원소별 클램프"""
    if c < 0:
        raise BudgetError(f"예산 c 는 0 이상이어야 합니다: {c}")
    if isinstance(delta, torch.Tensor):
        if not bool(torch.isfinite(delta).all()):
            raise ValueError("δ 에 유한하지 않은 값이 있습니다.")
        return torch.clamp(delta, -c, c)
    array = np.asarray(delta)
    if not np.isfinite(array).all():
        raise ValueError("δ 에 유한하지 않은 값이 있습니다.")
    return np.clip(array, -c, c)


def latent_discrepancy(code_a, code_b, kind="mean_l2"):
    """두 대각 가우시안 사후분포 사이 거리"""
    if kind not in DISTANCES:
        raise ValueError(f"알 수 없는 거리: {kind}")
    if code_a.dim != code_b.dim:
        raise ValueError(f"잠재 차원 불일치: {code_a.dim} vs {code_b.dim}")
    mean_gap = float(np.sum((code_a.mean - code_b.mean) ** 2))
    if kind == "mean_l2":
        return float(np.sqrt(mean_gap))
    sigma_gap = float(np.sum((code_a.sigma - code_b.sigma) ** 2))
    return float(np.sqrt(mean_gap + sigma_gap))


def discrepancy_tensor(mean_a, log_variance_a, mean_b, log_variance_b, kind="mean_l2"):
    """latent_discrepancy 의 미분 가능한 텐서 버전 (배치 크기 1)"""
    gap = (mean_a - mean_b).flatten()
    if kind == "gaussian_w2":
        sigma_gap = (torch.exp(0.5 * log_variance_a) - torch.exp(0.5 * log_variance_b)).flatten()
        gap = torch.cat([gap, sigma_gap])
    elif kind != "mean_l2":
        raise ValueError(f"알 수 없는 거리: {kind}")
    # 0 벡터에서 norm 의 기울기는 0 으로 정의됨
    return torch.linalg.vector_norm(gap)


def verify_budget(artifact):
    """‖δ‖∞ ≤ c + 1e-6 여부"""
    return artifact.linf <= artifact.budget + BUDGET_TOLERANCE


# =============================================================================
# PGD
# =============================================================================

def _objective_fn(model, x, config):
    """δ → 목적함수 값 (텐서) 클로저"""
    with torch.no_grad():
        if config.objective == "latent":
            reference = tuple(value.detach() for value in model.encode_tensor(x))
        else:
            reference = model.reconstruct_tensor(x).detach()

    def objective(delta):
        adversarial = normalize_image(x + delta)
        if config.objective == "latent":
            mean, log_variance = model.encode_tensor(adversarial)
            return discrepancy_tensor(mean, log_variance, *reference, kind=config.distance)
        return torch.linalg.vector_norm((model.reconstruct_tensor(adversarial) - reference).flatten())

    return objective


def _initial_delta(x, config, generator):
    if config.init == "uniform":
        uniform = torch.rand(x.shape, generator=generator, dtype=x.dtype)
        return (2.0 * uniform - 1.0) * config.budget
    return torch.zeros_like(x)


def _run_pgd(model, x, config, sample_id):
    """부호 경사 상승, 반환값: (최선 δ, 최선값 궤적)"""
    dtype = model_dtype(model)
    batch = to_tensor(x, dtype)
    generator = torch_generator(derive_seed(config.seed, sample_id))
    objective = _objective_fn(model, batch, config)
    step_size = config.effective_step_size

    delta = project_linf(_initial_delta(batch, config, generator), config.budget)
    best_value = -np.inf
    best_delta = delta
    trajectory = []

    with torch.enable_grad():
        for step in range(config.steps + 1):
            current = delta.detach().requires_grad_(True)
            value = objective(current)
            if not bool(torch.isfinite(value)):
                raise AttackDivergedError(step, float(value))

            if float(value) > best_value:
                best_value = float(value)
                best_delta = current.detach()
            trajectory.append(best_value)
            if step == config.steps:
                break

            (gradient,) = torch.autograd.grad(value, current)
            direction = torch.sign(gradient)
            if not bool(direction.any()):
                # 기울기가 모두 0 이면 시드 고정 Rademacher 방향
                direction = torch.randint(0, 2, batch.shape, generator=generator).to(dtype) * 2.0 - 1.0
            delta = project_linf(current.detach() + step_size * direction, config.budget)

    pixels = best_delta[0].detach().to(torch.float64).numpy().transpose(1, 2, 0)
    return np.ascontiguousarray(pixels), tuple(trajectory)


def _attack(model, x, config, sample_id):
    model = as_model(model)
    check_image(model, x)
    if config.budget == 0:
        delta = np.zeros(tuple(model.input_dims), dtype=np.float64)
        return AttackArtifact(sample_id, delta, 0.0, (0.0,) * (config.steps + 1), config)
    delta, trajectory = _run_pgd(model, x, config, sample_id)
    return AttackArtifact(sample_id, delta, trajectory[-1], trajectory, config)


def max_damage_attack(model, x, config, sample_id=""):
    """잠재 분포 차이를 최대화하는 δ 탐색"""
    if config.objective != "latent":
        config = replace(config, objective="latent")
    return _attack(model, x, config, sample_id)


def output_space_attack(model, x, config, sample_id=""):
    """결정적 재구성 사이 L2 간격을 최대화하는 δ 탐색"""
    if config.objective != "output":
        config = replace(config, objective="output")
    return _attack(model, x, config, sample_id)


def run_attack(model, x, config, sample_id=""):
    """config.objective 에 맞는 공격 실행"""
    if config.objective == "output":
        return output_space_attack(model, x, config, sample_id)
    return max_damage_attack(model, x, config, sample_id)


def attack_many(model, items, config, workers=1, cache=None, progress=True):
    """(id, 이미지) 목록에 대해 공격 실행 → AttackBatch (id 순 정렬)

    cache 가 주어지면 캐시된 결과를 재사용하고 새 결과를 저장한다.
    """
    model = as_model(model)
    items = sorted(items, key=lambda item: item[0])
    artifacts, failures = {}, {}

    pending = []
    for sample_id, x in items:
        cached = cache.get(sample_id) if cache is not None else None
        if cached is not None:
            artifacts[sample_id] = cached
        else:
            pending.append((sample_id, x))
    if cache is not None and artifacts:
        print(f"💾 캐시 재사용: {len(artifacts)}개, 새로 계산: {len(pending)}개")

    with tqdm(total=len(pending), desc="🎯 공격", disable=not progress or not pending) as bar:
        with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
            futures = {pool.submit(run_attack, model, x, config, sample_id): sample_id for sample_id, x in pending}
            for future in as_completed(futures):
                sample_id = futures[future]
                try:
                    artifacts[sample_id] = future.result()
                except Exception as exc:
                    failures[sample_id] = f"{type(exc).__name__}: {exc}"
                    tqdm.write(f"⚠️ 공격 실패 ({sample_id}): {exc}")
                bar.update(1)

    if cache is not None:
        for sample_id, _ in pending:
            if sample_id in artifacts:
                cache[sample_id] = artifacts[sample_id]
        cache.write_manifest()
    return AttackBatch(dict(sorted(artifacts.items())), dict(sorted(failures.items())))


# =============================================================================
# 영속화
# =============================================================================

def _stem(sample_id):
    """샘플 id → 파일 이름 (퍼센트 인코딩, 서로 다른 id 는 서로 다른 이름)"""
    return quote(sample_id, safe="")


def save_artifact(artifact, directory):
    """JSON 기록 + δ 의 .npy blob 저장, 파일 경로 쌍 반환"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = _stem(artifact.sample_id)
    delta_path = directory / f"{stem}{DELTA_SUFFIX}"
    record_path = directory / f"{stem}{RECORD_SUFFIX}"

    np.save(delta_path, np.ascontiguousarray(artifact.delta, dtype=np.float64), allow_pickle=False)
    record = artifact.record()
    record["delta_file"] = delta_path.name
    record["delta_sha256"] = sha256_file(delta_path)
    record_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return record_path, delta_path


def load_artifact(record_path):
    """JSON 기록과 δ blob 을 읽고 해시 검증"""
    record_path = Path(record_path)
    record = json.loads(record_path.read_text(encoding="utf-8"))
    delta_path = record_path.parent / record["delta_file"]
    if sha256_file(delta_path) != record["delta_sha256"]:
        raise AuditError(f"δ 파일 해시 불일치: {delta_path}")
    delta = np.load(delta_path, allow_pickle=False)
    return AttackArtifact(
        sample_id=record["id"],
        delta=delta,
        achieved_objective=float(record["achieved_objective"]),
        trajectory=tuple(float(value) for value in record["trajectory"]),
        config=AttackConfig.from_dict(record["config"]),
    )


def write_batch_manifest(directory):
    """디렉터리의 모든 공격 기록/δ 파일과 해시 목록 작성"""
    directory = Path(directory)
    entries = []
    for record_path in sorted(directory.glob(f"*{RECORD_SUFFIX}")):
        if record_path.name == BATCH_MANIFEST_NAME:
            continue
        record = json.loads(record_path.read_text(encoding="utf-8"))
        entries.append({
            "id": record["id"],
            "record": record_path.name,
            "record_sha256": sha256_file(record_path),
            "delta": record["delta_file"],
            "delta_sha256": record["delta_sha256"],
        })
    path = directory / BATCH_MANIFEST_NAME
    path.write_text(json.dumps({"artifacts": entries}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


class ArtifactCache(MutableMapping):
    """(체크포인트 해시, 샘플 id, 공격 설정 해시) 키 디스크 캐시

    sample id → AttackArtifact 매핑처럼 동작하며, 해시가 맞지 않는 항목은 없는 것으로 취급한다.
    """

    def __init__(self, root, checkpoint_hash, config):
        self.config = config
        self.checkpoint_hash = checkpoint_hash
        self.directory = Path(root) / checkpoint_hash[:16] / config.config_hash()[:16]

    def _record_path(self, sample_id):
        return self.directory / f"{_stem(sample_id)}{RECORD_SUFFIX}"

    def __getitem__(self, sample_id):
        path = self._record_path(sample_id)
        if not path.exists():
            raise KeyError(sample_id)
        try:
            artifact = load_artifact(path)
        except (AuditError, OSError, ValueError, KeyError) as exc:
            print(f"⚠️ 캐시 항목 무시 ({sample_id}): {exc}")
            raise KeyError(sample_id) from None
        if artifact.config != self.config or artifact.sample_id != sample_id:
            raise KeyError(sample_id)
        return artifact

    def __setitem__(self, sample_id, artifact):
        if artifact.sample_id != sample_id:
            raise ValueError(f"id 불일치: {sample_id} vs {artifact.sample_id}")
        save_artifact(artifact, self.directory)

    def __delitem__(self, sample_id):
        path = self._record_path(sample_id)
        if not path.exists():
            raise KeyError(sample_id)
        record = json.loads(path.read_text(encoding="utf-8"))
        (self.directory / record["delta_file"]).unlink(missing_ok=True)
        path.unlink()

    def __iter__(self):
        if not self.directory.exists():
            return iter(())
        ids = []
        for path in sorted(self.directory.glob(f"*{RECORD_SUFFIX}")):
            if path.name != BATCH_MANIFEST_NAME:
                ids.append(json.loads(path.read_text(encoding="utf-8"))["id"])
        return iter(sorted(ids))

    def __len__(self):
        return sum(1 for _ in self)

    def write_manifest(self):
        self.directory.mkdir(parents=True, exist_ok=True)
        return write_batch_manifest(self.directory)
