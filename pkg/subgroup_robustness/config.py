#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
감사 실행 설정

우선순위: 명령행 플래그 > 환경 변수 > 설정 파일(JSON) > 기본값

환경 변수 이름: SUBGROUP_AUDIT_<SECTION>_<FIELD>  (예: SUBGROUP_AUDIT_ATTACK_BUDGET=0.02)
값은 가능하면 JSON 리터럴로 해석하고, 아니면 문자열로 사용한다.
"""

import copy
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .attack import AttackConfig
from .checkpoint import canonical_json, sha256_bytes
from .errors import ConfigError
from .probes import ProbeConfig
from .seeding import derive_seed
from .vae import BETA_PRESETS, ModelConfig, TrainConfig

ENV_PREFIX = "SUBGROUP_AUDIT_"
DEFAULT_GROUP_LABELS = {
    "Male": {"+": "men", "-": "women"},
    "Young": {"+": "young", "-": "old"},
}
# 10:1 불균형 (최대 : 최소)
DEFAULT_CARDINALITIES = {
    "not_Male-Young": 400,
    "Male-Young": 200,
    "Male-not_Young": 80,
    "not_Male-not_Young": 40,
}


@dataclass(frozen=True)
class DataConfig:
    """데이터 원천: synthetic | folder | celeba"""

    source: str = "synthetic"
    directory: str = ""
    image_dir: str = ""
    attribute_file: str = ""
    protected: tuple = ("Male", "Young")
    resolution: tuple = (64, 64)
    channels: int = 3
    limit: object = None
    group_labels: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_GROUP_LABELS))

    def __post_init__(self):
        object.__setattr__(self, "protected", tuple(self.protected))
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        if self.source not in ("synthetic", "folder", "celeba"):
            raise ConfigError(f"알 수 없는 데이터 원천: {self.source}")
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            raise ConfigError(f"resolution 은 (H, W) 양수여야 합니다: {self.resolution}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels 는 1 또는 3 이어야 합니다: {self.channels}")


@dataclass(frozen=True)
class SyntheticConfig:
    """합성 불균형 데이터셋 설정"""

    cardinalities: dict = field(default_factory=lambda: dict(DEFAULT_CARDINALITIES))
    noise_scale: float = 0.05
    prototype_coarse: int = 4
    seed: object = None

    def __post_init__(self):
        negative = {name: count for name, count in self.cardinalities.items() if int(count) < 0}
        if negative:
            raise ConfigError(f"하위집단 크기는 0 이상이어야 합니다: {negative}")
        if self.noise_scale < 0:
            raise ConfigError(f"noise_scale 은 0 이상이어야 합니다: {self.noise_scale}")


@dataclass(frozen=True)
class EvaluationConfig:
    """하위집단별 평가 샘플 수"""

    n: int = 60
    seed: object = None

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"evaluation.n 은 1 이상이어야 합니다: {self.n}")


@dataclass(frozen=True)
class ProbeSection:
    targets: tuple = ("Male", "Young")
    probe: ProbeConfig = field(default_factory=ProbeConfig)


@dataclass(frozen=True)
class LatentConfig:
    """잠재 공간 분석 설정"""

    k: int = 10
    knn_mode: str = "per_subgroup"
    projection: str = "pca"
    tsne: bool = False
    pull_samples: int = 5
    seed: object = None

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"latent.k 는 1 이상이어야 합니다: {self.k}")
        if self.knn_mode not in ("per_subgroup", "global"):
            raise ConfigError(f"알 수 없는 k-NN 모드: {self.knn_mode}")
        if self.projection not in ("pca", "tsne"):
            raise ConfigError(f"알 수 없는 투영 방법: {self.projection}")


@dataclass(frozen=True)
class RuntimeConfig:
    seed: int = 0
    workers: int = 1
    out: str = "runs"
    progress: bool = True

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError(f"workers 는 1 이상이어야 합니다: {self.workers}")


@dataclass(frozen=True)
class AuditConfig:
    """실행 설정 전체 (섹션별 dataclass)"""

    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    betas: tuple = BETA_PRESETS
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    probes: ProbeSection = field(default_factory=ProbeSection)
    latent: LatentConfig = field(default_factory=LatentConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    explicit_seeds: frozenset = frozenset()

    def __post_init__(self):
        betas = tuple(float(beta) for beta in self.betas)
        if not betas:
            raise ConfigError("betas 가 비어 있습니다.")
        if any(beta < 1 for beta in betas):
            raise ConfigError(f"β 는 1 이상이어야 합니다: {betas}")
        if len(set(betas)) != len(betas):
            raise ConfigError(f"중복된 β: {betas}")
        object.__setattr__(self, "betas", betas)
        expected = (*self.data.resolution, self.data.channels)
        if self.model.input_dims != expected:
            raise ConfigError(f"model.input_dims {self.model.input_dims} 가 데이터 해상도 {expected} 와 다름")

    # ------------------------------------------------------------------
    def seed_registry(self):
        """확률적 단계별 시드 (섹션에 명시된 시드가 우선)"""
        base = self.runtime.seed
        stages = {
            "synthesis": self.synthetic.seed,
            "train": self.train.seed,
            "evaluation": self.evaluation.seed,
            "attack": self.attack.seed,
            "probes": self.probes.probe.seed,
            "tsne": self.latent.seed,
        }
        seeds = {
            stage: int(value) if stage in self.explicit_seeds and value is not None else derive_seed(base, stage)
            for stage, value in stages.items()
        }
        # β 마다 독립된 학습 시드
        for beta in self.betas:
            seeds[beta_seed_key(beta)] = derive_seed(seeds["train"], f"beta={beta:g}")
        return seeds

    def resolved(self):
        """시드 레지스트리를 각 섹션에 반영한 설정"""
        seeds = self.seed_registry()
        return replace(
            self,
            synthetic=replace(self.synthetic, seed=seeds["synthesis"]),
            train=replace(self.train, seed=seeds["train"]),
            evaluation=replace(self.evaluation, seed=seeds["evaluation"]),
            attack=replace(self.attack, seed=seeds["attack"]),
            probes=replace(self.probes, probe=replace(self.probes.probe, seed=seeds["probes"])),
            latent=replace(self.latent, seed=seeds["tsne"]),
            explicit_seeds=frozenset(seeds),
        )

    def to_dict(self):
        model = self.model.to_dict()
        model.pop("beta")
        model["betas"] = list(self.betas)
        return {
            "data": {
                "source": self.data.source,
                "directory": self.data.directory,
                "image_dir": self.data.image_dir,
                "attribute_file": self.data.attribute_file,
                "protected": list(self.data.protected),
                "resolution": list(self.data.resolution),
                "channels": self.data.channels,
                "limit": self.data.limit,
                "group_labels": self.data.group_labels,
            },
            "synthetic": {
                "cardinalities": dict(sorted(self.synthetic.cardinalities.items())),
                "noise_scale": self.synthetic.noise_scale,
                "prototype_coarse": self.synthetic.prototype_coarse,
                "seed": self.synthetic.seed,
            },
            "model": model,
            "train": {
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "learning_rate": self.train.learning_rate,
                "seed": self.train.seed,
            },
            "attack": self.attack.to_dict(),
            "evaluation": {"n": self.evaluation.n, "seed": self.evaluation.seed},
            "probes": {"targets": list(self.probes.targets), **self.probes.probe.to_dict()},
            "latent": {
                "k": self.latent.k,
                "knn_mode": self.latent.knn_mode,
                "projection": self.latent.projection,
                "tsne": self.latent.tsne,
                "pull_samples": self.latent.pull_samples,
                "seed": self.latent.seed,
            },
            "runtime": {
                "seed": self.runtime.seed,
                "workers": self.runtime.workers,
                "out": self.runtime.out,
                "progress": self.runtime.progress,
            },
        }

    def config_hash(self):
        return sha256_bytes(canonical_json(self.to_dict()).encode("utf-8"))

    def model_config(self, beta):
        return self.model.with_beta(beta)

    def train_config(self, beta):
        """β 별 학습 설정 (시드는 레지스트리의 β 시드)"""
        return replace(self.train, seed=self.seed_registry()[beta_seed_key(beta)])


def beta_seed_key(beta):
    return f"train_beta={beta:g}"


SECTIONS = ("data", "synthetic", "model", "train", "attack", "evaluation", "probes", "latent", "runtime")


def _defaults():
    return AuditConfig().to_dict()


def _parse_env_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(environ=None):
    """SUBGROUP_AUDIT_<SECTION>_<FIELD> 환경 변수 → {section: {field: value}}"""
    environ = os.environ if environ is None else environ
    overrides = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section = next((candidate for candidate in SECTIONS if rest.startswith(candidate + "_")), None)
        if section is None:
            raise ConfigError(f"알 수 없는 설정 환경 변수: {name}")
        overrides.setdefault(section, {})[rest[len(section) + 1:]] = _parse_env_value(raw)
    return overrides


def _merge(base, layer, origin):
    for section, values in layer.items():
        if section not in base:
            raise ConfigError(f"{origin}: 알 수 없는 설정 섹션: {section}")
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: 섹션 {section} 은 객체여야 합니다.")
        for key, value in values.items():
            if key not in base[section]:
                raise ConfigError(f"{origin}: 알 수 없는 설정 항목: {section}.{key}")
            base[section][key] = value


def _seeded_sections(*layers):
    names = {"synthetic": "synthesis", "train": "train", "evaluation": "evaluation", "attack": "attack",
             "probes": "probes", "latent": "tsne"}
    explicit = set()
    for layer in layers:
        for section, values in layer.items():
            if section in names and isinstance(values, dict) and values.get("seed") is not None:
                explicit.add(names[section])
    return frozenset(explicit)


def from_dict(payload, explicit_seeds=frozenset()):
    """섹션 딕셔너리 → AuditConfig (검증 포함)"""
    try:
        data = DataConfig(**payload["data"])
        model_values = dict(payload["model"])
        betas = tuple(model_values.pop("betas"))
        model = ModelConfig(beta=betas[0] if betas else 1.0, **model_values)
        probe_values = dict(payload["probes"])
        targets = tuple(probe_values.pop("targets"))
        return AuditConfig(
            data=data,
            synthetic=SyntheticConfig(**payload["synthetic"]),
            model=model,
            betas=betas,
            train=TrainConfig(**payload["train"]),
            attack=AttackConfig(**payload["attack"]),
            evaluation=EvaluationConfig(**payload["evaluation"]),
            probes=ProbeSection(targets, ProbeConfig(**probe_values)),
            latent=LatentConfig(**payload["latent"]),
            runtime=RuntimeConfig(**payload["runtime"]),
            explicit_seeds=frozenset(explicit_seeds),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"설정 값 오류: {exc}") from exc


def load_config(path=None, environ=None, overrides=None):
    """기본값 ← 설정 파일 ← 환경 변수 ← 플래그 순서로 병합"""
    payload = _defaults()
    file_layer = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"설정 파일이 없습니다: {path}")
        try:
            file_layer = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"설정 파일 JSON 오류 ({path}): {exc}") from exc
        if not isinstance(file_layer, dict):
            raise ConfigError(f"설정 파일 최상위는 객체여야 합니다: {path}")
        _merge(payload, file_layer, str(path))
    env_layer = env_overrides(environ)
    _merge(payload, env_layer, "환경 변수")
    flag_layer = overrides or {}
    _merge(payload, flag_layer, "명령행 플래그")
    return from_dict(payload, _seeded_sections(file_layer, env_layer, flag_layer))


def save_config(config, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                    encoding="utf-8")
    return path


def small_profile(**sections):
    """8×8 흑백 소형 설정 (테스트/데모용), 섹션별 덮어쓰기 가능"""
    payload = _defaults()
    payload["data"].update({"resolution": [8, 8], "channels": 1})
    payload["model"].update({"input_dims": [8, 8, 1], "latent_dim": 2, "channels": [4, 8], "hidden_dims": [16]})
    payload["synthetic"].update({"cardinalities": {"not_Male-Young": 40, "Male-Young": 20, "Male-not_Young": 8,
                                                   "not_Male-not_Young": 4}})
    payload["train"].update({"epochs": 5, "batch_size": 16, "learning_rate": 1e-3})
    payload["attack"].update({"steps": 10})
    payload["evaluation"].update({"n": 4})
    payload["probes"].update({"channels": [4, 8], "epochs": 5})
    payload["latent"].update({"k": 3, "pull_samples": 2})
    payload["runtime"].update({"progress": False})
    _merge(payload, sections, "small_profile")
    return from_dict(payload, _seeded_sections(sections))


def section_fields(section):
    """섹션의 설정 항목 이름 목록"""
    return list(_defaults()[section])

