#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
속성 주석 이미지 데이터셋 입출력 및 교차 하위집단(subgroup) 구성

- CelebA 속성 파일 파싱 (list_attr 형식)
- 보호 속성 교차로 하위집단 테이블 생성
- 하위집단별 시드 고정 평가 샘플 추출
- 불균형 합성 데이터셋 생성 (데스크 규모 테스트용)
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from PIL import Image
from scipy import ndimage

from .errors import AttributeFileError, SchemaError, ShapeMismatchError
from .seeding import derive_seed

POSITIVE = 1
NEGATIVE = -1
SIGN_BY_VALUE = {POSITIVE: "+", NEGATIVE: "-"}
VALUE_BY_SIGN = {"+": POSITIVE, "-": NEGATIVE}
NEGATIVE_PREFIX = "not_"
ALL_SAMPLES_NAME = "all"

ATTRIBUTE_FILE_NAME = "list_attr.txt"
MANIFEST_FILE_NAME = "manifest.json"
IMAGE_DIR_NAME = "images"


# =============================================================================
# 도메인 타입
# =============================================================================

@dataclass(frozen=True)
class AttributeSchema:
    """속성 이름 목록과 보호 속성 부분집합"""

    names: tuple
    protected: tuple = ()

    def __post_init__(self):
        names = tuple(self.names)
        if len(set(names)) != len(names):
            duplicated = sorted({name for name in names if names.count(name) > 1})
            raise SchemaError(f"중복된 속성 이름: {duplicated}")
        unknown = [name for name in self.protected if name not in names]
        if unknown:
            raise SchemaError(f"스키마에 없는 보호 속성: {unknown}")
        # 보호 속성은 항상 스키마 순서로 정렬
        protected = tuple(name for name in names if name in set(self.protected))
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "protected", protected)

    def with_protected(self, protected):
        return AttributeSchema(self.names, tuple(protected))


@dataclass(frozen=True)
class ImageSample:
    """이미지 한 장 (픽셀 H×W×C ∈ [0,1]) 과 속성 값 (±1)"""

    id: str
    pixels: np.ndarray
    attributes: dict


@dataclass(frozen=True, order=True)
class SubgroupKey:
    """보호 속성별 (속성, '+'/'-') 할당의 순서 있는 목록"""

    assignments: tuple = ()

    @classmethod
    def from_values(cls, protected, values):
        return cls(tuple((name, SIGN_BY_VALUE[int(value)]) for name, value in zip(protected, values)))

    @classmethod
    def from_name(cls, name):
        """정규 이름 ('Male-not_Young') 으로부터 키 복원"""
        if name == ALL_SAMPLES_NAME:
            return cls(())
        assignments = []
        for token in name.split("-"):
            if token.startswith(NEGATIVE_PREFIX):
                assignments.append((token[len(NEGATIVE_PREFIX):], "-"))
            else:
                assignments.append((token, "+"))
        return cls(tuple(assignments))

    @property
    def attributes(self):
        return tuple(name for name, _ in self.assignments)

    @property
    def name(self):
        if not self.assignments:
            return ALL_SAMPLES_NAME
        return "-".join(name if sign == "+" else f"{NEGATIVE_PREFIX}{name}" for name, sign in self.assignments)

    def value(self, attribute):
        for name, sign in self.assignments:
            if name == attribute:
                return VALUE_BY_SIGN[sign]
        raise KeyError(attribute)

    def restrict(self, attribute):
        """단일 보호 속성으로 주변화(marginalize)한 키"""
        return SubgroupKey(tuple(pair for pair in self.assignments if pair[0] == attribute))

    def label(self, group_labels=None):
        """사람이 읽기 쉬운 표시 이름 (예: 'men-young')"""
        if not group_labels:
            return self.name
        parts = []
        for name, sign in self.assignments:
            mapping = group_labels.get(name, {})
            parts.append(mapping.get(sign, name if sign == "+" else f"{NEGATIVE_PREFIX}{name}"))
        return "-".join(parts) if parts else ALL_SAMPLES_NAME

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class SubgroupTable:
    """하위집단 키 → 샘플 id 목록 (데이터셋 분할)"""

    protected: tuple
    groups: dict

    def __post_init__(self):
        groups = {key: tuple(sorted(ids)) for key, ids in sorted(self.groups.items())}
        owner = {}
        for key, ids in groups.items():
            for sample_id in ids:
                if sample_id in owner:
                    raise SchemaError(f"샘플 {sample_id!r} 이(가) 두 하위집단에 속함: {owner[sample_id]}, {key}")
                owner[sample_id] = key
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "_owner", owner)

    @property
    def cardinalities(self):
        return {key: len(ids) for key, ids in self.groups.items()}

    @property
    def size(self):
        return len(self._owner)

    def keys(self):
        return list(self.groups)

    def nonempty_keys(self):
        return [key for key, ids in self.groups.items() if ids]

    def subgroup_of(self, sample_id):
        return self._owner[sample_id]


@dataclass(frozen=True)
class EvaluationWarning:
    """하위집단 크기가 요청 샘플 수보다 작을 때의 경고 기록"""

    subgroup: SubgroupKey
    requested: int
    available: int

    @property
    def message(self):
        if self.available == 0:
            return f"하위집단 {self.subgroup.name} 이(가) 비어 있음"
        return f"하위집단 {self.subgroup.name}: 요청 {self.requested}개 중 {self.available}개만 존재"


@dataclass(frozen=True)
class EvaluationSet:
    """하위집단별 평가 샘플 id 목록"""

    per_subgroup: dict
    seed: int
    n: int
    warnings: tuple = ()

    def ids(self):
        return sorted(sample_id for ids in self.per_subgroup.values() for sample_id in ids)

    def subgroup_of(self, sample_id):
        for key, ids in self.per_subgroup.items():
            if sample_id in ids:
                return key
        raise KeyError(sample_id)

    def items(self):
        """(id, 하위집단) 쌍을 id 순서로 반환"""
        pairs = [(sample_id, key) for key, ids in self.per_subgroup.items() for sample_id in ids]
        return sorted(pairs, key=lambda pair: pair[0])

    @property
    def size(self):
        return sum(len(ids) for ids in self.per_subgroup.values())

    def to_dict(self):
        return {
            "seed": self.seed,
            "n": self.n,
            "subgroups": {key.name: list(ids) for key, ids in self.per_subgroup.items()},
            "warnings": [warning.message for warning in self.warnings],
        }

    @classmethod
    def from_dict(cls, payload):
        per_subgroup = {SubgroupKey.from_name(name): tuple(ids) for name, ids in payload["subgroups"].items()}
        return cls(dict(sorted(per_subgroup.items())), int(payload["seed"]), int(payload["n"]))


@dataclass(frozen=True, eq=False)
class ImageDataset:
    """메모리 상 데이터셋: 픽셀 배열 (n,H,W,C) + 속성 DataFrame (index=id)"""

    schema: AttributeSchema
    ids: tuple
    pixels: np.ndarray
    attributes: pd.DataFrame
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        ids = tuple(self.ids)
        pixels = np.array(self.pixels, dtype=np.float32, copy=True)
        if pixels.ndim != 4 or len(pixels) != len(ids):
            raise ShapeMismatchError(f"픽셀 배열 크기 {pixels.shape} 가 샘플 수 {len(ids)} 와 맞지 않음")
        if len(set(ids)) != len(ids):
            raise SchemaError("중복된 샘플 id 가 있습니다.")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ShapeMismatchError("픽셀 값은 [0,1] 범위여야 합니다.")
        missing = [name for name in self.schema.names if name not in self.attributes.columns]
        if missing:
            raise SchemaError(f"속성 열 누락: {missing}")
        pixels.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "attributes", self.attributes.loc[list(ids), list(self.schema.names)])
        object.__setattr__(self, "_index", {sample_id: i for i, sample_id in enumerate(ids)})

    def __len__(self):
        return len(self.ids)

    @property
    def image_shape(self):
        return tuple(self.pixels.shape[1:])

    def image(self, sample_id):
        return self.pixels[self._index[sample_id]]

    def images(self, ids):
        return self.pixels[[self._index[sample_id] for sample_id in ids]]

    def sample(self, sample_id):
        values = self.attributes.loc[sample_id]
        return ImageSample(sample_id, self.image(sample_id), {name: int(values[name]) for name in self.schema.names})

    def __iter__(self):
        for sample_id in self.ids:
            yield self.sample(sample_id)

    def labels(self, ids, attribute):
        return self.attributes.loc[list(ids), attribute].to_numpy(dtype=np.int64)


@dataclass(frozen=True)
class DatasetManifest:
    """데이터셋 매니페스트 (JSON 으로 저장)"""

    schema: tuple
    protected: tuple
    cardinalities: dict
    seed: object = None
    source_paths: tuple = ()
    image_shape: tuple = ()

    def to_dict(self):
        return {
            "schema": list(self.schema),
            "protected": list(self.protected),
            "cardinalities": dict(sorted(self.cardinalities.items())),
            "seed": self.seed,
            "source_paths": list(self.source_paths),
            "image_shape": list(self.image_shape),
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            schema=tuple(payload["schema"]),
            protected=tuple(payload["protected"]),
            cardinalities=dict(payload["cardinalities"]),
            seed=payload.get("seed"),
            source_paths=tuple(payload.get("source_paths", ())),
            image_shape=tuple(payload.get("image_shape", ())),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# =============================================================================
# 속성 파일 파싱
# =============================================================================

def parse_attribute_file(text):
    """CelebA list_attr 형식 파싱 → (스키마, id → {속성: ±1})"""
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if len(lines) < 2:
        raise AttributeFileError("헤더(이미지 수, 속성 이름)가 없습니다.", len(lines) + 1)

    try:
        declared = int(lines[0].strip())
    except ValueError:
        raise AttributeFileError(f"이미지 수가 정수가 아님: {lines[0].strip()!r}", 1) from None

    names = tuple(lines[1].split())
    if not names:
        raise AttributeFileError("속성 이름이 없습니다.", 2)
    try:
        schema = AttributeSchema(names)
    except SchemaError as exc:
        raise AttributeFileError(str(exc), 2) from None

    rows = {}
    for line_number, line in enumerate(lines[2:], start=3):
        tokens = line.split()
        if not tokens:
            raise AttributeFileError("빈 행", line_number)
        filename, values = tokens[0], tokens[1:]
        if len(values) < len(names):
            raise AttributeFileError(f"열 누락: {len(names)}개 필요, {len(values)}개 존재", line_number)
        if len(values) > len(names):
            raise AttributeFileError(f"열 초과: {len(names)}개 필요, {len(values)}개 존재", line_number)
        if filename in rows:
            raise AttributeFileError(f"중복된 파일 이름: {filename}", line_number)
        parsed = {}
        for name, raw in zip(names, values):
            try:
                value = int(raw)
            except ValueError:
                value = None
            if value not in (POSITIVE, NEGATIVE):
                raise AttributeFileError(f"{name} 값 {raw!r} 는 ±1 이 아님", line_number)
            parsed[name] = value
        rows[filename] = parsed

    if len(rows) != declared:
        raise AttributeFileError(f"선언된 이미지 수 {declared} 와 실제 행 수 {len(rows)} 불일치", 1)
    return schema, rows


def read_attribute_file(path):
    """디스크의 CelebA 속성 파일 읽기"""
    return parse_attribute_file(Path(path).read_text(encoding="utf-8"))


def format_attribute_file(schema, attributes):
    """속성 DataFrame → CelebA list_attr 텍스트"""
    lines = [str(len(attributes)), " ".join(schema.names)]
    for sample_id, row in attributes[list(schema.names)].iterrows():
        lines.append(" ".join([str(sample_id)] + [str(int(value)) for value in row.to_numpy()]))
    return "\n".join(lines) + "\n"


def attributes_frame(mapping, schema):
    """id → 속성 딕셔너리를 DataFrame 으로 변환 (열은 스키마 순서)"""
    frame = pd.DataFrame.from_dict(mapping, orient="index", columns=list(schema.names))
    frame.index.name = "image_id"
    return frame.astype(np.int8)


# =============================================================================
# 하위집단 구성
# =============================================================================

def build_subgroups(samples, protected):
    """보호 속성 교차로 하위집단 테이블 생성"""
    if isinstance(samples, ImageDataset):
        frame = samples.attributes
        order = list(samples.schema.names)
    else:
        frame = samples
        order = list(frame.columns)

    unknown = [name for name in protected if name not in order]
    if unknown:
        raise SchemaError(f"알 수 없는 보호 속성: {unknown}")
    columns = [name for name in order if name in set(protected)]

    if not columns:
        return SubgroupTable((), {SubgroupKey(()): tuple(frame.index)})

    selected = frame[columns]
    invalid = ~selected.isin([POSITIVE, NEGATIVE])
    if invalid.to_numpy().any():
        bad_id = selected.index[invalid.any(axis=1)][0]
        bad_columns = [name for name in columns if invalid.loc[bad_id, name]]
        raise SchemaError(f"샘플 {bad_id!r} 의 보호 속성 값 누락/비정상: {bad_columns}")

    groups = {}
    for values, index in selected.groupby(columns, sort=True).groups.items():
        if not isinstance(values, tuple):
            values = (values,)
        groups[SubgroupKey.from_values(columns, values)] = tuple(index)
    return SubgroupTable(tuple(columns), groups)


def cardinality_frame(table, group_labels=None):
    """하위집단별 샘플 수와 비율"""
    total = max(table.size, 1)
    rows = [
        {"subgroup": key.name, "label": key.label(group_labels), "count": count, "share": count / total}
        for key, count in table.cardinalities.items()
    ]
    return pd.DataFrame(rows, columns=["subgroup", "label", "count", "share"])


def sample_evaluation_set(table, n, seed):
    """하위집단별 n개 샘플을 시드 고정, 비복원 추출"""
    if n < 1:
        raise ValueError(f"n 은 1 이상이어야 합니다: {n}")

    per_subgroup = {}
    warnings = []
    for key, ids in table.groups.items():
        pool = np.asarray(sorted(ids), dtype=object)
        if len(pool) < n:
            warning = EvaluationWarning(key, n, len(pool))
            warnings.append(warning)
            print(f"⚠️ {warning.message}")
        if len(pool) == 0:
            per_subgroup[key] = ()
            continue
        rng = np.random.default_rng(derive_seed(seed, "evaluation", key.name))
        chosen = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
        per_subgroup[key] = tuple(sorted(pool[chosen].tolist()))
    return EvaluationSet(per_subgroup, int(seed), int(n), tuple(warnings))


# =============================================================================
# 정규화
# =============================================================================

def normalize_image(raw):
    """픽셀 격자를 [0,1] 로 클리핑 (numpy 배열 또는 torch 텐서)"""
    if isinstance(raw, torch.Tensor):
        if not bool(torch.isfinite(raw).all()):
            raise ValueError("유한하지 않은 픽셀 값이 있습니다.")
        return torch.clamp(raw, 0.0, 1.0)
    array = np.asarray(raw)
    if not np.isfinite(array).all():
        raise ValueError("유한하지 않은 픽셀 값이 있습니다.")
    return np.clip(array, 0.0, 1.0)


# =============================================================================
# 합성 데이터셋
# =============================================================================

def _as_key(key):
    return key if isinstance(key, SubgroupKey) else SubgroupKey.from_name(str(key))


def make_prototypes(keys, shape, seed, coarse=4):
    """하위집단별로 서로 다른 부드러운 프로토타입 이미지 생성"""
    height, width, channels = shape
    rng = np.random.default_rng(derive_seed(seed, "prototypes"))
    prototypes = {}
    for key in sorted(_as_key(key) for key in keys):
        grid = rng.uniform(0.1, 0.9, size=(coarse, coarse, channels))
        smooth = ndimage.zoom(grid, (height / coarse, width / coarse, 1), order=1)
        prototypes[key] = np.clip(smooth[:height, :width, :channels], 0.0, 1.0).astype(np.float32)
    return prototypes


def generate_synthetic_dataset(cardinalities, prototypes, noise_scale, seed):
    """프로토타입 + 가우시안 픽셀 잡음으로 불균형 합성 데이터셋 생성"""
    counts = {_as_key(key): int(count) for key, count in cardinalities.items()}
    protos = {_as_key(key): np.asarray(value, dtype=np.float32) for key, value in prototypes.items()}

    negative = {key.name: count for key, count in counts.items() if count < 0}
    if negative:
        raise ValueError(f"하위집단 크기는 0 이상이어야 합니다: {negative}")
    if noise_scale < 0:
        raise ValueError(f"noise_scale 은 0 이상이어야 합니다: {noise_scale}")
    if not counts:
        raise ValueError("하위집단이 하나 이상 필요합니다.")

    attribute_sets = {key.attributes for key in counts}
    if len(attribute_sets) != 1:
        raise SchemaError(f"하위집단 키의 보호 속성 구성이 서로 다름: {sorted(attribute_sets)}")
    protected = attribute_sets.pop()

    missing = [key.name for key in counts if key not in protos]
    if missing:
        raise ValueError(f"프로토타입 누락: {missing}")
    shapes = {protos[key].shape for key in counts}
    if len(shapes) != 1 or len(next(iter(shapes))) != 3:
        raise ShapeMismatchError(f"프로토타입 크기 불일치: {sorted(shapes)}")
    shape = shapes.pop()
    for key in counts:
        if protos[key].min() < 0.0 or protos[key].max() > 1.0:
            raise ValueError(f"프로토타입 {key.name} 의 픽셀 값이 [0,1] 범위를 벗어남")

    rng = np.random.default_rng(seed)
    ids, images, rows = [], [], {}
    for key in sorted(counts):
        for index in range(counts[key]):
            sample_id = f"{key.name}_{index:05d}.png"
            noise = rng.normal(0.0, noise_scale, size=shape) if noise_scale > 0 else 0.0
            images.append(np.clip(protos[key] + noise, 0.0, 1.0).astype(np.float32))
            ids.append(sample_id)
            rows[sample_id] = {name: key.value(name) for name in protected}

    schema = AttributeSchema(protected, protected)
    pixels = np.stack(images) if images else np.zeros((0,) + shape, dtype=np.float32)
    attributes = attributes_frame(rows, schema) if rows else pd.DataFrame(columns=list(protected), dtype=np.int8)
    dataset = ImageDataset(schema, tuple(ids), pixels, attributes)

    groups = {key: () for key in counts}
    groups.update(build_subgroups(dataset, protected).groups if len(dataset) else {})
    return dataset, SubgroupTable(protected, groups)


# =============================================================================
# 이미지 폴더 입출력
# =============================================================================

def _to_uint8(pixels):
    return np.round(np.asarray(pixels) * 255.0).astype(np.uint8)


def load_image_folder(directory, ids, resolution=(64, 64), channels=3):
    """PNG/JPEG 이미지를 읽어 해상도 조정 후 [0,1] 배열로 반환"""
    directory = Path(directory)
    height, width = resolution
    mode = "L" if channels == 1 else "RGB"
    images = []
    for sample_id in ids:
        path = directory / sample_id
        if not path.exists():
            raise FileNotFoundError(f"이미지 파일을 찾을 수 없습니다: {path}")
        with Image.open(path) as image:
            image = image.convert(mode)
            if image.size != (width, height):
                image = image.resize((width, height), Image.Resampling.BILINEAR)
            array = np.asarray(image, dtype=np.float32) / 255.0
        if array.ndim == 2:
            array = array[:, :, None]
        images.append(array)
    if not images:
        return np.zeros((0, height, width, channels), dtype=np.float32)
    return np.stack(images)


def write_dataset_folder(dataset, table, directory, seed=None, source_paths=()):
    """데이터셋을 PNG + 속성 파일 + 매니페스트로 저장"""
    directory = Path(directory)
    image_dir = directory / IMAGE_DIR_NAME
    image_dir.mkdir(parents=True, exist_ok=True)

    for sample_id in dataset.ids:
        array = _to_uint8(dataset.image(sample_id))
        # (H,W) → L, (H,W,3) → RGB
        Image.fromarray(array[:, :, 0] if array.shape[2] == 1 else array).save(image_dir / sample_id, format="PNG")

    (directory / ATTRIBUTE_FILE_NAME).write_text(
        format_attribute_file(dataset.schema, dataset.attributes), encoding="utf-8"
    )
    manifest = DatasetManifest(
        schema=dataset.schema.names,
        protected=table.protected,
        cardinalities={key.name: count for key, count in table.cardinalities.items()},
        seed=seed,
        source_paths=tuple(str(path) for path in source_paths),
        image_shape=dataset.image_shape,
    )
    manifest.save(directory / MANIFEST_FILE_NAME)
    print(f"💾 데이터셋 저장 완료: {directory} ({len(dataset):,}개 이미지)")
    return manifest


def load_dataset_folder(directory, resolution=None):
    """write_dataset_folder 로 저장된 데이터셋 로드 → (데이터셋, 하위집단 테이블, 매니페스트)"""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"데이터셋 매니페스트가 없습니다: {manifest_path}")
    manifest = DatasetManifest.load(manifest_path)
    schema, rows = read_attribute_file(directory / ATTRIBUTE_FILE_NAME)
    schema = schema.with_protected(manifest.protected)

    height, width, channels = manifest.image_shape
    if resolution is not None:
        height, width = resolution
    ids = sorted(rows)
    pixels = load_image_folder(directory / IMAGE_DIR_NAME, ids, (height, width), channels)
    dataset = ImageDataset(schema, tuple(ids), pixels, attributes_frame(rows, schema))
    table = build_subgroups(dataset, manifest.protected)

    observed = {key.name: count for key, count in table.cardinalities.items()}
    expected = {name: count for name, count in manifest.cardinalities.items() if count > 0}
    if observed != expected:
        raise SchemaError(f"매니페스트 하위집단 크기 불일치: 기대 {expected}, 실제 {observed}")
    print(f"📂 데이터셋 로드 완료: {directory} ({len(dataset):,}개, {len(table.nonempty_keys())}개 하위집단)")
    return dataset, table, manifest


def load_celeba(image_dir, attribute_file, protected, resolution=(64, 64), channels=3, limit=None):
    """CelebA 이미지 + 속성 파일 로드 (limit 으로 앞쪽 일부만 사용 가능)"""
    print("📂 CelebA 속성 파일 로드 중...")
    schema, rows = read_attribute_file(attribute_file)
    schema = schema.with_protected(protected)
    ids = sorted(rows)
    if limit is not None:
        ids = ids[:limit]
    print(f"✅ 속성 로드 완료: {len(rows):,}개 이미지, {len(schema.names)}개 속성 (사용: {len(ids):,}개)")

    pixels = load_image_folder(image_dir, ids, resolution, channels)
    dataset = ImageDataset(schema, tuple(ids), pixels, attributes_frame({i: rows[i] for i in ids}, schema))
    return dataset, build_subgroups(dataset, protected)
