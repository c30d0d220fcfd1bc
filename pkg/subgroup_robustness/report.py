#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
실행 매니페스트와 통합 감사 보고서

보고서 JSON 은 키 정렬, 타임스탬프 제외, 무한대는 "inf" 로 기록하므로
같은 입력에서 같은 내용 해시가 나온다.
"""

import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .checkpoint import canonical_json, sha256_bytes, sha256_file
from .errors import AuditError, UnknownRunError

INF_MARKER = "inf"
EMPTY_MARKER = "empty"
MANIFEST_NAME = "run_manifest.json"
REPORT_NAME = "audit_report.json"

UNITS = {
    "deviation": "L2 norm over the full pixel grid between deterministic reconstructions",
    "recon_loss": "per-pixel mean squared error of the unperturbed deterministic reconstruction",
    "disparity": "artifact convention: ratio and gap of subgroup median deviations",
}


# =============================================================================
# JSON 유틸리티
# =============================================================================

def sanitize(value):
    """JSON 직렬화 가능한 값으로 변환 (inf → "inf", nan → None)"""
    if isinstance(value, dict):
        return {str(key): sanitize(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [sanitize(item) for item in value]
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        value = value.item()
    if isinstance(value, float):
        if math.isinf(value):
            return INF_MARKER if value > 0 else f"-{INF_MARKER}"
        if math.isnan(value):
            return None
    return value


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(sanitize(payload), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                    encoding="utf-8")
    return path


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def now_iso():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# =============================================================================
# 실행 매니페스트
# =============================================================================

@dataclass
class RunManifest:
    """실행 id, 설정 스냅샷, 입력 해시, 출력 경로, 타임스탬프, 시드 레지스트리"""

    run_id: str
    config: dict
    seeds: dict
    input_hashes: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    timestamps: dict = field(default_factory=dict)
    status: str = "running"
    partial: list = field(default_factory=list)

    def start(self, stage):
        self.timestamps[f"{stage}_started"] = now_iso()

    def finish(self, stage):
        self.timestamps[f"{stage}_finished"] = now_iso()

    def add_output(self, run_dir, path):
        relative = Path(path).resolve().relative_to(Path(run_dir).resolve()).as_posix()
        if relative not in self.outputs:
            self.outputs.append(relative)
        return relative

    def missing_outputs(self, run_dir):
        return [relative for relative in self.outputs if not (Path(run_dir) / relative).exists()]

    def to_dict(self):
        return {
            "run_id": self.run_id,
            "config": self.config,
            "seeds": self.seeds,
            "input_hashes": self.input_hashes,
            "outputs": sorted(self.outputs),
            "timestamps": self.timestamps,
            "status": self.status,
            "partial": self.partial,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            run_id=payload["run_id"],
            config=payload["config"],
            seeds=payload["seeds"],
            input_hashes=payload.get("input_hashes", {}),
            outputs=list(payload.get("outputs", [])),
            timestamps=payload.get("timestamps", {}),
            status=payload.get("status", "unknown"),
            partial=list(payload.get("partial", [])),
        )

    def save(self, run_dir):
        missing = self.missing_outputs(run_dir) if self.status == "complete" else []
        if missing:
            raise AuditError(f"매니페스트에 기록된 출력 파일이 없습니다: {missing}")
        return write_json(Path(run_dir) / MANIFEST_NAME, self.to_dict())

    @classmethod
    def load(cls, run_dir):
        return cls.from_dict(read_json(Path(run_dir) / MANIFEST_NAME))


def resolve_run(out, run_id):
    """출력 루트 아래 실행 디렉터리 (없으면 UnknownRunError)"""
    run_dir = Path(out) / run_id
    if not (run_dir / MANIFEST_NAME).exists():
        raise UnknownRunError(f"알 수 없는 run id: {run_id} ({run_dir})")
    return run_dir


def input_hashes(paths):
    """{이름: 파일 경로} → {이름: sha256}"""
    return {name: sha256_file(path) for name, path in sorted(paths.items())}


# =============================================================================
# 감사 보고서
# =============================================================================

@dataclass
class AuditReport:
    """β 별 하위집단 통계, 불균형 지표, 프로브 표, 전환율, 그래프 데이터 참조"""

    run_id: str
    config_hash: str
    checkpoints: dict
    per_beta: dict
    probes: object = None
    switch_rates: object = None
    latent: object = None
    files: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [beta for beta in self.per_beta if beta not in self.checkpoints]
        if missing:
            raise AuditError(f"체크포인트 해시가 없는 β: {missing}")

    def to_dict(self):
        return sanitize({
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "checkpoints": {f"{float(beta):g}": value for beta, value in sorted(self.checkpoints.items())},
            "per_beta": {f"{float(beta):g}": value for beta, value in sorted(self.per_beta.items())},
            "probes": self.probes if self.probes is not None else None,
            "switch_rates": self.switch_rates,
            "latent": self.latent,
            "files": dict(sorted(self.files.items())),
            "units": UNITS,
            "notes": self.notes,
        })

    def to_json(self):
        return canonical_json(self.to_dict())

    def content_hash(self):
        return sha256_bytes(self.to_json().encode("utf-8"))

    def save(self, path):
        return write_json(path, self.to_dict())


def beta_summary(records, stats, marginal, disparity, omitted):
    """β 하나의 보고서 항목 (기록이 없으면 empty 표시)"""
    if not records:
        return {"status": EMPTY_MARKER, "record_count": 0}
    return {
        "status": "ok",
        "record_count": len(records),
        "failures": sum(1 for record in records if not record.ok),
        "low_robustness_count": sum(1 for record in records if record.low_robustness),
        "stats": {key.name: value.to_dict() for key, value in stats.items()},
        "marginal": {
            attribute: {key.name: value.to_dict() for key, value in groups.items()}
            for attribute, groups in sorted(marginal.items())
        },
        "disparity": disparity.to_dict() if disparity is not None else None,
        "omitted_subgroups": [key.name for key in omitted],
    }


# =============================================================================
# 원자적 출력
# =============================================================================

def emit_directory(target, writer):
    """임시 디렉터리에 writer(임시경로) 로 쓴 뒤 target 으로 교체 (실패 시 부분 파일 없음)"""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{target.name}-", dir=target.parent))
    try:
        writer(staging)
        if target.exists():
            shutil.rmtree(target)
        os.replace(staging, target)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return target
