#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
체크포인트 컨테이너 형식

    MAGIC(8바이트) | 헤더 길이(<Q) | 헤더 JSON | 텐서 blob

헤더 JSON 은 키 정렬로 직렬화하고 텐서는 이름순으로 배치하므로
저장 → 로드 → 저장 결과가 바이트 단위로 동일하다.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import AuditError

MAGIC = b"SGRCKPT1"
_LENGTH = struct.Struct("<Q")


def canonical_json(payload):
    """정렬된 키, 고정 구분자의 JSON 문자열"""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_container(meta, tensors):
    """메타데이터 딕셔너리 + 이름 있는 numpy 배열 → 바이트열"""
    table = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name])
        # 리틀 엔디언 고정
        array = array.astype(array.dtype.newbyteorder("<"), copy=False)
        raw = array.tobytes()
        table.append({
            "name": name,
            "dtype": array.dtype.str,
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)

    header = canonical_json({"format": 1, "meta": meta, "tensors": table}).encode("utf-8")
    return MAGIC + _LENGTH.pack(len(header)) + header + b"".join(chunks)


def read_container(data):
    """write_container 의 역변환 → (메타데이터, 텐서 딕셔너리)"""
    if data[: len(MAGIC)] != MAGIC:
        raise AuditError("체크포인트 형식이 아닙니다 (MAGIC 불일치).")
    start = len(MAGIC)
    (length,) = _LENGTH.unpack_from(data, start)
    start += _LENGTH.size
    header = json.loads(data[start:start + length].decode("utf-8"))
    blob = memoryview(data)[start + length:]

    tensors = {}
    for entry in header["tensors"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = array.copy()
    return header["meta"], tensors


def save_container(path, meta, tensors):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(write_container(meta, tensors))
    return path


def load_container(path):
    return read_container(Path(path).read_bytes())
