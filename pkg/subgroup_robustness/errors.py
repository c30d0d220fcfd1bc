#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
감사(audit) 파이프라인 공통 예외
"""


class AuditError(Exception):
    """모든 감사 오류의 기본 클래스"""


class ConfigError(AuditError, ValueError):
    """설정 파일/플래그 오류"""


class SchemaError(AuditError, ValueError):
    """속성 스키마 또는 보호 속성 오류"""


class AttributeFileError(AuditError, ValueError):
    """CelebA 속성 파일 파싱 오류 (줄 번호 포함)"""

    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ShapeMismatchError(AuditError, ValueError):
    """이미지/잠재 벡터 크기 불일치"""


class BudgetError(AuditError, ValueError):
    """잘못된 L∞ 예산"""


class AttackDivergedError(AuditError, RuntimeError):
    """공격 최적화 중 목적함수가 유한하지 않음"""

    def __init__(self, step, value):
        super().__init__(f"non-finite attack objective {value!r} at step {step}")
        self.step = step


class TrainingDivergedError(AuditError, RuntimeError):
    """학습 손실 발산"""

    def __init__(self, epoch, batch, value):
        super().__init__(f"non-finite training loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class ProbeTrainingError(AuditError, ValueError):
    """프로브 분류기 학습 불가 (단일 클래스 등)"""


class UnknownRunError(AuditError, LookupError):
    """존재하지 않는 run id"""
