#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
시드 파생 유틸리티

모든 확률적 단계는 (기본 시드, 단계 이름, ...) 조합에서 파생된 시드를 사용한다.
"""

import zlib

import numpy as np
import torch


def derive_seed(base, *keys):
    """기본 시드와 키 목록으로부터 32비트 시드 생성"""
    entropy = [int(base) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, (int, np.integer)):
            entropy.append(int(key) & 0xFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(key).encode("utf-8")))
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def torch_generator(seed):
    """CPU torch.Generator 생성"""
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator
