# -*- coding: utf-8 -*-
"""공용 fixture 와 해석적 정답을 갖는 스텁 모델"""

import numpy as np
import pytest
import torch
from torch import nn

from subgroup_robustness.dataio import SubgroupKey, generate_synthetic_dataset, make_prototypes
from subgroup_robustness.vae import ModelConfig, TrainConfig, train

SMALL_SHAPE = (8, 8, 1)
SMALL_CARDINALITIES = {
    "not_Male-Young": 40,
    "Male-Young": 20,
    "Male-not_Young": 8,
    "not_Male-not_Young": 4,
}


# =============================================================================
# 스텁 모델
# =============================================================================

class IdentityAutoencoder(nn.Module):
    """x̂ = x, μ = flatten(x), log σ² = 0"""

    def __init__(self, input_dims=SMALL_SHAPE, dtype=torch.float64):
        super().__init__()
        self.input_dims = tuple(input_dims)
        self.latent_dim = int(np.prod(input_dims))
        self.dtype = dtype
        self.beta = 1.0

    def encode_tensor(self, x):
        mean = x.flatten(1)
        return mean, torch.zeros_like(mean)

    def reconstruct_tensor(self, x):
        return x


class LinearEncoder(IdentityAutoencoder):
    """단일 출력 선형 인코더 μ = w·x"""

    def __init__(self, w, input_dims=SMALL_SHAPE):
        super().__init__(input_dims)
        self.latent_dim = 1
        self.w = torch.as_tensor(np.asarray(w, dtype=np.float64).reshape(-1))

    def encode_tensor(self, x):
        mean = (x.flatten(1) @ self.w)[:, None]
        return mean, torch.zeros_like(mean)


class ShiftedAutoencoder(IdentityAutoencoder):
    """x̂ = x + shift"""

    def __init__(self, shift, input_dims=SMALL_SHAPE):
        super().__init__(input_dims)
        self.shift = shift

    def reconstruct_tensor(self, x):
        return x + self.shift


class InvertingAutoencoder(IdentityAutoencoder):
    """x̂ = 1 − x"""

    def reconstruct_tensor(self, x):
        return 1.0 - x


class MeanProbe:
    """평균 밝기 임계값 분류기 (밝으면 +1)"""

    def __init__(self, target, input_dims=SMALL_SHAPE, threshold=0.5, scale=20.0):
        self.target = target
        self.input_dims = tuple(input_dims)
        self.threshold = threshold
        self.scale = scale

    def logits(self, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        return self.scale * (pixels.mean(axis=(1, 2, 3)) - self.threshold)


# =============================================================================
# 데이터 fixture
# =============================================================================

def constant_prototypes(values, shape=SMALL_SHAPE):
    """{하위집단 이름: 픽셀 값} → 균일 프로토타입"""
    return {SubgroupKey.from_name(name): np.full(shape, value, dtype=np.float32) for name, value in values.items()}


def synthetic(cardinalities=None, noise_scale=0.05, seed=0, shape=SMALL_SHAPE):
    cardinalities = cardinalities or SMALL_CARDINALITIES
    prototypes = make_prototypes(cardinalities, shape, seed)
    return generate_synthetic_dataset(cardinalities, prototypes, noise_scale, seed)


@pytest.fixture
def small_data():
    return synthetic()


@pytest.fixture(scope="session")
def trained_checkpoint():
    """소형 합성 데이터로 짧게 학습한 β=1 체크포인트"""
    dataset, _ = synthetic()
    return train(dataset, ModelConfig.small_profile(beta=1.0), TrainConfig(epochs=20, batch_size=16,
                                                                           learning_rate=1e-3, seed=0))


@pytest.fixture(scope="session")
def trained_model(trained_checkpoint):
    return trained_checkpoint.to_model()
