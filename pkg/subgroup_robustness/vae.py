#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
β-VAE 정의, 학습, 추론

- 대각 가우시안 인코더 q(z|x), 표준정규 사전분포 p(z)
- 재매개변수화 샘플링 z = μ + σ ⊙ ε
- 시그모이드 출력 디코더 (재구성 평균 ∈ [0,1])
- 목적함수: 재구성 음의 로그우도 + β · KL
"""

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_container, read_container, save_container, sha256_bytes, write_container
from .errors import ConfigError, ShapeMismatchError, TrainingDivergedError
from .seeding import derive_seed, torch_generator

BETA_PRESETS = (1.0, 5.0, 10.0)
DEFAULT_LEARNING_RATE = 1e-4
ARCHITECTURES = ("conv", "mlp")
LIKELIHOODS = ("bernoulli", "gaussian")


# =============================================================================
# 설정 및 도메인 타입
# =============================================================================

@dataclass(frozen=True)
class ModelConfig:
    """β-VAE 구조 설정 (input_dims = (H, W, C))"""

    input_dims: tuple = (64, 64, 3)
    latent_dim: int = 32
    beta: float = 1.0
    architecture: str = "conv"
    channels: tuple = (32, 32, 64, 64)
    hidden_dims: tuple = (256,)
    likelihood: str = "bernoulli"

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(v) for v in self.input_dims))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        object.__setattr__(self, "hidden_dims", tuple(int(v) for v in self.hidden_dims))
        object.__setattr__(self, "beta", float(self.beta))

        if len(self.input_dims) != 3:
            raise ConfigError(f"input_dims 는 (H, W, C) 여야 합니다: {self.input_dims}")
        if self.latent_dim < 1 or self.latent_dim >= self.input_size:
            raise ConfigError(f"latent_dim 은 1 이상 N={self.input_size} 미만이어야 합니다: {self.latent_dim}")
        if self.beta < 1.0:
            raise ConfigError(f"beta 는 1 이상이어야 합니다: {self.beta}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"알 수 없는 구조: {self.architecture}")
        if self.likelihood not in LIKELIHOODS:
            raise ConfigError(f"알 수 없는 우도: {self.likelihood}")
        if self.architecture == "conv":
            if not self.channels:
                raise ConfigError("conv 구조에는 channels 가 하나 이상 필요합니다.")
            factor = 2 ** len(self.channels)
            height, width, _ = self.input_dims
            if height % factor or width % factor:
                raise ConfigError(f"해상도 {height}×{width} 는 2^{len(self.channels)} 로 나누어떨어져야 합니다.")

    @property
    def input_size(self):
        height, width, channels = self.input_dims
        return height * width * channels

    def with_beta(self, beta):
        return replace(self, beta=float(beta))

    def to_dict(self):
        return {
            "input_dims": list(self.input_dims),
            "latent_dim": self.latent_dim,
            "beta": self.beta,
            "architecture": self.architecture,
            "channels": list(self.channels),
            "hidden_dims": list(self.hidden_dims),
            "likelihood": self.likelihood,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(**payload)

    @classmethod
    def small_profile(cls, beta=1.0, latent_dim=2):
        """8×8 흑백, 2-블록 소형 모델"""
        return cls((8, 8, 1), latent_dim, beta, "conv", (4, 8), (16,))


@dataclass(frozen=True)
class TrainConfig:
    """학습 하이퍼파라미터"""

    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = DEFAULT_LEARNING_RATE
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs 는 0 이상이어야 합니다: {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size 는 1 이상이어야 합니다: {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate 는 양수여야 합니다: {self.learning_rate}")


@dataclass(frozen=True)
class LatentCode:
    """대각 가우시안 사후분포 파라미터 (μ, log σ²)"""

    mean: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        log_variance = np.asarray(self.log_variance, dtype=np.float64).reshape(-1)
        if mean.shape != log_variance.shape:
            raise ShapeMismatchError(f"μ {mean.shape} 와 log σ² {log_variance.shape} 길이가 다름")
        if not (np.isfinite(mean).all() and np.isfinite(log_variance).all()):
            raise ValueError("LatentCode 에 유한하지 않은 값이 있습니다.")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_variance", log_variance)

    @property
    def sigma(self):
        return np.exp(0.5 * self.log_variance)

    @property
    def dim(self):
        return len(self.mean)


class ElboTerms(NamedTuple):
    total: torch.Tensor
    reconstruction: torch.Tensor
    kl: torch.Tensor


# =============================================================================
# 네트워크
# =============================================================================

def _mlp(widths, final_activation=False):
    layers = []
    for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.Linear(fan_in, fan_out))
        if final_activation or index < len(widths) - 2:
            layers.append(nn.ReLU())
    return layers


def build_encoder(config):
    """이미지 (B,C,H,W) → (B, 2M) [μ | log σ²]"""
    height, width, channels = config.input_dims
    if config.architecture == "mlp":
        return nn.Sequential(nn.Flatten(), *_mlp((config.input_size, *config.hidden_dims, 2 * config.latent_dim)))

    layers = []
    fan_in = channels
    for fan_out in config.channels:
        layers += [nn.Conv2d(fan_in, fan_out, kernel_size=4, stride=2, padding=1), nn.ReLU()]
        fan_in = fan_out
    factor = 2 ** len(config.channels)
    flat = config.channels[-1] * (height // factor) * (width // factor)
    layers.append(nn.Flatten())
    layers += _mlp((flat, *config.hidden_dims, 2 * config.latent_dim))
    return nn.Sequential(*layers)


def build_decoder(config):
    """잠재 벡터 (B, M) → 로짓 (B,C,H,W)"""
    height, width, channels = config.input_dims
    if config.architecture == "mlp":
        return nn.Sequential(
            *_mlp((config.latent_dim, *tuple(reversed(config.hidden_dims)), config.input_size)),
            nn.Unflatten(1, (channels, height, width)),
        )

    factor = 2 ** len(config.channels)
    base = (config.channels[-1], height // factor, width // factor)
    flat = base[0] * base[1] * base[2]
    layers = _mlp((config.latent_dim, *tuple(reversed(config.hidden_dims)), flat), final_activation=True)
    layers.append(nn.Unflatten(1, base))
    widths = list(reversed(config.channels)) + [channels]
    for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.ConvTranspose2d(fan_in, fan_out, kernel_size=4, stride=2, padding=1))
        if index < len(widths) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class BetaVAE(nn.Module):
    """β-VAE: encoder(x) → (μ, log σ²), decoder(z) → 로짓"""

    def __init__(self, config, encoder=None, decoder=None):
        super().__init__()
        self.config = config
        self.encoder = encoder if encoder is not None else build_encoder(config)
        self.decoder = decoder if decoder is not None else build_decoder(config)

    @property
    def input_dims(self):
        return self.config.input_dims

    @property
    def latent_dim(self):
        return self.config.latent_dim

    @property
    def beta(self):
        return self.config.beta

    def encode_tensor(self, x):
        mean, log_variance = self.encoder(x).chunk(2, dim=1)
        return mean, log_variance

    def decode_logits(self, z):
        return self.decoder(z)

    def decode_tensor(self, z):
        return torch.sigmoid(self.decode_logits(z))

    def reconstruct_tensor(self, x):
        """결정적 재구성: μ 를 그대로 디코딩"""
        mean, _ = self.encode_tensor(x)
        return self.decode_tensor(mean)

    def elbo_terms(self, x, generator):
        """배치 평균 (총 손실, 재구성 항, KL 항)"""
        mean, log_variance = self.encode_tensor(x)
        epsilon = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * log_variance) * epsilon
        logits = self.decode_logits(z)
        if self.config.likelihood == "bernoulli":
            reconstruction = F.binary_cross_entropy_with_logits(logits, x, reduction="none").flatten(1).sum(1)
        else:
            reconstruction = (torch.sigmoid(logits) - x).pow(2).flatten(1).sum(1)
        kl = kl_tensor(mean, log_variance)
        reconstruction = reconstruction.mean()
        kl = kl.mean()
        return ElboTerms(reconstruction + self.config.beta * kl, reconstruction, kl)

    def forward(self, x):
        return self.reconstruct_tensor(x)


# =============================================================================
# 텐서 변환
# =============================================================================

def model_dtype(model):
    for parameter in model.parameters():
        return parameter.dtype
    return getattr(model, "dtype", torch.float32)


def to_tensor(pixels, dtype=torch.float32):
    """(H,W,C) 또는 (n,H,W,C) numpy → (n,C,H,W) 텐서"""
    if isinstance(pixels, torch.Tensor):
        return pixels.to(dtype)
    array = np.asarray(pixels)
    if array.ndim == 3:
        array = array[None]
    return torch.from_numpy(np.ascontiguousarray(array.transpose(0, 3, 1, 2))).to(dtype)


def to_pixels(tensor):
    """(n,C,H,W) 텐서 → (n,H,W,C) float64 numpy"""
    return tensor.detach().cpu().to(torch.float64).numpy().transpose(0, 2, 3, 1)


def check_image(model, x):
    expected = tuple(model.input_dims)
    shape = tuple(np.shape(x))
    if shape != expected:
        raise ShapeMismatchError(f"이미지 크기 {shape} 가 모델 입력 {expected} 와 다름")


# =============================================================================
# 연산
# =============================================================================

def encode(model, x):
    """정규화된 이미지 → LatentCode"""
    check_image(model, x)
    with torch.no_grad():
        mean, log_variance = model.encode_tensor(to_tensor(x, model_dtype(model)))
    return LatentCode(mean[0].to(torch.float64).numpy(), log_variance[0].to(torch.float64).numpy())


def reparameterize(code, seed, n_samples=None):
    """z = μ + σ ⊙ ε, ε ~ N(0, I) (시드 고정)"""
    generator = torch_generator(seed)
    count = 1 if n_samples is None else int(n_samples)
    epsilon = torch.randn((count, code.dim), generator=generator, dtype=torch.float64).numpy()
    z = code.mean + code.sigma * epsilon
    return z[0] if n_samples is None else z


def decode(model, z):
    """잠재 벡터 → 재구성 평균 이미지 (H,W,C) ∈ [0,1]"""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if len(z) != model.latent_dim:
        raise ShapeMismatchError(f"잠재 벡터 길이 {len(z)} 가 M={model.latent_dim} 와 다름")
    with torch.no_grad():
        image = model.decode_tensor(torch.from_numpy(z[None]).to(model_dtype(model)))
    return to_pixels(image)[0]


def reconstruct(model, x, mode="deterministic", seed=0, n_samples=1):
    """결정적 모드는 μ 디코딩, 확률적 모드는 n_samples 개 사후 샘플 디코딩 평균"""
    check_image(model, x)
    dtype = model_dtype(model)
    with torch.no_grad():
        batch = to_tensor(x, dtype)
        if mode == "deterministic":
            return to_pixels(model.reconstruct_tensor(batch))[0]
        if mode != "stochastic":
            raise ValueError(f"알 수 없는 재구성 모드: {mode}")
        if n_samples < 1:
            raise ValueError(f"n_samples 는 1 이상이어야 합니다: {n_samples}")
        mean, log_variance = model.encode_tensor(batch)
        epsilon = torch.randn((n_samples, mean.shape[1]), generator=torch_generator(seed), dtype=dtype)
        z = mean + torch.exp(0.5 * log_variance) * epsilon
        return to_pixels(model.decode_tensor(z).mean(dim=0, keepdim=True))[0]


def kl_tensor(mean, log_variance):
    """행별 KL(q || N(0, I)) 닫힌 형식"""
    return 0.5 * (mean.pow(2) + torch.expm1(log_variance) - log_variance).sum(dim=1)


def kl_divergence(code):
    """½ Σ (μ² + σ² − 1 − log σ²)"""
    return float(0.5 * np.sum(code.mean ** 2 + np.expm1(code.log_variance) - code.log_variance))


def elbo_loss(model, x, seed):
    """(총 손실, 재구성 항, KL 항) 텐서, 역전파 가능"""
    if isinstance(x, torch.Tensor):
        batch = x
    else:
        check_image(model, x)
        batch = to_tensor(x, model_dtype(model))
    return model.elbo_terms(batch, torch_generator(seed))


def recon_loss(model, x):
    """원본과 결정적 재구성 사이의 픽셀 평균 제곱 오차"""
    check_image(model, x)
    dtype = model_dtype(model)
    with torch.no_grad():
        batch = to_tensor(x, dtype)
        reconstruction = model.reconstruct_tensor(batch)
    return float(torch.mean((reconstruction.to(torch.float64) - batch.to(torch.float64)) ** 2))


# =============================================================================
# 체크포인트
# =============================================================================

@dataclass(frozen=True)
class TrainingMetadata:
    """학습 메타데이터 (누적 epoch, 시드, 최종 손실, 손실 이력)"""

    epochs: int = 0
    seed: int = 0
    final_loss: object = None
    history: tuple = ()

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "seed": self.seed,
            "final_loss": self.final_loss,
            "history": [dict(row) for row in self.history],
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(payload["epochs"], payload["seed"], payload.get("final_loss"), tuple(payload.get("history", ())))


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """인코더(φ)/디코더(θ) 파라미터 + 설정 + 학습 메타데이터"""

    config: ModelConfig
    tensors: dict
    metadata: TrainingMetadata = field(default_factory=TrainingMetadata)

    @property
    def encoder_parameters(self):
        return {name: value for name, value in self.tensors.items() if name.startswith("encoder.")}

    @property
    def decoder_parameters(self):
        return {name: value for name, value in self.tensors.items() if name.startswith("decoder.")}

    @classmethod
    def from_model(cls, model, metadata=None):
        tensors = {name: value.detach().cpu().numpy().copy() for name, value in model.state_dict().items()}
        return cls(model.config, tensors, metadata or TrainingMetadata())

    def to_model(self, trainable=False):
        """BetaVAE 복원 (기본: 추론 전용, 파라미터 고정)"""
        model = BetaVAE(self.config)
        if any(value.dtype == np.float64 for value in self.tensors.values()):
            model = model.double()
        model.load_state_dict({name: torch.from_numpy(value.copy()) for name, value in self.tensors.items()})
        if not trainable:
            model.eval()
            model.requires_grad_(False)
        return model

    def to_bytes(self):
        meta = {"kind": "beta_vae", "config": self.config.to_dict(), "metadata": self.metadata.to_dict()}
        return write_container(meta, self.tensors)

    @classmethod
    def from_bytes(cls, data):
        meta, tensors = read_container(data)
        return cls(ModelConfig.from_dict(meta["config"]), tensors, TrainingMetadata.from_dict(meta["metadata"]))

    def save(self, path):
        return save_container(path, *read_container(self.to_bytes()))

    @classmethod
    def load(cls, path):
        meta, tensors = load_container(path)
        return cls(ModelConfig.from_dict(meta["config"]), tensors, TrainingMetadata.from_dict(meta["metadata"]))

    def content_hash(self):
        return sha256_bytes(self.to_bytes())


def history_frame(checkpoint):
    """손실 이력 DataFrame (epoch, total, recon, kl)"""
    return pd.DataFrame(list(checkpoint.metadata.history), columns=["epoch", "total", "recon", "kl"])


# =============================================================================
# 학습
# =============================================================================

def _evaluate(model, pixels, batch_size, generator):
    totals = np.zeros(3)
    with torch.no_grad():
        for start in range(0, len(pixels), batch_size):
            batch = pixels[start:start + batch_size]
            terms = model.elbo_terms(batch, generator)
            totals += len(batch) * np.array([float(value) for value in terms])
    return totals / len(pixels)


def train(dataset, config, train_config, resume=None):
    """Adam 으로 β-VAE 목적함수 최적화 → Checkpoint"""
    if len(dataset) == 0:
        raise ValueError("빈 데이터셋으로는 학습할 수 없습니다.")
    if tuple(dataset.image_shape) != config.input_dims:
        raise ShapeMismatchError(f"데이터셋 이미지 {dataset.image_shape} 와 모델 입력 {config.input_dims} 가 다름")

    seed = int(train_config.seed)
    if resume is not None:
        if resume.config != config:
            raise ConfigError("재개할 체크포인트의 모델 설정이 현재 설정과 다릅니다.")
        model = resume.to_model(trainable=True)
        start_epoch = resume.metadata.epochs
        history = list(resume.metadata.history)
    else:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            model = BetaVAE(config)
        start_epoch = 0
        history = []

    dtype = model_dtype(model)
    pixels = to_tensor(dataset.pixels, dtype)
    batch_size = train_config.batch_size

    if not history:
        total, recon, kl = _evaluate(model, pixels, batch_size, torch_generator(derive_seed(seed, "initial")))
        history.append({"epoch": 0, "total": total, "recon": recon, "kl": kl})

    print(f"🔧 β-VAE 학습 시작 (β={config.beta:g}, epoch {start_epoch} → {start_epoch + train_config.epochs}, "
          f"샘플 {len(pixels):,}개)")
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    generator = torch_generator(derive_seed(seed, "train", start_epoch))
    report_every = max(1, train_config.epochs // 10)

    for epoch in range(start_epoch + 1, start_epoch + train_config.epochs + 1):
        order = torch.randperm(len(pixels), generator=generator)
        sums = np.zeros(3)
        for batch_index, start in enumerate(range(0, len(pixels), batch_size)):
            batch = pixels[order[start:start + batch_size]]
            terms = model.elbo_terms(batch, generator)
            if not bool(torch.isfinite(terms.total)):
                raise TrainingDivergedError(epoch, batch_index, float(terms.total))
            optimizer.zero_grad()
            terms.total.backward()
            optimizer.step()
            sums += len(batch) * np.array([float(value.detach()) for value in terms])
        total, recon, kl = sums / len(pixels)
        history.append({"epoch": epoch, "total": total, "recon": recon, "kl": kl})
        if (epoch - start_epoch) % report_every == 0 or epoch == start_epoch + train_config.epochs:
            print(f"   epoch {epoch:4d}: total {total:10.3f} | recon {recon:10.3f} | kl {kl:8.3f}")

    model.eval()
    metadata = TrainingMetadata(
        epochs=start_epoch + train_config.epochs,
        seed=seed,
        final_loss=history[-1]["total"],
        history=tuple(history),
    )
    print(f"✅ 학습 완료 (최종 손실 {metadata.final_loss:.3f})")
    return Checkpoint.from_model(model, metadata)


def as_model(model):
    """Checkpoint 이면 추론용 모델로 복원, 아니면 그대로 반환"""
    if isinstance(model, Checkpoint):
        return model.to_model()
    return model


def reconstruct_many(model, pixels, batch_size=64):
    """(n,H,W,C) 배열의 결정적 재구성 (배치 단위)"""
    model = as_model(model)
    pixels = np.asarray(pixels)
    if len(pixels) == 0:
        return np.zeros((0,) + tuple(model.input_dims), dtype=np.float64)
    if tuple(pixels.shape[1:]) != tuple(model.input_dims):
        raise ShapeMismatchError(f"이미지 크기 {pixels.shape[1:]} 가 모델 입력 {model.input_dims} 와 다름")
    dtype = model_dtype(model)
    outputs = []
    with torch.no_grad():
        for start in range(0, len(pixels), batch_size):
            outputs.append(to_pixels(model.reconstruct_tensor(to_tensor(pixels[start:start + batch_size], dtype))))
    return np.concatenate(outputs)


def encode_many(model, pixels, batch_size=64):
    """(n,H,W,C) 배열 → 사후 평균 μ 행렬 (n, M)"""
    model = as_model(model)
    pixels = np.asarray(pixels)
    if tuple(pixels.shape[1:]) != tuple(model.input_dims):
        raise ShapeMismatchError(f"이미지 크기 {pixels.shape[1:]} 가 모델 입력 {model.input_dims} 와 다름")
    dtype = model_dtype(model)
    means = []
    with torch.no_grad():
        for start in range(0, len(pixels), batch_size):
            mean, _ = model.encode_tensor(to_tensor(pixels[start:start + batch_size], dtype))
            means.append(mean.to(torch.float64).numpy())
    if not means:
        return np.zeros((0, model.latent_dim), dtype=np.float64)
    return np.concatenate(means)
