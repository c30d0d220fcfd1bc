# -*- coding: utf-8 -*-
import numpy as np
import pytest
import torch

from conftest import IdentityAutoencoder, ShiftedAutoencoder, synthetic
from subgroup_robustness.errors import ConfigError, ShapeMismatchError, TrainingDivergedError
from subgroup_robustness.vae import (
    BetaVAE,
    Checkpoint,
    ElboTerms,
    LatentCode,
    ModelConfig,
    TrainConfig,
    decode,
    elbo_loss,
    encode,
    history_frame,
    kl_divergence,
    recon_loss,
    reconstruct,
    reparameterize,
    to_tensor,
    train,
)


class CollapsedVarianceVAE(BetaVAE):
    """log σ² = −60 (사후분포 분산 → 0)"""

    def encode_tensor(self, x):
        mean, log_variance = super().encode_tensor(x)
        return mean, torch.full_like(log_variance, -60.0)


def _image(seed=0, shape=(8, 8, 1)):
    return np.random.default_rng(seed).uniform(0.05, 0.95, size=shape).astype(np.float32)


# =============================================================================
# 설정
# =============================================================================

def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig((8, 8, 1), latent_dim=64, channels=(4, 8))
    with pytest.raises(ConfigError):
        ModelConfig.small_profile(beta=0.5)
    with pytest.raises(ConfigError):
        ModelConfig((10, 10, 1), latent_dim=2, channels=(4, 8))
    assert ModelConfig.small_profile().with_beta(5).beta == 5.0


# =============================================================================
# 인코더 / 디코더
# =============================================================================

def test_encode_shape_and_determinism(trained_model):
    x = _image()
    first = encode(trained_model, x)
    assert first.dim == 2
    second = encode(trained_model, x)
    np.testing.assert_array_equal(first.mean, second.mean)
    np.testing.assert_array_equal(first.log_variance, second.log_variance)


def test_encode_rejects_wrong_shape(trained_model):
    with pytest.raises(ShapeMismatchError):
        encode(trained_model, np.zeros((4, 4, 1)))


def test_reparameterize_is_seeded():
    code = LatentCode(np.array([0.3, -1.2]), np.array([0.1, -0.5]))
    np.testing.assert_array_equal(reparameterize(code, 11), reparameterize(code, 11))
    assert not np.array_equal(reparameterize(code, 11), reparameterize(code, 12))
    assert reparameterize(code, 11, n_samples=5).shape == (5, 2)


def test_reparameterize_zero_variance_limit():
    code = LatentCode(np.array([0.3, -1.2]), np.array([-60.0, -60.0]))
    np.testing.assert_allclose(reparameterize(code, 3), code.mean, atol=1e-9, rtol=0)


def test_decode_range_and_shape(trained_model):
    for z in (np.zeros(2), np.array([10.0, -10.0]), np.array([-3.0, 4.0])):
        image = decode(trained_model, z)
        assert image.shape == (8, 8, 1)
        assert image.min() >= 0.0 and image.max() <= 1.0
    with pytest.raises(ShapeMismatchError):
        decode(trained_model, np.zeros(3))


def test_deterministic_reconstruction_repeats(trained_model):
    x = _image(1)
    np.testing.assert_array_equal(reconstruct(trained_model, x), reconstruct(trained_model, x))


def test_stochastic_reconstruction_matches_deterministic_when_variance_vanishes(trained_checkpoint):
    model = CollapsedVarianceVAE(trained_checkpoint.config)
    model.load_state_dict(trained_checkpoint.to_model().state_dict())
    model.eval()
    x = _image(2)
    stochastic = reconstruct(model, x, mode="stochastic", seed=0, n_samples=16)
    np.testing.assert_allclose(stochastic, reconstruct(model, x), atol=1e-6)


@pytest.mark.slow
def test_stochastic_reconstruction_converges_with_samples(trained_model):
    x = _image(3)
    reference = reconstruct(trained_model, x, mode="stochastic", seed=99, n_samples=100_000)
    coarse = reconstruct(trained_model, x, mode="stochastic", seed=1, n_samples=100)
    fine = reconstruct(trained_model, x, mode="stochastic", seed=1, n_samples=10_000)
    assert np.abs(fine - reference).mean() < np.abs(coarse - reference).mean()


# =============================================================================
# KL / ELBO
# =============================================================================

def test_kl_of_prior_is_zero():
    assert kl_divergence(LatentCode(np.zeros(4), np.zeros(4))) == 0.0


def test_kl_closed_form_value():
    assert abs(kl_divergence(LatentCode(np.array([1.0]), np.array([0.0]))) - 0.5) < 1e-12


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(2024)
    samples = 100_000
    outside_three, outside_four = 0, 0
    for _ in range(50):
        dim = int(rng.integers(1, 5))
        code = LatentCode(rng.normal(0, 1, dim), rng.uniform(-2, 1, dim))
        epsilon = rng.standard_normal((samples, dim))
        z = code.mean + code.sigma * epsilon
        # log q(z) − log p(z) (상수항 상쇄)
        log_ratio = np.sum(-0.5 * code.log_variance - 0.5 * epsilon ** 2 + 0.5 * z ** 2, axis=1)
        estimate = log_ratio.mean()
        error = log_ratio.std(ddof=1) / np.sqrt(samples)
        gap = abs(kl_divergence(code) - estimate)
        outside_three += gap > 3 * error
        outside_four += gap > 4 * error
    assert outside_three <= 1
    assert outside_four == 0


def test_elbo_total_is_sum_of_terms_for_beta_one():
    model = BetaVAE(ModelConfig.small_profile(beta=1.0))
    terms = elbo_loss(model, _image(4), seed=0)
    assert isinstance(terms, ElboTerms)
    assert float(terms.total) == float(terms.reconstruction + terms.kl)


def test_elbo_is_linear_in_beta():
    base = BetaVAE(ModelConfig.small_profile(beta=1.0)).double()
    heavy = BetaVAE(ModelConfig.small_profile(beta=5.0)).double()
    heavy.load_state_dict(base.state_dict())
    x = _image(5)
    low = elbo_loss(base, x, seed=7)
    high = elbo_loss(heavy, x, seed=7)
    assert float(high.kl) == float(low.kl)
    assert float(high.total - low.total) == pytest.approx(4.0 * float(low.kl), rel=1e-9)


def test_elbo_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = BetaVAE(ModelConfig.small_profile(beta=4.0)).double()
    x = to_tensor(np.random.default_rng(0).uniform(0.05, 0.95, size=(4, 8, 8, 1)), torch.float64)

    loss = elbo_loss(model, x, seed=3).total
    parameters = dict(model.named_parameters())
    gradients = dict(zip(parameters, torch.autograd.grad(loss, list(parameters.values()))))

    rng = np.random.default_rng(1)
    analytic, numeric = [], []
    step = 1e-6
    with torch.no_grad():
        for name, parameter in parameters.items():
            for index in rng.choice(parameter.numel(), size=min(3, parameter.numel()), replace=False):
                flat = parameter.view(-1)
                index = int(index)
                original = float(flat[index])
                flat[index] = original + step
                upper = float(elbo_loss(model, x, seed=3).total)
                flat[index] = original - step
                lower = float(elbo_loss(model, x, seed=3).total)
                flat[index] = original
                numeric.append((upper - lower) / (2 * step))
                analytic.append(float(gradients[name].view(-1)[index]))
    analytic, numeric = np.array(analytic), np.array(numeric)
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic) < 1e-3


def test_recon_loss_arithmetic():
    x = np.full((8, 8, 1), 0.5)
    assert recon_loss(IdentityAutoencoder(), x) == 0.0
    assert recon_loss(ShiftedAutoencoder(0.1), x) == pytest.approx(0.01, abs=1e-12)


# =============================================================================
# 학습 / 체크포인트
# =============================================================================

def test_zero_epochs_gives_seeded_initialization(small_data):
    dataset, _ = small_data
    config = ModelConfig.small_profile()
    first = train(dataset, config, TrainConfig(epochs=0, seed=4))
    second = train(dataset, config, TrainConfig(epochs=0, seed=4))
    assert first.content_hash() == second.content_hash()
    assert first.metadata.epochs == 0
    assert len(history_frame(first)) == 1
    assert encode(first.to_model(), dataset.image(dataset.ids[0])).dim == 2


def test_training_reduces_loss(trained_checkpoint, small_data):
    history = history_frame(trained_checkpoint)
    assert list(history["epoch"]) == list(range(21))
    assert history["total"].iloc[-1] < history["total"].iloc[0]

    dataset, _ = small_data
    untrained = train(dataset, trained_checkpoint.config, TrainConfig(epochs=0, seed=0)).to_model()
    trained = trained_checkpoint.to_model()
    trained_loss = np.mean([recon_loss(trained, dataset.image(i)) for i in dataset.ids])
    untrained_loss = np.mean([recon_loss(untrained, dataset.image(i)) for i in dataset.ids])
    assert trained_loss < untrained_loss


def test_resume_continues_epoch_count(small_data):
    dataset, _ = small_data
    config = ModelConfig.small_profile(beta=5.0)
    schedule = TrainConfig(epochs=2, batch_size=16, learning_rate=1e-3, seed=1)
    first = train(dataset, config, schedule)
    resumed = train(dataset, config, schedule, resume=first)
    assert resumed.metadata.epochs == 4
    assert list(history_frame(resumed)["epoch"]) == [0, 1, 2, 3, 4]


def test_resume_rejects_different_config(small_data):
    dataset, _ = small_data
    first = train(dataset, ModelConfig.small_profile(beta=1.0), TrainConfig(epochs=0))
    with pytest.raises(ConfigError):
        train(dataset, ModelConfig.small_profile(beta=5.0), TrainConfig(epochs=1), resume=first)


def test_divergence_is_reported(small_data, monkeypatch):
    dataset, _ = small_data
    nan = torch.tensor(float("nan"))
    monkeypatch.setattr(BetaVAE, "elbo_terms", lambda self, x, generator: ElboTerms(nan, nan, nan))
    with pytest.raises(TrainingDivergedError) as info:
        train(dataset, ModelConfig.small_profile(), TrainConfig(epochs=1))
    assert info.value.epoch == 1
    assert info.value.batch == 0


def test_training_rejects_mismatched_dataset():
    dataset, _ = synthetic(shape=(16, 16, 1))
    with pytest.raises(ShapeMismatchError):
        train(dataset, ModelConfig.small_profile(), TrainConfig(epochs=0))


def test_checkpoint_save_load_save_is_byte_identical(trained_checkpoint, tmp_path):
    first = trained_checkpoint.save(tmp_path / "a.ckpt")
    loaded = Checkpoint.load(first)
    second = loaded.save(tmp_path / "b.ckpt")
    assert first.read_bytes() == second.read_bytes()
    assert loaded.content_hash() == trained_checkpoint.content_hash()
    assert loaded.config == trained_checkpoint.config
    assert set(loaded.encoder_parameters) | set(loaded.decoder_parameters) == set(loaded.tensors)

    x = _image(6)
    np.testing.assert_array_equal(reconstruct(loaded.to_model(), x), reconstruct(trained_checkpoint.to_model(), x))
