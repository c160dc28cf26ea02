import math

import numpy as np
import pytest
import torch

from dwpseg.dwp import (SIGMA_MAX, SIGMA_MIN, VAEConfig, decode, encode, init_prior, load_prior,
                        log_terms, sample_kernels, save_prior, train_vae)
from builders import linear_gaussian_prior, orthogonal_loading
from oracles import gauss_logpdf_direct


def structured_kernels(n, seed=0):
    """Oriented-edge kernels with random sign, axis, amplitude and small noise."""
    rng = np.random.default_rng(seed)
    ramp = np.array([-1.0, 0.0, 1.0])
    out = np.empty((n, 3, 3, 3), np.float32)
    for i in range(n):
        axis = rng.integers(3)
        shape = [1, 1, 1]
        shape[axis] = 3
        k = np.broadcast_to(ramp.reshape(shape), (3, 3, 3))
        out[i] = rng.choice([-1, 1]) * rng.uniform(0.05, 0.2) * k + 0.01 * rng.standard_normal((3, 3, 3))
    return out


@pytest.fixture(scope="module")
def trained():
    data = structured_kernels(2048)
    cfg = VAEConfig(epochs=30, batch_size=128)
    return data, train_vae(data, cfg, np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        VAEConfig(latent_dim=0)
    with pytest.raises(ValueError):
        VAEConfig(latent_dim=8, encoder_hidden=(4,))
    with pytest.raises(ValueError):
        VAEConfig(decoder_variance="full")


def test_bound_improves(trained):
    _, prior = trained
    assert len(prior.trace) == 30
    assert prior.trace[-1] > prior.trace[0]


def test_fixed_seed_reproducible():
    data = structured_kernels(300)
    cfg = VAEConfig(epochs=3, batch_size=64)
    a = train_vae(data, cfg, np.random.default_rng(4))
    b = train_vae(data, cfg, np.random.default_rng(4))
    assert all(torch.equal(a.psi[k], b.psi[k]) for k in a.psi)
    assert all(torch.equal(a.phi[k], b.phi[k]) for k in a.phi)
    assert a.trace == b.trace


def test_empty_group_rejected():
    with pytest.raises(ValueError):
        train_vae(np.zeros((0, 27)), VAEConfig(epochs=1), np.random.default_rng(0))


def test_small_group_clamps_batch():
    prior = train_vae(structured_kernels(10), VAEConfig(epochs=2, batch_size=256),
                      np.random.default_rng(0))
    assert len(prior.trace) == 2 and all(np.isfinite(prior.trace))


def test_degenerate_dataset_reconstructed():
    k_star = np.random.default_rng(1).uniform(-0.3, 0.3, (3, 3, 3)).astype(np.float32)
    data = np.repeat(k_star[None], 512, axis=0)
    prior = train_vae(data, VAEConfig(epochs=150, batch_size=128), np.random.default_rng(2))
    samples = np.stack([s.values for s in sample_kernels(prior, 256, 3)])
    assert np.abs(samples.mean(0) - k_star).max() <= 0.1


def test_sigma_clamps():
    prior = init_prior(VAEConfig(), np.random.default_rng(0))
    g = torch.Generator().manual_seed(0)
    for scale in (1.0, 1e3, 1e6):
        w = torch.randn(1000, 27, generator=g) * scale
        _, sz = encode(prior, w)
        z = torch.randn(1000, 4, generator=g) * scale
        _, sw = decode(prior, z)
        for s in (sz, sw):
            assert s.min().item() >= SIGMA_MIN * (1 - 1e-6)
            assert s.max().item() <= SIGMA_MAX * (1 + 1e-6)


def test_encode_decode_shapes(trained):
    data, prior = trained
    mu_z, sz = encode(prior, data[0])
    assert mu_z.shape == (1, 4) and sz.shape == (1, 4)
    mu_w, sw = decode(prior, mu_z)
    assert mu_w.shape == (1, 27) and torch.isfinite(mu_w).all()
    a, _ = decode(prior, torch.zeros(4))
    b, _ = decode(prior, torch.zeros(4))
    assert torch.equal(a, b)


def test_dimension_mismatch(trained):
    _, prior = trained
    with pytest.raises(ValueError):
        encode(prior, torch.zeros(26))
    with pytest.raises(ValueError):
        decode(prior, torch.zeros(5))


def test_sample_kernels(trained):
    data, prior = trained
    a = sample_kernels(prior, 64, 9)
    b = sample_kernels(prior, 64, 9)
    assert len(a) == 64
    assert all(s.values.shape == (3, 3, 3) and np.isfinite(s.values).all() for s in a)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    spread = np.stack([s.values for s in sample_kernels(prior, 2000, 1)]).std(0)
    ref = data.std(0)
    assert np.all(spread <= 3 * ref) and np.all(spread >= ref / 3)


def test_log_p_z_at_origin():
    # zero encoder weights -> mu_z = 0, sigma_z = 1; zero noise -> z_hat = 0
    prior = init_prior(VAEConfig(), np.random.default_rng(0), dtype=torch.float64)
    prior.psi = {k: torch.zeros_like(v) for k, v in prior.psi.items()}
    z, log_r, log_pz, _ = log_terms(prior, torch.randn(3, 27, dtype=torch.float64),
                                    noise=torch.zeros(3, 4, dtype=torch.float64))
    assert torch.count_nonzero(z) == 0
    assert log_pz[0].item() == pytest.approx(-2 * math.log(2 * math.pi), abs=1e-12)
    assert round(log_pz[0].item(), 4) == -3.6758
    assert log_r[0].item() == pytest.approx(-2 * math.log(2 * math.pi), abs=1e-12)


def test_linear_gaussian_log_p_w_given_z():
    A, c = orthogonal_loading(), 0.5
    prior = linear_gaussian_prior(A, c)
    rng = np.random.default_rng(3)
    w = torch.tensor(rng.normal(0, 0.5, (5, 27)))
    z, log_r, log_pz, log_pw = log_terms(prior, w, torch.Generator().manual_seed(0))
    for i in range(5):
        zi = z[i].numpy()
        expected = gauss_logpdf_direct(w[i].numpy(), A @ zi, np.full(27, c))
        assert log_pw[i].item() == pytest.approx(expected, abs=1e-10)
        assert log_pz[i].item() == pytest.approx(gauss_logpdf_direct(zi, 0, 1), abs=1e-10)


def test_log_terms_finite_for_extreme_weights(trained):
    _, prior = trained
    w = torch.tensor([[1e4] * 27, [-1e4] * 27, [0.0] * 27])
    for t in log_terms(prior, w, torch.Generator().manual_seed(0)):
        assert torch.isfinite(t).all()


def test_log_terms_differentiable_wrt_encoder_and_weights(trained):
    _, prior = trained
    psi = {k: v.clone().requires_grad_(True) for k, v in prior.psi.items()}
    w = torch.tensor(structured_kernels(4)).reshape(4, 27).requires_grad_(True)
    _, log_r, log_pz, log_pw = log_terms(prior, w, torch.Generator().manual_seed(0), psi=psi)
    grads = torch.autograd.grad((-log_r + log_pz + log_pw).sum(), [w, *psi.values()])
    assert all(torch.isfinite(g).all() for g in grads)
    assert grads[0].abs().sum() > 0


def test_prior_save_load(tmp_path, trained):
    _, prior = trained
    save_prior(prior, tmp_path / "p.ckpt")
    back = load_prior(tmp_path / "p.ckpt")
    assert back.config == prior.config and back.group_key == prior.group_key
    assert all(torch.equal(back.phi[k], prior.phi[k]) for k in prior.phi)
    assert back.trace == prior.trace
