import numpy as np
import pytest
import torch
from scipy import ndimage

from ldct.diffusion import build_schedule
from ldct.errors import ConfigurationError, ValidationError
from ldct.geometry import CTImage, MU_WATER
from ldct.refiner import (LatentRefiner, RefinerCheckpoint, RefinerNetConfig, RefinerTrainConfig, decode,
                          denoising_terms, encode, refiner_losses, sobel_magnitude, ssim_torch, train_refiner)

SCHED = build_schedule(1000, 5)
TINY = RefinerNetConfig(hidden_channels=8, latent_channels=16, model_dim=32, num_heads=2, num_blocks=2,
                        image_scale=100.0)


def _image(seed=0, n=64):
    r = np.random.default_rng(seed)
    return CTImage(MU_WATER * (1 + 0.05 * r.standard_normal((n, n))))


def test_latent_shape_and_round_trip_shape():
    model = LatentRefiner(TINY, SCHED)
    z = encode(_image(), model)
    assert tuple(z.shape) == (16, 16, 16)
    assert decode(z, model).shape == (64, 64)


def test_untrained_autoencoder_is_identity():
    model = LatentRefiner(TINY, SCHED)
    img = _image(1)
    assert np.allclose(decode(encode(img, model), model).data, img.data, rtol=0, atol=1e-7)


def test_encode_deterministic():
    model = LatentRefiner(TINY, SCHED)
    img = _image(2)
    assert torch.equal(encode(img, model), encode(img, model))


def test_indivisible_image_names_padding():
    model = LatentRefiner(TINY, SCHED)
    with pytest.raises(ValidationError, match="68x68"):
        encode(CTImage(np.full((66, 65), MU_WATER)), model)


def _ssim_oracle(a, b, win=11, sigma=1.5):
    """Direct per-pixel SSIM over a reflected 11x11 Gaussian neighbourhood."""
    r = np.arange(win) - win // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    L = b.max() - b.min()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    pa, pb = np.pad(a, win // 2, mode="reflect"), np.pad(b, win // 2, mode="reflect")
    vals = []
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            wa, wb = pa[i:i + win, j:j + win], pb[i:i + win, j:j + win]
            ma, mb = (g * wa).sum(), (g * wb).sum()
            va = (g * wa * wa).sum() - ma ** 2
            vb = (g * wb * wb).sum() - mb ** 2
            cov = (g * wa * wb).sum() - ma * mb
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_losses_zero_at_identity():
    x = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    e = torch.randn(2, 4, 2, 2)
    l_diff, l_den, total = refiner_losses(e, e, x, x)
    assert float(l_diff) == 0 and abs(float(l_den)) < 1e-12 and abs(float(total)) < 1e-12


def test_losses_match_hand_computation_8x8():
    r = np.random.default_rng(0)
    prior = r.uniform(0, 1, (8, 8))
    dec = prior + 0.1 * r.standard_normal((8, 8))
    t = lambda a: torch.as_tensor(a)[None, None]
    eps, eps_hat = torch.zeros(1, 3), torch.full((1, 3), 0.5)
    l_diff, l_den, total = refiner_losses(eps, eps_hat, t(dec), t(prior))
    sob = lambda a: np.hypot(ndimage.sobel(a, 1, mode="nearest"), ndimage.sobel(a, 0, mode="nearest"))
    expected = (1.0 * (1 - _ssim_oracle(dec, prior)) + 2.0 * np.mean(np.abs(sob(prior) - sob(dec)))
                + 0.5 * np.mean(np.abs(prior - dec)))
    assert float(l_diff) == pytest.approx(0.25)
    assert float(l_den) == pytest.approx(expected, abs=1e-5)
    assert float(total) == pytest.approx(0.25 + expected, abs=1e-5)


def test_constant_shift_terms():
    prior = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    terms = denoising_terms(prior + 0.3, prior)
    assert float(terms["grad"]) == pytest.approx(0.0, abs=1e-9)
    assert 0.5 * float(terms["l1"]) == pytest.approx(0.5 * 0.3)


def test_ssim_symmetric_and_bounded():
    a, b = torch.rand(1, 1, 16, 16, dtype=torch.float64), torch.rand(1, 1, 16, 16, dtype=torch.float64)
    assert float(ssim_torch(a, a)) == pytest.approx(1.0)
    assert float(ssim_torch(a, b, data_range=1.0)) == pytest.approx(float(ssim_torch(b, a, data_range=1.0)), abs=1e-12)


def test_denoising_loss_gradient_finite_differences():
    r = np.random.default_rng(1)
    prior = torch.as_tensor(r.uniform(0, 1, (1, 1, 8, 8)))
    dec = (prior + 0.2 * torch.as_tensor(r.standard_normal((1, 1, 8, 8)))).requires_grad_(True)
    f = lambda d: refiner_losses(torch.zeros(1), torch.zeros(1), d, prior)[1]
    (grad,) = torch.autograd.grad(f(dec), dec)
    h = 1e-6
    base = dec.detach().clone()
    fd = torch.zeros(64, dtype=torch.float64)
    for k in range(64):
        p, m = base.clone().view(-1), base.clone().view(-1)
        p[k] += h
        m[k] -= h
        fd[k] = (f(p.view(1, 1, 8, 8)) - f(m.view(1, 1, 8, 8))) / (2 * h)
    assert torch.max(torch.abs(grad.view(-1) - fd)) <= 1e-3 * torch.max(torch.abs(fd))


def test_loss_shape_mismatch():
    with pytest.raises(ValidationError):
        refiner_losses(torch.zeros(2), torch.zeros(2), torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 4, 4))


def test_sobel_vertical_edge():
    x = torch.zeros(1, 1, 6, 6, dtype=torch.float64)
    x[..., 3:] = 1.0
    g = sobel_magnitude(x)[0, 0]
    assert torch.all(g[:, 2] == g.max()) and torch.all(g[:, 3] == g.max())
    assert float(g[:, 0].max()) < 1e-5


def test_noise_predictor_uses_timestep():
    torch.manual_seed(0)
    model = LatentRefiner(TINY, SCHED)
    torch.nn.init.normal_(model.predictor.out.weight, std=0.1)
    zt, c = torch.randn(2, 16, 16, 16), torch.randn(2, 16, 16, 16)
    with torch.no_grad():
        a = model.predictor.correction(zt, torch.tensor([10, 900]), c)
        b = model.predictor.correction(zt, torch.tensor([900, 10]), c)
        full_a = model.predictor(zt, torch.tensor([10, 900]), c)
        full_b = model.predictor(zt, torch.tensor([900, 10]), c)
    assert not torch.allclose(a, b)
    assert not torch.allclose(full_a, full_b)


def test_prior_parameterisation_exact_when_condition_is_clean():
    model = LatentRefiner(TINY, SCHED)
    z0, eps = torch.randn(1, 16, 16, 16), torch.randn(1, 16, 16, 16)
    t = 400
    ab = SCHED.alpha_bar(t)
    zt = ab ** 0.5 * z0 + (1 - ab) ** 0.5 * eps
    with torch.no_grad():
        assert torch.allclose(model.predictor(zt, torch.tensor([t]), z0), eps, atol=1e-4)


def _pairs(n=4, size=64):
    r = np.random.default_rng(0)
    clean = [MU_WATER * (1 + 0.5 * (np.add.outer(np.arange(size), np.arange(size)) % 16 > 7)) for _ in range(n)]
    return [(CTImage(c + MU_WATER * 0.05 * r.standard_normal(c.shape)), CTImage(c)) for c in clean]


def test_training_smoke_decreases_and_is_deterministic():
    cfg = RefinerTrainConfig(epochs=10, batch_size=2, lr=2e-3)
    a = train_refiner(_pairs(), SCHED, cfg, TINY)
    b = train_refiner(_pairs(), SCHED, cfg, TINY)
    assert a.loss_curve == b.loss_curve
    assert a.loss_curve[-1] < a.loss_curve[0]


def test_zero_epochs_checkpoint(tmp_path):
    ck = train_refiner(_pairs(2), SCHED, RefinerTrainConfig(epochs=0), TINY)
    assert ck.loss_curve == []
    man = ck.save(tmp_path / "r")
    ck2 = RefinerCheckpoint.load(tmp_path / "r")
    assert ck2.manifest()["config_hash"] == man["config_hash"]
    img = _image(3)
    assert torch.equal(encode(img, ck.build()), encode(img, ck2.build()))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        RefinerTrainConfig(beta_ssim=-1)
    with pytest.raises(ValidationError):
        train_refiner([], SCHED, RefinerTrainConfig(epochs=1), TINY)
