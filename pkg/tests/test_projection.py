import numpy as np
import pytest
import torch

from ldct.errors import ConfigurationError, TrainingFault, ValidationError
from ldct.geometry import ScanGeometry, Sinogram
from ldct.projection import (ProjCheckpoint, ProjNetConfig, ProjTrainConfig, ProjectionNet, SimilarityMasks,
                             compute_masks, denoise_projection, estimate_noise_std, normalize_difference,
                             projection_loss, train_projection)


def _ones(shape):
    return SimilarityMasks(torch.zeros(shape, dtype=torch.float64), torch.zeros(shape, dtype=torch.float64))


def test_identical_pair_gives_zero_eps():
    a = torch.rand(1, 1, 4, 4)
    m = compute_masks((a, a.clone()), (a, a.clone()))
    assert torch.all(m.eps1 == 0) and torch.all(m.w1 == 1)


def test_single_large_difference_hand_normalisation():
    a = torch.zeros(4, 4)
    b = torch.zeros(4, 4)
    b[2, 1] = 5.0
    eps = normalize_difference(a - b)
    # 95th percentile of fifteen zeros and one 5 (linear interpolation) is 1.25
    assert eps[2, 1] == 1.0
    assert eps.sum() == 1.0


def test_masks_invariant_to_common_offset():
    g = torch.Generator().manual_seed(0)
    a, b = torch.rand(2, 1, 6, 6, generator=g), torch.rand(2, 1, 6, 6, generator=g)
    m1 = compute_masks((a, b), (a, b))
    m2 = compute_masks((a + 3.0, b + 3.0), (a - 1.0, b - 1.0))
    assert torch.allclose(m1.eps1, m2.eps1, atol=1e-6) and torch.allclose(m1.eps2, m2.eps2, atol=1e-6)


def test_mask_monotone_in_difference():
    d = torch.tensor([[0.1, 0.2, 0.3, 0.4]]).repeat(4, 1)
    base = normalize_difference(d)
    d2 = d.clone()
    d2[1, 2] += 0.5
    assert normalize_difference(d2)[1, 2] >= base[1, 2]


def test_masks_carry_no_gradient():
    a = torch.rand(1, 1, 4, 4, requires_grad=True)
    b = torch.rand(1, 1, 4, 4)
    m = compute_masks((a, b), (a * 2, b))
    assert not m.eps1.requires_grad and not m.eps2.requires_grad


def test_mask_shape_mismatch():
    with pytest.raises(ValidationError):
        compute_masks((torch.zeros(4, 4), torch.zeros(4, 4)), (torch.zeros(4, 4), torch.zeros(2, 2)))


def test_loss_degenerates_to_plain_mse():
    rng = np.random.default_rng(0)
    out, tgt, fi, fj = (torch.as_tensor(rng.standard_normal((2, 1, 4, 4))) for _ in range(4))
    value = float(projection_loss(out, tgt, fi, fj, _ones(out.shape), alpha=0.0))
    reference = sum((o - t) ** 2 for o, t in zip(out.numpy().ravel(), tgt.numpy().ravel())) / out.numel()
    assert abs(value - reference) < 1e-7


def test_loss_zero_at_fixed_point():
    x = torch.rand(1, 1, 4, 4, dtype=torch.float64)
    m = compute_masks((x, x + 0.1), (x, x))
    assert float(projection_loss(x, x, x, x, m, 0.02)) == 0.0


def test_loss_hand_evaluation_alpha_002():
    out = np.arange(16, dtype=float).reshape(4, 4) / 10
    tgt = np.ones((4, 4)) * 0.7
    fi = np.linspace(0, 1, 16).reshape(4, 4)
    fj = fi[::-1, ::-1].copy()
    w1 = np.full((4, 4), 0.5)
    w1[0] = 1.0
    w2 = np.full((4, 4), 0.25)
    # cell-by-cell evaluation
    first = second = 0.0
    for r in range(4):
        for c in range(4):
            gap = (out[r, c] - tgt[r, c]) * w1[r, c]
            first += gap * gap
            second += (gap - (fi[r, c] - fj[r, c]) * w2[r, c]) ** 2
    expected = first / 16 + 0.02 * second / 16
    masks = SimilarityMasks(torch.as_tensor(1 - w1), torch.as_tensor(1 - w2))
    t = lambda a: torch.as_tensor(a)
    assert float(projection_loss(t(out), t(tgt), t(fi), t(fj), masks, 0.02)) == pytest.approx(expected, abs=1e-6)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(5):
        out = torch.as_tensor(rng.standard_normal((1, 1, 4, 4)), dtype=torch.float64).requires_grad_(True)
        tgt, fi, fj = (torch.as_tensor(rng.standard_normal((1, 1, 4, 4))) for _ in range(3))
        masks = SimilarityMasks(torch.as_tensor(rng.uniform(0, 1, (1, 1, 4, 4))),
                                torch.as_tensor(rng.uniform(0, 1, (1, 1, 4, 4))))
        loss = projection_loss(out, tgt, fi, fj, masks, 0.02)
        (grad,) = torch.autograd.grad(loss, out)
        h = 1e-6
        fd = np.zeros(16)
        base = out.detach().numpy().ravel()
        for k in range(16):
            p, m = base.copy(), base.copy()
            p[k] += h
            m[k] -= h
            f = lambda v: float(projection_loss(torch.as_tensor(v.reshape(1, 1, 4, 4)), tgt, fi, fj, masks, 0.02))
            fd[k] = (f(p) - f(m)) / (2 * h)
        g = grad.numpy().ravel()
        assert np.max(np.abs(g - fd)) <= 1e-4 * np.max(np.abs(fd))


def test_non_finite_output_is_training_fault():
    x = torch.zeros(1, 1, 2, 2)
    bad = x.clone()
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingFault):
        projection_loss(bad, x, x, x, _ones(x.shape), 0.02)


@pytest.mark.parametrize("shape", [(8, 10), (90, 48), (180, 96), (7, 5)])
def test_network_preserves_shape(shape):
    net = ProjectionNet(ProjNetConfig(base_channels=4))
    assert net(torch.zeros(1, 1, *shape)).shape == (1, 1, *shape)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ProjTrainConfig(alpha=-1)
    with pytest.raises(ConfigurationError):
        ProjTrainConfig(lr=0)
    with pytest.raises(ConfigurationError):
        ProjTrainConfig(patch_size=6)
    with pytest.raises(ConfigurationError):
        ProjNetConfig(activation="tanhh")


def _toy_sinograms(n=6, seed=0):
    g = ScanGeometry.for_image(16, 24, field_of_view=16 * 0.68359375)
    rng = np.random.default_rng(seed)
    base = np.sin(np.linspace(0, 3, g.num_detector_bins))[None, :] ** 2 + 0.5
    return [Sinogram(np.abs(base + 0.05 * rng.standard_normal(g.sinogram_shape)), g) for _ in range(n)]


SMALL = dict(net_cfg=ProjNetConfig(base_channels=4, depth=2))


def test_training_reduces_loss_and_is_deterministic():
    sinos = _toy_sinograms()
    cfg = ProjTrainConfig(epochs=10, batch_size=3, lr=3e-3)
    a = train_projection(sinos, cfg, **SMALL)
    b = train_projection(sinos, cfg, **SMALL)
    assert a.loss_curve == b.loss_curve
    assert a.loss_curve[-1] < a.loss_curve[0]
    assert len(a.loss_curve) == 10


def test_zero_epochs_gives_initialised_checkpoint():
    ck = train_projection(_toy_sinograms(2), ProjTrainConfig(epochs=0), **SMALL)
    assert ck.loss_curve == [] and ck.epochs_done == 0
    assert ck.net_cfg.input_scale > 0


def test_training_input_validation():
    with pytest.raises(ValidationError):
        train_projection([], ProjTrainConfig(epochs=1))


def test_checkpoint_round_trip_and_denoise(tmp_path):
    sinos = _toy_sinograms(3)
    ck = train_projection(sinos, ProjTrainConfig(epochs=1, batch_size=3), **SMALL)
    man = ck.save(tmp_path / "ck")
    assert len(man["weights_sha256"]) == 64 and man["config_hash"]
    ck2 = ProjCheckpoint.load(tmp_path / "ck")
    y = sinos[0].with_data(sinos[0].data, dose_tag=0.25)
    a, b = denoise_projection(y, ck), denoise_projection(y, ck2)
    assert a.shape == y.shape and a.dose_tag == 0.25
    assert np.array_equal(a.data, b.data)
    assert (a.data >= 0).all()


def test_denoise_rejects_other_shapes():
    sinos = _toy_sinograms(2)
    ck = train_projection(sinos, ProjTrainConfig(epochs=0), **SMALL)
    g = ScanGeometry.for_image(16, 30, field_of_view=16 * 0.68359375)
    with pytest.raises(ConfigurationError):
        denoise_projection(Sinogram(np.zeros(g.sinogram_shape), g), ck)


def test_noise_estimate_on_pure_noise():
    rng = np.random.default_rng(3)
    arrays = [0.2 * rng.standard_normal((100, 50)) for _ in range(3)]
    assert estimate_noise_std(arrays) == pytest.approx(0.2, rel=0.03)
