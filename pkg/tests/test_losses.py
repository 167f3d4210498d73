import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hourglass import losses as L
from hourglass.config import LossWeights
from hourglass.geometry import POSE_RANGES

SYN = POSE_RANGES["synthetic"]
CELEBA = POSE_RANGES["celeba"]


def _ssim_loops(a, b):
    """Literal per-window SSIM with explicit loops (float64 numpy)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    k = 11
    x = np.arange(k) - 5.0
    g = np.exp(-x ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (0.01 * 2) ** 2, (0.03 * 2) ** 2
    vals = []
    n, c, h, wd = a.shape
    for i in range(n):
        for ch in range(c):
            for r in range(h - k + 1):
                for q in range(wd - k + 1):
                    pa = a[i, ch, r:r + k, q:q + k]
                    pb = b[i, ch, r:r + k, q:q + k]
                    ma, mb = (w * pa).sum(), (w * pb).sum()
                    va = (w * (pa - ma) ** 2).sum()
                    vb = (w * (pb - mb) ** 2).sum()
                    cv = (w * (pa - ma) * (pb - mb)).sum()
                    vals.append((2 * ma * mb + c1) * (2 * cv + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_matches_loop_oracle():
    gen = torch.Generator().manual_seed(0)
    a = torch.rand(2, 3, 16, 14, generator=gen, dtype=torch.float64) * 2 - 1
    b = (a + 0.3 * torch.randn(a.shape, generator=gen, dtype=torch.float64)).clamp(-1, 1)
    assert abs(float(L.ssim(a, b)) - _ssim_loops(a, b)) < 1e-6


def test_ssim_constant_images_closed_form():
    # flat images have zero variance, so SSIM reduces to the luminance term
    a = torch.full((1, 1, 12, 12), 0.2, dtype=torch.float64)
    b = torch.full((1, 1, 12, 12), -0.4, dtype=torch.float64)
    c1 = (0.01 * 2) ** 2
    expected = (2 * 0.2 * -0.4 + c1) / (0.2 ** 2 + 0.4 ** 2 + c1)
    assert float(L.ssim(a, b)) == pytest.approx(expected, abs=1e-12)


def test_ssim_identity_is_one():
    a = torch.rand(3, 3, 16, 16, dtype=torch.float64)
    assert float(L.ssim(a, a)) == pytest.approx(1.0, abs=1e-12)
    assert float(L.ssim_loss(a, a)) == pytest.approx(0.0, abs=1e-12)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        L.ssim(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 16), noise=st.floats(0.0, 2.0))
def test_ssim_bounded_and_symmetric(seed, noise):
    gen = torch.Generator().manual_seed(seed)
    a = torch.rand(1, 3, 12, 12, generator=gen, dtype=torch.float64) * 2 - 1
    b = (a + noise * torch.randn(a.shape, generator=gen, dtype=torch.float64)).clamp(-1, 1)
    s = float(L.ssim(a, b))
    assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9
    assert s == pytest.approx(float(L.ssim(b, a)), abs=1e-12)


def test_gaussian_window_normalised_and_symmetric():
    w = L.gaussian_window()
    assert w.shape == (11, 11)
    assert float(w.sum()) == pytest.approx(1.0, abs=1e-12)
    assert torch.allclose(w, w.T) and torch.allclose(w, w.flip(0))


def _fd_check(fn, x, eps=1e-6, n_probe=12, seed=0):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.clone()
    rng = np.random.default_rng(seed)
    flat = x.detach().reshape(-1)
    for idx in rng.choice(flat.numel(), n_probe, replace=False):
        plus = flat.clone()
        plus[idx] += eps
        minus = flat.clone()
        minus[idx] -= eps
        with torch.no_grad():
            fd = (fn(plus.reshape(x.shape)) - fn(minus.reshape(x.shape))) / (2 * eps)
        g = grad.reshape(-1)[idx]
        assert abs(float(g - fd)) <= 1e-3 * max(abs(float(fd)), abs(float(g)), 1e-6), (int(idx), float(g), float(fd))


@pytest.fixture
def pair16():
    gen = torch.Generator().manual_seed(3)
    a = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64) * 2 - 1
    b = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64) * 2 - 1
    return a, b


def test_pixel_loss_gradient_fd(pair16):
    a, b = pair16
    _fd_check(lambda x: L.pixel_loss(b, x), a)


def test_ssim_loss_gradient_fd(pair16):
    a, b = pair16
    _fd_check(lambda x: L.ssim_loss(b, x), a)


def test_perceptual_loss_gradient_fd(pair16):
    a, b = pair16
    ext = L.PerceptualExtractor().double()
    _fd_check(lambda x: L.perceptual_loss(ext, b, x), a)


def test_perceptual_extractor_frozen_and_deterministic():
    e1, e2 = L.PerceptualExtractor(), L.PerceptualExtractor()
    e1.train()
    assert not e1.training
    assert all(not p.requires_grad for p in e1.parameters())
    x = torch.rand(1, 3, 32, 32) * 2 - 1
    assert torch.equal(e1(x)[0], e2(x)[0])
    assert e1(x)[0].shape == (1, 32, 16, 16)
    with pytest.raises(ValueError):
        L.PerceptualExtractor(mode="resnet")


def test_pixel_loss_is_mean_squared_error():
    a = torch.tensor([[[[0.0, 1.0], [2.0, 3.0]]]])
    b = torch.zeros_like(a)
    assert float(L.pixel_loss(a, b)) == pytest.approx((0 + 1 + 4 + 9) / 4)
    with pytest.raises(ValueError):
        L.pixel_loss(a, torch.zeros(1, 1, 2, 3))


def test_bce_by_hand():
    lr = torch.tensor([[2.0], [-1.0]])
    lf = torch.tensor([[0.5], [-3.0]])
    sig = lambda v: 1 / (1 + math.exp(-v))
    real = -np.mean([math.log(sig(2.0)), math.log(sig(-1.0))])
    fake = -np.mean([math.log(1 - sig(0.5)), math.log(1 - sig(-3.0))])
    gen = -np.mean([math.log(sig(0.5)), math.log(sig(-3.0))])
    g, d = L.adversarial_losses(lr, lf)
    assert float(d) == pytest.approx(real + fake, rel=1e-6)
    assert float(g) == pytest.approx(gen, rel=1e-6)


def test_latent_consistency_mse():
    z = torch.zeros(4, 8)
    assert float(L.latent_consistency(z, z + 0.5)) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        L.latent_consistency(z, torch.zeros(4, 7))


def test_pose_consistency_wraps_azimuth():
    p = torch.tensor([[359.0, 30.0, 1.2]])
    q = torch.tensor([[1.0, 30.0, 1.2]])
    terms = L.pose_consistency_terms(p, q, SYN)
    assert float(terms[0]) == pytest.approx((2 / 360) ** 2, rel=1e-4)
    assert float(terms[1]) == 0 and float(terms[2]) == 0


@settings(max_examples=40, deadline=None)
@given(a=st.floats(0, 360, exclude_max=True), b=st.floats(0, 360, exclude_max=True),
       k=st.integers(-2, 2))
def test_pose_consistency_invariant_to_full_turns(a, b, k):
    p = torch.tensor([[a, 20.0, 1.1]], dtype=torch.float64)
    q = torch.tensor([[b, 40.0, 1.4]], dtype=torch.float64)
    shifted_p, shifted_q = p.clone(), q.clone()
    shifted_p[:, 0] += 360.0 * k
    shifted_q[:, 0] += 360.0 * k
    base = float(L.pose_consistency(p, q, SYN))
    assert float(L.pose_consistency(shifted_p, shifted_q, SYN)) == pytest.approx(base, abs=1e-9)


def test_pose_consistency_degenerate_component_is_zero():
    p = torch.tensor([[230.0, 80.0, 1.0]])
    q = torch.tensor([[300.0, 100.0, 1.0]])
    assert float(L.pose_consistency_terms(p, q, CELEBA)[2]) == 0.0


def test_weighted_total_and_report():
    w = LossWeights(z=2.0, theta=0.5, adv=3.0)
    comps = {"l_z": 1.0, "l_theta": 2.0, "l_adv_g": 1.0, "unrelated": 100.0}
    assert L.weighted_total(comps, w) == pytest.approx(2.0 + 1.0 + 3.0)
    rep = L.make_report({"l_z": 1.0, "l_theta": 2.0}, w, l_adv_d=0.7)
    assert rep.total == pytest.approx(3.0) and rep.l_adv_d == 0.7 and rep.is_finite()
    rep.l_2 = float("nan")
    assert not rep.is_finite()


def test_distillation_mirrors_reconstruction():
    ext = L.PerceptualExtractor()
    a = torch.rand(2, 3, 32, 32) * 2 - 1
    b = torch.rand(2, 3, 32, 32) * 2 - 1
    rec = L.reconstruction_losses(ext, a, b)
    dist = L.distillation_losses(ext, a, b)
    for key in ("l_2", "l_vgg", "l_ssim"):
        assert float(dist[key + "_gen"]) == float(rec[key])
    assert all(float(v) >= 0 for v in rec.values())
