import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coordinpaint.autodiff import Tensor, precision
from coordinpaint.losses import (
    FeatureExtractor,
    LossReport,
    discriminator_loss,
    feature_loss,
    gan_losses,
    generator_adv_loss,
    masked_l1,
    nn_loss,
    stage1_loss,
    style_loss,
    weighted_total,
)
from coordinpaint.autodiff import gram
from coordinpaint.metrics import gaussian_window, l1, ssim
from coordinpaint.networks import DiscriminatorConfig, PatchDiscriminator
from coordinpaint.warp import sample_bilinear


# -- masked l1 -------------------------------------------------------------------


def test_masked_l1_hand_value():
    assert masked_l1(Tensor(np.array([1.0, 2.0])), np.zeros(2), np.ones(2)).item() == 1.5


def test_masked_l1_zero_mask():
    assert masked_l1(Tensor(np.array([1.0, 2.0])), np.zeros(2), np.zeros(2)).item() == 0.0


def test_masked_l1_equal_inputs():
    a = np.random.default_rng(0).random((2, 3, 4, 4))
    assert masked_l1(Tensor(a), a, np.ones((2, 1, 4, 4))).item() == 0.0


def test_masked_l1_counts_pixels_not_channels():
    a = np.ones((1, 3, 2, 2))
    mask = np.zeros((1, 1, 2, 2))
    mask[0, 0, 0, 0] = 1
    # three channels of difference 1 on one pixel
    assert masked_l1(Tensor(a), np.zeros_like(a), mask).item() == 3.0


def test_masked_l1_shape_mismatch():
    with pytest.raises(ValueError):
        masked_l1(Tensor(np.zeros(3)), np.zeros(2), np.ones(3))


# -- stage 1 ---------------------------------------------------------------------------


def stage1_case(rng, n=2, th=6, tw=5, img=10):
    c = rng.uniform(0, img - 1, (n, 2, th, tw))
    known = rng.random((n, th, tw)) < 0.6
    src = rng.random((n, 3, img, img))
    tgt_known = rng.random((n, th, tw)) < 0.6
    return c, known, src, tgt_known


def test_stage1_zero_at_consistent_inputs():
    rng = np.random.default_rng(1)
    c, known, src, tgt_known = stage1_case(rng)
    with precision(np.float64):
        d = Tensor(c)
        t = sample_bilinear(Tensor(src), d)
        rep = stage1_loss(c, known, d, t, t.data, tgt_known, (10, 10))
    assert rep.total.item() == 0.0


def test_stage1_shift_one_pixel():
    rng = np.random.default_rng(2)
    c, known, src, tgt_known = stage1_case(rng)
    w = 10
    with precision(np.float64):
        d = Tensor(c + np.array([1.0, 0.0]).reshape(1, 2, 1, 1))
        t = sample_bilinear(Tensor(src), d)
        rep = stage1_loss(c, known, d, t, t.data, tgt_known, (w, 12))
    assert rep.terms["stage1_coord_l1"].item() == pytest.approx(1 / w, rel=1e-12)


def reference_stage1(c, known, d, src, tgt, tgt_known, size):
    """Plain numpy reimplementation with explicit loops over texels."""
    w, h = size
    n, _, th, tw = c.shape
    num1 = num2 = 0.0
    cnt1, cnt2 = known.sum(), tgt_known.sum()
    for b in range(n):
        for j in range(th):
            for i in range(tw):
                if known[b, j, i]:
                    num1 += abs(d[b, 0, j, i] - c[b, 0, j, i]) / w + abs(d[b, 1, j, i] - c[b, 1, j, i]) / h
                if tgt_known[b, j, i]:
                    x = min(max(d[b, 0, j, i], 0), src.shape[3] - 1)
                    y = min(max(d[b, 1, j, i], 0), src.shape[2] - 1)
                    x0, y0 = min(int(x), src.shape[3] - 2), min(int(y), src.shape[2] - 2)
                    fx, fy = x - x0, y - y0
                    for ch in range(3):
                        s = src[b, ch]
                        v = (s[y0, x0] * (1 - fx) * (1 - fy) + s[y0, x0 + 1] * fx * (1 - fy)
                             + s[y0 + 1, x0] * (1 - fx) * fy + s[y0 + 1, x0 + 1] * fx * fy)
                        num2 += abs(v - tgt[b, ch, j, i])
    return num1 / max(cnt1, 1) + num2 / max(cnt2, 1)


def test_stage1_matches_reference():
    rng = np.random.default_rng(3)
    c, known, src, tgt_known = stage1_case(rng)
    d = c + rng.normal(0, 0.7, c.shape)
    tgt = rng.random((2, 3, 6, 5))
    with precision(np.float64):
        t = sample_bilinear(Tensor(src), Tensor(d))
        got = stage1_loss(c, known, Tensor(d), t, tgt, tgt_known, (10, 10)).total.item()
    assert got == pytest.approx(reference_stage1(c, known, d, src, tgt, tgt_known, (10, 10)), rel=1e-6)


def test_stage1_color_term_reaches_coordinates():
    rng = np.random.default_rng(4)
    c, known, src, tgt_known = stage1_case(rng)
    tgt = rng.random((2, 3, 6, 5))
    tgt_known[0, 2, 3] = True
    d0 = np.floor(c) + 0.5

    def color_term(d):
        t = sample_bilinear(Tensor(src), Tensor(d))
        return stage1_loss(c, known, Tensor(d), t, tgt, tgt_known, (10, 10)).terms["stage1_color_l1"].item()

    with precision(np.float64):
        d = Tensor(d0, requires_grad=True)
        rep = stage1_loss(c, known, d, sample_bilinear(Tensor(src), d), tgt, tgt_known, (10, 10))
        rep.terms["stage1_color_l1"].backward()
        eps = 1e-6
        up, down = d0.copy(), d0.copy()
        up[0, 0, 2, 3] += eps
        down[0, 0, 2, 3] -= eps
        numeric = (color_term(up) - color_term(down)) / (2 * eps)
    assert abs(numeric) > 1e-4
    assert d.grad[0, 0, 2, 3] == pytest.approx(numeric, rel=1e-5)


def test_stage1_mask_mismatch():
    rng = np.random.default_rng(5)
    c, known, src, tgt_known = stage1_case(rng)
    d = Tensor(c)
    with pytest.raises(ValueError):
        stage1_loss(c, known[:, :3], d, sample_bilinear(Tensor(src), d), np.zeros((2, 3, 6, 5)), tgt_known, (10, 10))


# -- nearest-neighbour loss ------------------------------------------------------------------


def brute_nn(pred, target, window):
    n, c, h, w = pred.shape
    r = window // 2
    total = 0.0
    for b in range(n):
        for y in range(h):
            for x in range(w):
                best = math.inf
                for dy in range(-r, r + 1):
                    for dx in range(-r, r + 1):
                        yy = min(max(y + dy, 0), h - 1)
                        xx = min(max(x + dx, 0), w - 1)
                        best = min(best, np.abs(pred[b, :, y, x] - target[b, :, yy, xx]).mean())
                total += best
    return total / (n * h * w)


def test_nn_window_one_is_l1():
    rng = np.random.default_rng(6)
    p, t = rng.random((2, 3, 5, 5)), rng.random((2, 3, 5, 5))
    with precision(np.float64):
        assert nn_loss(Tensor(p), t, 1).item() == pytest.approx(np.abs(p - t).mean(), rel=1e-12)


def test_nn_shift_inside_window():
    t = np.random.default_rng(7).random((1, 3, 8, 8))
    p = np.roll(t, 1, axis=3)
    p[..., 0] = t[..., 0]  # edge column replicated like the padded target
    with precision(np.float64):
        assert nn_loss(Tensor(p), t, 3).item() == 0.0


def test_nn_brute_force_oracle():
    rng = np.random.default_rng(8)
    p, t = rng.random((1, 3, 8, 8)), rng.random((1, 3, 8, 8))
    with precision(np.float64):
        assert nn_loss(Tensor(p), t, 5).item() == pytest.approx(brute_nn(p, t, 5), rel=1e-6)


@given(st.integers(0, 2**16), st.sampled_from([1, 3, 5, 7]))
@settings(max_examples=25, deadline=None)
def test_nn_bounded_by_l1(seed, window):
    rng = np.random.default_rng(seed)
    p, t = rng.random((1, 2, 6, 5)), rng.random((1, 2, 6, 5))
    with precision(np.float64):
        assert nn_loss(Tensor(p), t, window).item() <= np.abs(p - t).mean() + 1e-12


def test_nn_even_window():
    with pytest.raises(ValueError):
        nn_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 4)), 4)


# -- adversarial --------------------------------------------------------------------------


def test_gan_zero_logits():
    z = Tensor(np.zeros((2, 1, 4, 4)))
    assert generator_adv_loss(z).item() == pytest.approx(math.log(2), rel=1e-6)
    assert discriminator_loss(z, z).item() == pytest.approx(2 * math.log(2), rel=1e-6)


def test_perfect_discriminator():
    real = Tensor(np.full((1, 1, 2, 2), 60.0))
    fake = Tensor(np.full((1, 1, 2, 2), -60.0))
    assert discriminator_loss(real, fake).item() < 1e-20


def test_gan_hand_bce():
    rng = np.random.default_rng(9)
    r, f = rng.normal(size=(1, 1, 3, 3)), rng.normal(size=(1, 1, 3, 3))
    sig = lambda x: 1 / (1 + np.exp(-x))  # noqa: E731
    bce_d = -np.mean(np.log(sig(r))) - np.mean(np.log(1 - sig(f)))
    bce_g = -np.mean(np.log(sig(f)))
    with precision(np.float64):
        assert discriminator_loss(Tensor(r), Tensor(f)).item() == pytest.approx(bce_d, rel=1e-10)
        assert generator_adv_loss(Tensor(f)).item() == pytest.approx(bce_g, rel=1e-10)


def test_gan_losses_detach_fake_for_discriminator():
    rng = np.random.default_rng(10)
    disc = PatchDiscriminator(DiscriminatorConfig(widths=(2, 2, 2)))
    fake = Tensor(rng.random((1, 3, 16, 16)), requires_grad=True)
    pose = Tensor(rng.random((1, 3, 16, 16)))
    g_term, d_term = gan_losses(disc, (Tensor(rng.random((1, 3, 16, 16))), pose), (fake, pose))
    d_term.backward()
    assert fake.grad is None
    g_term.backward()
    assert fake.grad is not None and np.abs(fake.grad).sum() > 0


# -- perceptual and style --------------------------------------------------------------------


def test_feature_losses_zero_at_target():
    ex = FeatureExtractor(0)
    x = np.random.default_rng(11).random((1, 3, 16, 16))
    assert feature_loss(Tensor(x), x, ex).item() == 0.0
    assert style_loss(Tensor(x), x, ex).item() == 0.0


def test_extractor_deterministic_and_frozen():
    a, b = FeatureExtractor(3), FeatureExtractor(3)
    for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
        np.testing.assert_array_equal(wa, wb)
        assert not wa.flags.writeable
    x = Tensor(np.random.default_rng(12).random((1, 3, 8, 8)))
    for fa, fb in zip(a.features(x), b.features(x)):
        assert fa.data.tobytes() == fb.data.tobytes()


def test_gram_invariant_to_spatial_permutation():
    rng = np.random.default_rng(13)
    f = rng.standard_normal((2, 4, 5, 6))
    perm = rng.permutation(30)
    g = f.reshape(2, 4, 30)[:, :, perm].reshape(2, 4, 5, 6)
    with precision(np.float64):
        np.testing.assert_allclose(gram(Tensor(f)).data, gram(Tensor(g)).data, rtol=1e-12)


def test_gram_independent():
    f = np.random.default_rng(14).standard_normal((2, 3, 4, 5))
    ref = np.stack([fi.reshape(3, -1) @ fi.reshape(3, -1).T for fi in f]) / (3 * 4 * 5)
    with precision(np.float64):
        np.testing.assert_allclose(gram(Tensor(f)).data, ref, rtol=1e-12)


def test_style_loss_independent():
    rng = np.random.default_rng(15)
    ex = FeatureExtractor(5)
    p, t = rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16))
    with precision(np.float64):
        fp = [f.data for f in ex.features(Tensor(p))]
        ft = [f.data for f in ex.features(Tensor(t))]
        got = style_loss(Tensor(p), t, ex).item()

    def g(f):
        n, c, h, w = f.shape
        m = f.reshape(n, c, h * w)
        return np.einsum("nci,ndi->ncd", m, m) / (c * h * w)

    ref = sum(np.abs(g(a) - g(b)).mean() for a, b in zip(fp, ft))
    assert got == pytest.approx(ref, rel=1e-9)


def test_weighted_total_and_report():
    terms = {"a": Tensor(2.0), "b": Tensor(3.0), "c": Tensor(5.0)}
    total = weighted_total(terms, {"a": 1.0, "b": 0.5})
    rep = LossReport(terms, {"a": 1.0, "b": 0.5}, total)
    assert rep.values() == {"a": 2.0, "b": 3.0, "c": 5.0, "total": 3.5}


# -- SSIM -------------------------------------------------------------------------------------


def window_oracle(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Per-window SSIM with explicit 2-D Gaussian weights."""
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None] ** 2) / (2 * sigma**2))
    g /= g.sum()
    c1, c2 = k1**2, k2**2
    vals = []
    for ch in range(a.shape[0]):
        for y in range(a.shape[1] - size + 1):
            for x in range(a.shape[2] - size + 1):
                pa = a[ch, y : y + size, x : x + size]
                pb = b[ch, y : y + size, x : x + size]
                ma, mb = (g * pa).sum(), (g * pb).sum()
                va = (g * (pa - ma) ** 2).sum()
                vb = (g * (pb - mb) ** 2).sum()
                cov = (g * (pa - ma) * (pb - mb)).sum()
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_identical_is_one():
    x = np.random.default_rng(16).random((3, 20, 24))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_window_oracle():
    rng = np.random.default_rng(17)
    a, b = rng.random((3, 16, 18)), rng.random((3, 16, 18))
    assert ssim(a, b) == pytest.approx(window_oracle(a, b), abs=1e-6)


def test_ssim_constant_shift_golden():
    a, b = np.full((3, 16, 16), 0.25), np.full((3, 16, 16), 0.75)
    c1 = 0.01**2
    formula = (2 * 0.25 * 0.75 + c1) / (0.25**2 + 0.75**2 + c1)
    assert ssim(a, b) == pytest.approx(formula, abs=1e-9)
    assert ssim(a, b) == pytest.approx(0.600064, abs=1e-6)


@given(st.integers(0, 2**16))
@settings(max_examples=20, deadline=None)
def test_ssim_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((3, 14, 14)), rng.random((3, 14, 14))
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9


def test_ssim_mask_selects_windows():
    rng = np.random.default_rng(18)
    a = rng.random((3, 24, 24))
    b = a.copy()
    b[:, :, 12:] = rng.random((3, 24, 12))
    mask = np.zeros((24, 24), bool)
    mask[:, :6] = True
    assert ssim(a, b, mask=mask) == pytest.approx(1.0)
    assert ssim(a, b) < 1.0


def test_ssim_small_image():
    with pytest.raises(ValueError):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def test_gaussian_window_normalized():
    g = gaussian_window(11, 1.5)
    assert g.sum() == pytest.approx(1.0) and g.argmax() == 5


def test_l1_metric():
    a = np.zeros((3, 4, 4))
    b = np.full((3, 4, 4), 0.5)
    assert l1(a, b) == 0.5
    mask = np.zeros((4, 4), bool)
    mask[0, 0] = True
    b[:, 0, 0] = 1.0
    assert l1(a, b, mask) == 1.0
