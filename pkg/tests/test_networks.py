import numpy as np
import pytest

from coordinpaint.autodiff import Tensor, precision
from coordinpaint.losses import stage1_loss
from coordinpaint.networks import (
    DiscriminatorConfig,
    GatedConvSpec,
    Inpainter,
    InpainterConfig,
    NetworkParams,
    PatchDiscriminator,
    Refiner,
    RefinerConfig,
    count_params,
    discriminate,
    gated_conv_forward,
    init_gated_conv,
)
from coordinpaint.autodiff.tensor import leaky_relu
from coordinpaint.autodiff import conv2d
from coordinpaint.warp import SENTINEL, identity_meshgrid, sample_bilinear


def gated_params(spec, gate_bias, seed=0, zero_gate_weight=True):
    p = NetworkParams()
    init_gated_conv(p, "g", spec, np.random.default_rng(seed))
    gw = p["g.gate.weight"].data
    p["g.gate.weight"] = Tensor(np.zeros_like(gw) if zero_gate_weight else gw)
    p["g.gate.bias"] = Tensor(np.full(spec.out_channels, gate_bias))
    return p


def plain_branch(x, p):
    return leaky_relu(conv2d(x, p["g.feature.weight"], p["g.feature.bias"], padding=1), 0.2).data


# -- gated conv -------------------------------------------------------------------


def test_gate_saturated_open():
    spec = GatedConvSpec(2, 3)
    p = gated_params(spec, 20.0)
    x = Tensor(np.random.default_rng(1).standard_normal((1, 2, 5, 5)))
    out = gated_conv_forward(x, spec, p, "g").data
    np.testing.assert_allclose(out, plain_branch(x, p), rtol=1e-6, atol=1e-6)


def test_gate_saturated_closed():
    spec = GatedConvSpec(2, 3)
    p = gated_params(spec, -20.0)
    x = Tensor(np.random.default_rng(2).standard_normal((1, 2, 5, 5)))
    out = gated_conv_forward(x, spec, p, "g").data
    assert np.abs(out).max() <= np.abs(plain_branch(x, p)).max() * 3e-9


def test_gate_half():
    spec = GatedConvSpec(2, 3)
    p = gated_params(spec, 0.0)
    x = Tensor(np.random.default_rng(3).standard_normal((1, 2, 5, 5)))
    out = gated_conv_forward(x, spec, p, "g").data
    np.testing.assert_array_equal(out, 0.5 * plain_branch(x, p))


def test_gated_channel_mismatch():
    spec = GatedConvSpec(2, 3)
    with pytest.raises(ValueError):
        gated_conv_forward(Tensor(np.zeros((1, 3, 4, 4))), spec, gated_params(spec, 0.0), "g")


# -- parameter counts --------------------------------------------------------------------


def test_count_single_conv():
    p = NetworkParams(w=Tensor(np.zeros((1, 1, 3, 3))), b=Tensor(np.zeros(1)))
    assert count_params(p) == 10


def test_gated_doubles_count():
    spec = GatedConvSpec(4, 6, kernel=3)
    p = NetworkParams()
    init_gated_conv(p, "g", spec, np.random.default_rng(0))
    assert count_params(p) == 2 * (4 * 6 * 9 + 6)


def gated(cin, cout, k=3):
    return 2 * (cin * cout * k * k + cout)


def test_inpainter_count_from_shape_table():
    c = InpainterConfig()
    w = c.widths
    expected = gated(3, w[0]) + gated(w[0], w[1]) + gated(w[1], w[2]) + gated(w[2], w[2])
    expected += 2 * gated(w[2], w[2])
    expected += gated(w[2], w[2]) + gated(w[2], w[1]) + gated(w[1], w[0])
    expected += w[0] * 2 * 9 + 2
    assert count_params(Inpainter(c).params) == expected


def test_golden_counts():
    assert count_params(Inpainter(InpainterConfig()).params) == 1552258
    assert count_params(Inpainter(InpainterConfig.reference_layout()).params) == 2732930
    assert count_params(Refiner(RefinerConfig()).params) == 1297939
    assert count_params(Refiner(RefinerConfig(mode="plain")).params) == 1007283
    assert count_params(PatchDiscriminator(DiscriminatorConfig()).params) == 43185


def test_reference_layout_has_fourteen_convs():
    cfg = InpainterConfig.reference_layout()
    assert cfg.conv_layers == 14
    weights = [k for k in Inpainter(cfg).params if k.endswith("feature.weight") or k.endswith("out.weight")]
    assert len(weights) == 14


# -- inpainter ---------------------------------------------------------------------------


def test_inpainter_shape_and_finite_with_sentinel():
    cfg = InpainterConfig(widths=(8, 8, 8))
    net = Inpainter(cfg, seed=1)
    x = np.full((2, 3, 16, 16), SENTINEL, np.float32)
    x[:, 2] = 0.0
    x[:, :, :8] = np.random.default_rng(0).random((2, 3, 8, 16))
    out = net.forward(Tensor(x), (32, 40))
    assert out.shape == (2, 2, 16, 16)
    assert np.isfinite(out.data).all()
    assert (out.data[:, 0] > -0.1 * 32).all() and (out.data[:, 0] < 1.1 * 32).all()
    assert (out.data[:, 1] > -0.1 * 40).all() and (out.data[:, 1] < 1.1 * 40).all()


def test_inpainter_rejects_bad_extents():
    net = Inpainter(InpainterConfig(widths=(4, 4, 4)))
    with pytest.raises(ValueError, match="divisible"):
        net.forward(Tensor(np.zeros((1, 3, 12, 12))), (8, 8))


def test_rgb_head_range():
    net = Inpainter(InpainterConfig.rgb(widths=(4, 4, 4)), prefix="rgb")
    out = net.forward(Tensor(np.random.default_rng(0).standard_normal((1, 4, 16, 16))))
    assert out.shape == (1, 3, 16, 16) and (out.data > 0).all() and (out.data < 1).all()


def test_stage1_loss_fd_through_inpainter_weights():
    """Twenty random scalar weights of f, 64-bit, tiny config."""
    rng = np.random.default_rng(7)
    cfg = InpainterConfig(widths=(3, 4, 4), downsamplings=2, bottleneck_layers=1)
    img = 12
    with precision(np.float64):
        net = Inpainter(cfg, seed=3)
    src = rng.random((1, 3, img, img))
    c = rng.uniform(1, img - 2, (1, 2, 8, 8))
    known = rng.random((1, 8, 8)) < 0.5
    x = np.concatenate([np.where(known[:, None], c / img, SENTINEL), known[:, None]], axis=1)
    tgt = rng.random((1, 3, 8, 8))
    tgt_known = rng.random((1, 8, 8)) < 0.5

    def loss(table):
        net.params = table
        d = net.forward(Tensor(x), (img, img))
        t = sample_bilinear(Tensor(src), d)
        return stage1_loss(c, known, d, t, tgt, tgt_known, (img, img)).total

    with precision(np.float64):
        base = NetworkParams((k, Tensor(v.data, requires_grad=True)) for k, v in net.params.items())
        loss(base).backward()
        names = list(base)
        picks = [(names[rng.integers(len(names))], None) for _ in range(20)]
        picks = [(n, tuple(rng.integers(s) for s in base[n].shape)) for n, _ in picks]
        eps = 1e-6
        worst = 0.0
        for name, idx in picks:
            vals = []
            for sgn in (1, -1):
                arr = base[name].data.copy()
                arr[idx] += sgn * eps
                table = NetworkParams(base)
                table[name] = Tensor(arr)
                vals.append(loss(table).item())
            num = (vals[0] - vals[1]) / (2 * eps)
            ana = base[name].grad[idx]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    assert worst <= 1e-4


# -- refiner ------------------------------------------------------------------------------


def small_refiner(mode="deformable", identity=0, seed=0):
    return Refiner(RefinerConfig(target_channels=10, source_channels=8, identity_channels=identity, widths=(4, 6, 8, 8), residual_blocks=1, mode=mode), seed=seed)


def stacks(rng, n=2, h=16, w=16):
    return Tensor(rng.random((n, 10, h, w))), Tensor(rng.random((n, 8, h, w)))


def test_refiner_output_range():
    rng = np.random.default_rng(0)
    for mode in ("deformable", "plain"):
        net = small_refiner(mode)
        tgt, src = stacks(rng)
        warp = rng.uniform(0, 15, (2, 2, 16, 16))
        out = net.forward(tgt, src, warp=warp if mode == "deformable" else None)
        assert out.shape == (2, 3, 16, 16)
        assert (out.data > 0).all() and (out.data < 1).all()


def test_identity_warp_equals_plain_skips():
    rng = np.random.default_rng(1)
    net = small_refiner("deformable")
    tgt, src = stacks(rng)
    grid = np.broadcast_to(identity_meshgrid(16, 16), (2, 2, 16, 16)).copy()
    with precision(np.float64):
        a = net.forward(Tensor(tgt.data), Tensor(src.data), warp=grid, warp_known=np.ones((2, 16, 16), bool)).data
        b = net.forward(Tensor(tgt.data), Tensor(src.data), warp=grid, warp_skips=False).data
    np.testing.assert_array_equal(a, b)


def test_deformable_requires_warp():
    net = small_refiner("deformable")
    tgt, src = stacks(np.random.default_rng(2))
    with pytest.raises(ValueError, match="warp"):
        net.forward(tgt, src)


def test_identity_channel_required():
    net = small_refiner("plain", identity=3)
    tgt, src = stacks(np.random.default_rng(3))
    with pytest.raises(ValueError, match="identity"):
        net.forward(tgt, src)
    out = net.forward(tgt, src, identity_cond=Tensor(np.zeros((2, 3, 16, 16))))
    assert out.shape == (2, 3, 16, 16)


def test_refiner_has_two_encoders_with_three_skips():
    names = set(small_refiner("deformable").params)
    for enc in ("enc_target", "enc_source"):
        assert {f"refiner.{enc}.l{i}.feature.weight" for i in range(4)} <= names
    assert {f"refiner.dec{i}.feature.weight" for i in range(3)} <= names


def test_warp_moves_source_features():
    rng = np.random.default_rng(4)
    net = small_refiner("deformable")
    tgt, src = stacks(rng)
    grid = np.broadcast_to(identity_meshgrid(16, 16), (2, 2, 16, 16)).copy()
    shifted = grid.copy()
    shifted[:, 0] = np.clip(shifted[:, 0] + 4, 0, 15)
    a = net.forward(tgt, src, warp=grid).data
    b = net.forward(tgt, src, warp=shifted).data
    assert np.abs(a - b).max() > 1e-4


# -- discriminator ---------------------------------------------------------------------


def test_discriminator_resolution():
    d = PatchDiscriminator(DiscriminatorConfig())
    out = discriminate(d, Tensor(np.zeros((2, 3, 64, 64))), Tensor(np.zeros((2, 3, 64, 64))))
    assert out.shape == (2, 1, 8, 8)


def test_discriminator_zero_weights_give_bias():
    d = PatchDiscriminator(DiscriminatorConfig(widths=(4, 4, 4)))
    for k, t in list(d.params.items()):
        d.params[k] = Tensor(np.zeros(t.shape))
    d.params["disc.logit.bias"] = Tensor(np.array([0.37]))
    rng = np.random.default_rng(5)
    out = d.forward(Tensor(rng.random((1, 3, 32, 32))), Tensor(rng.random((1, 3, 32, 32)))).data
    np.testing.assert_allclose(out, 0.37, rtol=1e-6)


def test_discriminator_shape_mismatch():
    d = PatchDiscriminator()
    with pytest.raises(ValueError):
        d.forward(Tensor(np.zeros((1, 3, 32, 32))), Tensor(np.zeros((1, 3, 16, 16))))


def test_discriminator_logit_gradients():
    from coordinpaint.autodiff import check_gradients

    rng = np.random.default_rng(6)
    d = PatchDiscriminator(DiscriminatorConfig(in_channels=4, widths=(2, 3, 3)))
    with precision(np.float64):
        params = {k: t.data.astype(np.float64) for k, t in d.params.items()}
    names = list(params)

    def fn(img, pose, *ps):
        d.params = NetworkParams((n, p) for n, p in zip(names, ps))
        return d.forward(img, pose)

    arrays = [rng.standard_normal((1, 2, 16, 16)), rng.standard_normal((1, 2, 16, 16))] + [params[n] for n in names]
    assert check_gradients(fn, arrays, wrt=[0, 2, 3]) <= 1e-5
