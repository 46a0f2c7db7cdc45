import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from diffgf.codec import Codec, CodecConfig
from diffgf.layers import pixel_shuffle
from diffgf.metrics import NullPerceptual
from diffgf.mghnet import (
    RESBLOCK_VARIANTS,
    MGHNet,
    RefinerConfig,
    RefinerInput,
    build_input,
    compose,
    make_surrogates,
    predict_correction,
    refine,
    refiner_loss,
    train_refiner,
)
from diffgf.training import REFINER_PROTOCOL, TrainProtocol

from oracles import finite_difference_check

TINY = RefinerConfig(
    patch_size=2, encoder_widths=(4,), window_size=2, heads=1, decoder_channels=(4, 4), upscale=(2,), zero_init_output=False
)
SMALL = RefinerConfig(encoder_widths=(8, 16), decoder_channels=(8, 8, 8), zero_init_output=False)


def _rand(rng, h=8, w=8):
    return rng.random((h, w, 3)), rng.random((h, w, 3)), (rng.random((h, w)) < 0.3).astype(np.uint8)


# ---------------------------------------------------------------- pixel shuffle


def test_pixel_shuffle_layout():
    x = torch.tensor([1.0, 2.0, 3.0, 4.0]).view(1, 4, 1, 1)
    assert pixel_shuffle(x, 2).view(2, 2).tolist() == [[1.0, 2.0], [3.0, 4.0]]


def _unshuffle_bruteforce(y, r):
    n, c, H, W = y.shape
    out = torch.empty(n, c * r * r, H // r, W // r, dtype=y.dtype)
    for ch in range(c):
        for i in range(r):
            for j in range(r):
                out[:, ch * r * r + i * r + j] = y[:, ch, i::r, j::r]
    return out


@settings(max_examples=30, deadline=None)
@given(c=st.integers(1, 3), r=st.integers(1, 3), h=st.integers(1, 4), w=st.integers(1, 4), seed=st.integers(0, 999))
def test_pixel_shuffle_is_a_bijection(c, r, h, w, seed):
    x = torch.randn(2, c * r * r, h, w, generator=torch.Generator().manual_seed(seed))
    y = pixel_shuffle(x, r)
    assert y.shape == (2, c, h * r, w * r) and y.numel() == x.numel()
    assert torch.equal(_unshuffle_bruteforce(y, r), x)
    assert torch.equal(y, torch.nn.functional.pixel_shuffle(x, r))


def test_pixel_shuffle_divisibility():
    with pytest.raises(ValueError):
        pixel_shuffle(torch.zeros(1, 6, 2, 2), 2)


# ---------------------------------------------------------------- guided input and composition


def test_build_input_limits():
    rng = np.random.default_rng(0)
    x, y, _ = _rand(rng)
    full = build_input(x, y, np.ones((8, 8), np.uint8))
    assert np.all(full.delta == 0)
    none = build_input(x, y, np.zeros((8, 8), np.uint8))
    assert np.array_equal(none.delta, y - x)
    assert none.stack().shape == (8, 8, 7)
    assert np.array_equal(build_input(x, y, np.ones((8, 8)), guidance="y0").delta, y)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_delta_vanishes_on_the_mask(seed):
    x, y, m = _rand(np.random.default_rng(seed))
    inp = build_input(x, y, m)
    assert isinstance(inp, RefinerInput)
    assert np.all(inp.delta[m == 1] == 0)
    assert set(np.unique(inp.mask)) <= {0, 1}
    t = build_input(*(torch.as_tensor(a).permute(2, 0, 1)[None] for a in (x, y)), torch.as_tensor(m, dtype=torch.float64)[None, None])
    assert t.shape == (1, 7, 8, 8)
    np.testing.assert_array_equal(t[0, 3:6].permute(1, 2, 0).numpy(), inp.delta)


def test_build_input_errors():
    x = np.zeros((4, 4, 3))
    with pytest.raises(ValueError):
        build_input(x, np.zeros((4, 5, 3)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        build_input(x, x, np.full((4, 4), 0.5))
    with pytest.raises(ValueError):
        build_input(x, x, np.zeros((4, 4)), guidance="mask")


def test_compose_cases():
    y0 = np.full((2, 2, 1), 0.9)
    m = np.array([[1, 0], [0, 1]])
    out = compose(np.full((2, 2, 1), 0.2), np.full((2, 2, 1), 0.1), y0, m)
    np.testing.assert_allclose(out[..., 0], [[0.3, 0.9], [0.9, 0.3]])
    rng = np.random.default_rng(1)
    x, y, _ = _rand(rng)
    assert np.array_equal(compose(x, rng.random(x.shape), y, np.zeros((8, 8))), y)
    over = 1.5 * x - 0.25
    assert np.array_equal(compose(over, np.zeros_like(x), y, np.ones((8, 8))), np.clip(over, 0, 1))
    with pytest.raises(ValueError):
        compose(x, x, y, np.zeros((8, 7)))


def test_compose_preserves_known_pixels_bit_exactly():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        h, w = rng.integers(1, 9, size=2)
        x0 = rng.normal(0.5, 2.0, (h, w, 3))
        r = rng.uniform(-1, 1, (h, w, 3))
        y0 = rng.random((h, w, 3))
        m = (rng.random((h, w)) < rng.random()).astype(np.uint8)
        out = compose(x0, r, y0, m)
        known = m == 0
        assert np.array_equal(out[known], y0[known])
        tout = compose(*(torch.as_tensor(a).permute(2, 0, 1)[None] for a in (x0, r, y0)), torch.as_tensor(m)[None, None])
        assert torch.equal(tout[0].permute(1, 2, 0)[torch.as_tensor(known)], torch.as_tensor(y0)[torch.as_tensor(known)])


# ---------------------------------------------------------------- loss


def test_refiner_loss_hand_arithmetic():
    I = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    m = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    m[0, 0, 0, 0] = m[0, 0, 2, 3] = 1
    I_hat = I.clone()
    I_hat[0, 1, 0, 0] = I_hat[0, 1, 2, 3] = 0.1
    parts = refiner_loss(I_hat, I, m, 200.0, 10.0, NullPerceptual())
    assert parts["l2"].item() == pytest.approx(0.002)
    assert parts["total"].item() == pytest.approx(0.4)
    # larger areas divide by the masked pixel count instead of A_min
    m2 = torch.ones_like(m)
    assert refiner_loss(I + 0.1, I, m2, 1.0, 10.0)["l2"].item() == pytest.approx(3 * 16 * 0.01 / 16)


def test_refiner_loss_zero_and_errors():
    g = torch.Generator().manual_seed(3)
    I = torch.rand(2, 3, 8, 8, generator=g)
    m = (torch.rand(2, 1, 8, 8, generator=g) < 0.3).float()
    assert refiner_loss(I, I, m)["total"].item() == 0.0
    with pytest.raises(ValueError):
        refiner_loss(I, I, m, A_min=0.0)
    with pytest.raises(ValueError):
        refiner_loss(I, I[:, :, :4], m)


def test_default_weights_and_protocol():
    import inspect

    sig = inspect.signature(refiner_loss)
    assert sig.parameters["lambda_ref"].default == 200.0 and sig.parameters["A_min"].default == 10.0
    p = REFINER_PROTOCOL
    assert p.epochs == 1000 and p.batch_size == 32 and p.lr == 1e-4 and p.schedule == "staged"
    assert p.lr_at(0.0) == pytest.approx(1e-5) and p.lr_at(0.05) == pytest.approx(1e-4)
    assert p.lr_at(0.5) == pytest.approx(5e-5) and p.lr_at(1.0) == pytest.approx(2e-5)


# ---------------------------------------------------------------- network


def test_correction_bounds_and_shape():
    torch.manual_seed(4)
    net = MGHNet(SMALL).eval()
    inp = torch.empty(2, 7, 64, 64).uniform_(-10, 10)
    r = predict_correction(inp, net)
    assert r.shape == (2, 3, 64, 64) and r.abs().max() < 1
    x, y, m = _rand(np.random.default_rng(5), 64, 64)
    r_np = predict_correction(build_input(x, y, m), net)
    assert r_np.shape == (64, 64, 3)
    assert np.array_equal(r_np, predict_correction(build_input(x, y, m), net))


def test_zero_init_refiner_is_plain_composition():
    net = MGHNet(RefinerConfig(encoder_widths=(8, 16), decoder_channels=(8, 8, 8)))
    g = torch.Generator().manual_seed(6)
    x, y = torch.rand(1, 3, 32, 32, generator=g), torch.rand(1, 3, 32, 32, generator=g)
    m = (torch.rand(1, 1, 32, 32, generator=g) < 0.3).float()
    assert torch.equal(refine(x, y, m, net), refine(x, y, m, None))


def test_variants_are_distinct_graphs():
    inp = torch.rand(1, 7, 32, 32, generator=torch.Generator().manual_seed(7))
    outs = {}
    for v in RESBLOCK_VARIANTS:
        torch.manual_seed(8)
        net = MGHNet(RefinerConfig(**{**SMALL.__dict__, "resblock_variant": v})).eval()
        outs[v] = predict_correction(inp, net)
        has_bn = any(isinstance(mod, torch.nn.BatchNorm2d) for mod in net.modules())
        has_relu = any(isinstance(mod, torch.nn.ReLU) for mod in net.modules())
        assert has_bn == (v != "designed") and has_relu == (v == "classic")
    assert (outs["designed"] - outs["classic"]).abs().max() > 0
    assert (outs["designed"] - outs["with_bn"]).abs().max() > 0


@pytest.mark.parametrize(
    "bad",
    [dict(resblock_variant="plain"), dict(guidance="mask"), dict(upscale=(4, 4)), dict(decoder_channels=(8, 8))],
)
def test_config_validation(bad):
    with pytest.raises(ValueError):
        RefinerConfig(**{**SMALL.__dict__, **bad}).validate()


def test_input_checks():
    net = MGHNet(SMALL)
    with pytest.raises(ValueError):
        net(torch.zeros(1, 6, 32, 32))
    with pytest.raises(ValueError):
        net(torch.zeros(1, 7, 36, 36))


def test_full_scale_ladder():
    cfg = RefinerConfig.full_scale()
    cfg.validate()
    assert cfg.upscale == (4, 4, 2) and cfg.downsampling == 32
    assert cfg.decoder_channels == (256, 128, 64, 32)


def test_gradient_matches_finite_differences():
    torch.manual_seed(9)
    net = MGHNet(TINY).double()
    params = list(net.parameters())
    assert sum(p.numel() for p in params) <= 5000
    g = torch.Generator().manual_seed(10)
    x0 = 0.25 + 0.5 * torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    y0 = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    gt = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    m = (torch.rand(2, 1, 8, 8, generator=g) < 0.4).double()
    null = NullPerceptual()

    def loss():
        r = 0.2 * net(build_input(x0, y0, m))  # keeps the composition away from the clamp
        return refiner_loss(compose(x0, r, y0, m), gt, m, 200.0, 10.0, null)["total"]

    assert finite_difference_check(loss, params) < 1e-4


# ---------------------------------------------------------------- training


def test_training_is_seeded(tiny_triples):
    train = [t for t in tiny_triples if t.split == "train"]
    torch.manual_seed(0)
    codec = Codec(CodecConfig(width=8, depth=1)).eval()
    sur = make_surrogates(train, codec)
    assert np.mean([not np.array_equal(s, t.gt) for s, t in zip(sur, train)]) > 0.99
    cfg = RefinerConfig(encoder_widths=(8, 16), decoder_channels=(8, 8, 8))
    proto = TrainProtocol(epochs=2, batch_size=4, lr=1e-3, schedule="staged")
    a, la = train_refiner(train, codec, cfg, proto, seed=2)
    b, lb = train_refiner(train, codec, cfg, proto, seed=2)
    assert la == lb and all(np.isfinite(la))
    for u, v in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(u, v)
    with pytest.raises(ValueError):
        train_refiner(train, None, cfg, proto)
    with pytest.raises(ValueError):
        train_refiner([], codec, cfg, proto)
