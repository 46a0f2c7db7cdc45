import numpy as np
import pytest
import torch

from diffgf.codec import Codec, CodecConfig, decode, encode, fit_latent_scale, roundtrip, roundtrip_batch, train_codec

SMALL = CodecConfig(width=8, depth=1)


@pytest.fixture(scope="module")
def codec():
    torch.manual_seed(0)
    return Codec(CodecConfig()).eval()


def test_latent_shape_and_determinism(codec):
    x = np.random.default_rng(0).random((64, 64, 3))
    z = encode(x, codec)
    assert z.shape == (16, 16, 4)
    assert np.array_equal(z, encode(x, codec))
    assert np.isfinite(encode(np.zeros((64, 64, 3)), codec)).all()


def test_decode_is_clamped_and_shapes_round_trip(codec):
    z = 50 * np.random.default_rng(1).standard_normal((16, 16, 4))
    out = decode(z, codec)
    assert out.shape == (64, 64, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.array_equal(out, decode(z, codec))
    x = np.random.default_rng(2).random((32, 48, 3))
    assert roundtrip(x, codec).shape == x.shape


def test_bad_shapes_rejected(codec):
    with pytest.raises(ValueError):
        encode(np.zeros((30, 32, 3)), codec)
    with pytest.raises(ValueError):
        decode(np.zeros((8, 8, 3)), codec)


@pytest.mark.parametrize("bad", [dict(downsample_factor=3), dict(downsample_factor=0), dict(gapped_fraction=1.5)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        CodecConfig(**bad).validate()


def test_batch_round_trip_matches_single(codec):
    xs = np.random.default_rng(3).random((5, 32, 32, 3))
    batch = roundtrip_batch(xs, codec, chunk=2)
    for x, b in zip(xs, batch):
        np.testing.assert_allclose(b, roundtrip(x, codec), atol=1e-6)


def test_latent_scale_leaves_round_trip_unchanged():
    torch.manual_seed(4)
    c = Codec(SMALL).eval()
    x = torch.rand(6, 3, 32, 32)
    before = c(x)
    scale = fit_latent_scale(c, x)
    assert scale > 0
    torch.testing.assert_close(c(x), before, rtol=1e-5, atol=1e-6)
    # scaled latents have unit spread on the fitting data
    with torch.no_grad():
        assert abs(float(c.encode_t(x).double().std()) - 1.0) < 1e-5


def test_empty_training_set():
    with pytest.raises(ValueError):
        train_codec([], SMALL, epochs=1)


def test_training_reduces_error_and_is_seeded(tiny_triples):
    train = [t for t in tiny_triples if t.split == "train"]
    test = np.stack([t.gt for t in tiny_triples if t.split == "test"])
    init, losses0 = train_codec(train, SMALL, epochs=0, seed=5)
    assert losses0 == []
    trained, losses = train_codec(train, SMALL, epochs=6, seed=5)
    err = lambda c: np.sqrt(np.mean((roundtrip_batch(test, c) - test) ** 2))  # noqa: E731
    assert 0 < err(trained) < err(init)
    again, losses2 = train_codec(train, SMALL, epochs=6, seed=5)
    assert losses == losses2
    for a, b in zip(trained.state_dict().values(), again.state_dict().values()):
        assert torch.equal(a, b)
    assert all(not p.requires_grad for p in trained.parameters())
