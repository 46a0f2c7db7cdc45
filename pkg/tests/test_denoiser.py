import numpy as np
import pytest
import torch

from diffgf.codec import Codec, CodecConfig
from diffgf.denoiser import Denoiser, DenoiserConfig, diffusion_loss, predict_x0, train_denoiser
from diffgf.metrics import NullPerceptual, RandomFeaturePerceptual
from diffgf.schedule import build_schedule, q_sample_batch
from diffgf.training import DIFFUSION_PROTOCOL, TrainProtocol

from oracles import finite_difference_check

TINY = DenoiserConfig(latent_channels=2, base_channels=4, depth=2, window_size=4, time_embedding_dim=4, heads=1)


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return Denoiser(DenoiserConfig()).eval()


def test_shape_and_purity(net):
    g = torch.Generator().manual_seed(1)
    x, y = torch.randn(4, 16, 16, generator=g), torch.randn(4, 16, 16, generator=g)
    out = predict_x0(x, y, 2, net, T=4)
    assert out.shape == x.shape
    assert torch.equal(out, predict_x0(x, y, 2, net, T=4))


def test_time_conditioning_is_live(net):
    g = torch.Generator().manual_seed(2)
    x, y = torch.randn(1, 4, 16, 16, generator=g), torch.randn(1, 4, 16, 16, generator=g)
    assert (predict_x0(x, y, 1, net) - predict_x0(x, y, 4, net)).norm() > 0


def test_extreme_inputs_stay_finite(net):
    x = torch.full((2, 4, 16, 16), 10.0)
    assert torch.isfinite(predict_x0(x, -x, 3, net)).all()


def test_bad_inputs(net):
    x = torch.zeros(1, 4, 16, 16)
    with pytest.raises(ValueError):
        predict_x0(x, torch.zeros(1, 4, 8, 8), 1, net)
    with pytest.raises(ValueError):
        predict_x0(x, x, 0, net)
    with pytest.raises(ValueError):
        predict_x0(x, x, 5, net, T=4)
    with pytest.raises(ValueError):
        DenoiserConfig(window_size=3).validate(latent_side=16)
    with pytest.raises(ValueError):
        DenoiserConfig(depth=0).validate()


def test_loss_hand_arithmetic():
    z0 = torch.tensor([0.3, 0.4])
    parts = diffusion_loss(z0 + torch.tensor([0.1, -0.2]), z0, torch.zeros(3), torch.zeros(3), 10.0, None)
    assert abs(parts.latent_l2.item() - 0.05) < 1e-7
    assert abs(parts.total.item() - 0.05) < 1e-7


def test_loss_zero_at_optimum_and_weighting():
    g = torch.Generator().manual_seed(3)
    z, x = torch.randn(2, 4, 8, 8, generator=g), torch.rand(2, 3, 32, 32, generator=g)
    p = RandomFeaturePerceptual()
    assert diffusion_loss(z, z, x, x, 10.0, p).total.item() == pytest.approx(0.0, abs=1e-6)
    parts = diffusion_loss(z + 0.1, z, x.flip(-1), x, 10.0, p)
    assert parts.lambda_diff == 10.0 and parts.perceptual.item() > 0
    assert parts.total.item() == pytest.approx(parts.latent_l2.item() + 10.0 * parts.perceptual.item(), rel=1e-6)
    assert set(parts.as_floats()) == {"latent_l2", "perceptual", "total"}


def test_loss_errors():
    z = torch.zeros(1, 4)
    with pytest.raises(ValueError):
        diffusion_loss(z, torch.zeros(1, 5), z, z)
    with pytest.raises(ValueError):
        diffusion_loss(z, z, z, z, lambda_diff=-1.0)
    with pytest.raises(ValueError):
        diffusion_loss(torch.full((1, 4), float("nan")), z, z, z)


def test_full_protocol_defaults():
    p = DIFFUSION_PROTOCOL
    assert p.batch_size == 8 and p.epochs == 200 and p.lr == 1e-4
    assert p.lr_at(0.1) == 1e-4 and p.lr_at(1.0) == pytest.approx(5e-5)


def _tiny_batch(seed):
    g = torch.Generator().manual_seed(seed)
    z0 = torch.randn(2, 2, 8, 8, generator=g, dtype=torch.float64)
    y0 = torch.randn(2, 2, 8, 8, generator=g, dtype=torch.float64)
    noise = torch.randn(2, 2, 8, 8, generator=g, dtype=torch.float64)
    t = torch.tensor([1, 3])
    return z0, y0, q_sample_batch(z0, y0, t, build_schedule(4), noise), t


def test_gradient_matches_finite_differences():
    torch.manual_seed(4)
    model = Denoiser(TINY).double()
    params = [p for p in model.parameters()]
    assert sum(p.numel() for p in params) <= 5000
    z0, y0, x_t, t = _tiny_batch(5)
    x = torch.zeros(2, 3, 4, 4, dtype=torch.float64)
    null = NullPerceptual()
    err = finite_difference_check(lambda: diffusion_loss(model(x_t, y0, t), z0, x, x, 10.0, null).total, params)
    assert err < 1e-4


def test_small_step_descends():
    torch.manual_seed(6)
    model = Denoiser(TINY).double()
    z0, y0, x_t, t = _tiny_batch(7)
    loss = lambda: diffusion_loss(model(x_t, y0, t), z0, z0, z0).total  # noqa: E731
    before = loss()
    before.backward()
    with torch.no_grad():
        for p in model.parameters():
            p -= 1e-4 * p.grad
    assert loss().item() <= before.item()


def test_training_is_seeded_and_checks_inputs(tiny_triples):
    train = [t for t in tiny_triples if t.split == "train"]
    torch.manual_seed(0)
    codec = Codec(CodecConfig(width=8, depth=1, latent_channels=2)).eval()
    sched = build_schedule(4)
    proto = TrainProtocol(epochs=2, batch_size=4, lr=1e-3)
    cfg = DenoiserConfig(latent_channels=2, base_channels=8, time_embedding_dim=16)
    a, la = train_denoiser(train, codec, sched, cfg, proto, seed=3)
    b, lb = train_denoiser(train, codec, sched, cfg, proto, seed=3)
    assert la == lb and len(la) == 2 * int(np.ceil(len(train) / 4))
    assert all(np.isfinite(la))
    for u, v in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(u, v)
    untrained, none = train_denoiser(train, codec, sched, cfg, TrainProtocol(epochs=0), seed=3)
    assert none == []
    with pytest.raises(ValueError):
        train_denoiser([], codec, sched, cfg, proto)
    with pytest.raises(ValueError):
        train_denoiser(train, None, sched, cfg, proto)
