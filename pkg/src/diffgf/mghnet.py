"""Mask-guided harmonization: a pixel-space correction of the diffusion output.

The network sees the diffusion output, the known-region residual
``delta = (y0 - x0_hat) * (1 - m)`` and the mask (7 channels), predicts a
tanh-bounded correction, and the corrected pixels replace only the masked
part of ``y0`` so known pixels pass through untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .codec import Codec, roundtrip_batch
from .dataset import PatchTriple
from .layers import ChannelNorm, WindowTransformerBlock, pixel_shuffle
from .training import REFINER_PROTOCOL, DivergenceError, TrainProtocol, seed_everything

log = logging.getLogger(__name__)

RESBLOCK_VARIANTS = ("designed", "with_bn", "classic")
GUIDANCE_MODES = ("delta", "y0")


@dataclass(frozen=True)
class RefinerConfig:
    patch_size: int = 4
    encoder_widths: tuple = (32, 64)
    window_size: int = 4
    heads: int = 2
    decoder_channels: tuple = (48, 24, 12)
    upscale: tuple = (4, 2)
    resblock_variant: str = "designed"
    guidance: str = "delta"
    zero_init_output: bool = True

    @property
    def downsampling(self) -> int:
        return self.patch_size * 2 ** (len(self.encoder_widths) - 1)

    def validate(self) -> None:
        if self.resblock_variant not in RESBLOCK_VARIANTS:
            raise ValueError(f"unknown resblock variant {self.resblock_variant!r}")
        if self.guidance not in GUIDANCE_MODES:
            raise ValueError(f"unknown guidance mode {self.guidance!r}")
        if int(np.prod(self.upscale)) != self.downsampling:
            raise ValueError(f"upscale factors {self.upscale} do not undo downsampling {self.downsampling}")
        if len(self.decoder_channels) != len(self.upscale) + 1:
            raise ValueError("decoder ladder needs one more entry than upscale factors")

    @classmethod
    def full_scale(cls) -> "RefinerConfig":
        """Layout used with 256-pixel patches: 32x downsampling, ladder 256-128-64-32."""
        return cls(
            patch_size=4,
            encoder_widths=(128, 256, 512, 1024),
            window_size=8,
            heads=4,
            decoder_channels=(256, 128, 64, 32),
            upscale=(4, 4, 2),
        )


@dataclass
class RefinerInput:
    x0_hat: np.ndarray
    delta: np.ndarray  # or y0 when guidance == "y0"
    mask: np.ndarray

    def stack(self) -> np.ndarray:
        """(H, W, 7) network input."""
        return np.concatenate([self.x0_hat, self.delta, self.mask[..., None].astype(self.x0_hat.dtype)], axis=-1)


def _is_torch(x) -> bool:
    return isinstance(x, torch.Tensor)


def _check_binary(m) -> None:
    vals = torch.unique(m) if _is_torch(m) else np.unique(m)
    if not all(float(v) in (0.0, 1.0) for v in vals):
        raise ValueError("mask must be binary")


def build_input(x0_hat, y0, m, guidance: str = "delta"):
    """Guided input for the refiner.

    numpy arrays (H, W, 3) / (H, W) return a :class:`RefinerInput`; torch
    tensors (N, 3, H, W) / (N, 1, H, W) return the (N, 7, H, W) stack.
    """
    if guidance not in GUIDANCE_MODES:
        raise ValueError(f"unknown guidance {guidance!r}")
    if _is_torch(x0_hat):
        if x0_hat.shape != y0.shape or m.shape[-2:] != x0_hat.shape[-2:]:
            raise ValueError("shape mismatch")
        guide = (y0 - x0_hat) * (1 - m) if guidance == "delta" else y0
        return torch.cat([x0_hat, guide, m], dim=1)
    x0_hat, y0, m = np.asarray(x0_hat), np.asarray(y0), np.asarray(m)
    if x0_hat.shape != y0.shape or m.shape != x0_hat.shape[:2]:
        raise ValueError(f"shape mismatch: {x0_hat.shape}, {y0.shape}, {m.shape}")
    _check_binary(m)
    known = (1 - m)[..., None].astype(x0_hat.dtype)
    guide = (y0 - x0_hat) * known if guidance == "delta" else y0.copy()
    return RefinerInput(x0_hat=x0_hat, delta=guide, mask=m.astype(np.uint8))


def compose(x0_hat, r_hat, y0, m):
    """Replace the masked pixels of ``y0`` by ``clamp(x0_hat + r_hat, 0, 1)``.

    Equivalent to ``(x0_hat + r_hat) * m + y0 * (1 - m)`` for binary ``m``,
    with the range clamp applied to masked pixels only; known pixels are
    copied from ``y0`` bit for bit.
    """
    if _is_torch(x0_hat):
        if x0_hat.shape != y0.shape or r_hat.shape != y0.shape:
            raise ValueError("shape mismatch")
        return torch.where(m.bool(), (x0_hat + r_hat).clamp(0.0, 1.0), y0)
    x0_hat, r_hat, y0, m = (np.asarray(a) for a in (x0_hat, r_hat, y0, m))
    if x0_hat.shape != y0.shape or r_hat.shape != y0.shape or m.shape != y0.shape[:2]:
        raise ValueError("shape mismatch")
    _check_binary(m)
    sel = m.astype(bool)[..., None] if y0.ndim == 3 else m.astype(bool)
    return np.where(sel, np.clip(x0_hat + r_hat, 0.0, 1.0), y0)


def refiner_loss(I_hat, I, m, lambda_ref: float = 200.0, A_min: float = 10.0, perceptual: nn.Module | None = None):
    """Foreground-normalized masked L2 plus perceptual term on (N, C, H, W) tensors.

    The squared error is summed over all masked elements of each example and
    divided by ``max(A_min, masked pixel count)``; the batch mean is returned.
    """
    if A_min <= 0:
        raise ValueError("A_min must be positive")
    if I_hat.shape != I.shape or m.shape[-2:] != I.shape[-2:]:
        raise ValueError("shape mismatch")
    if I.dim() == 3:
        I_hat, I, m = I_hat[None], I[None], m.reshape(1, 1, *m.shape[-2:])
    sq = ((I_hat * m - I * m) ** 2).flatten(1).sum(dim=1)
    area = m.flatten(1).sum(dim=1).clamp(min=A_min)
    l2 = (sq / area).mean()
    percept = perceptual(I_hat, I) if perceptual is not None else l2.new_zeros(())
    return {"l2": l2, "perceptual": percept, "total": lambda_ref * l2 + percept}


# ---------------------------------------------------------------- network


class ResBlock(nn.Module):
    """Decoder residual block in one of three forms.

    designed: conv-tanh-conv, identity skip, tanh output, no normalization.
    with_bn: the designed block with batch normalization after each conv.
    classic: conv-BN-ReLU-conv-BN, identity skip, ReLU output.
    """

    def __init__(self, channels: int, variant: str = "designed"):
        super().__init__()
        self.variant = variant
        bn = variant in ("with_bn", "classic")
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(channels) if bn else nn.Identity()
        self.bn2 = nn.BatchNorm2d(channels) if bn else nn.Identity()
        self.act = nn.ReLU() if variant == "classic" else nn.Tanh()

    def forward(self, x):
        h = self.act(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return self.act(x + h)


class PixelShuffleBlock(nn.Module):
    def __init__(self, cin: int, cout: int, r: int, act: nn.Module):
        super().__init__()
        self.r = r
        self.conv = nn.Conv2d(cin, cout * r * r, 3, padding=1)
        self.act = act

    def forward(self, x):
        return self.act(pixel_shuffle(self.conv(x), self.r))


class MGHNet(nn.Module):
    def __init__(self, cfg: RefinerConfig = RefinerConfig()):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.encoder_widths
        self.embed = nn.Sequential(nn.Conv2d(7, w[0], cfg.patch_size, stride=cfg.patch_size), ChannelNorm(w[0]))
        stages = []
        for i, c in enumerate(w):
            layers = []
            if i > 0:
                layers += [nn.Conv2d(w[i - 1], c, 2, stride=2), ChannelNorm(c)]
            layers += [
                WindowTransformerBlock(c, cfg.window_size, cfg.heads, shift=0),
                WindowTransformerBlock(c, cfg.window_size, cfg.heads, shift=cfg.window_size // 2),
            ]
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        act = lambda: nn.ReLU() if cfg.resblock_variant == "classic" else nn.Tanh()  # noqa: E731
        d = cfg.decoder_channels
        self.head = nn.Sequential(nn.Conv2d(w[-1], d[0], 3, padding=1), act(), ResBlock(d[0], cfg.resblock_variant))
        ups = []
        for i, r in enumerate(cfg.upscale):
            ups += [PixelShuffleBlock(d[i], d[i + 1], r, act()), ResBlock(d[i + 1], cfg.resblock_variant)]
        self.ups = nn.Sequential(*ups)
        self.final = nn.Conv2d(d[-1], 3, 3, padding=1)
        if cfg.zero_init_output:
            nn.init.zeros_(self.final.weight)
            nn.init.zeros_(self.final.bias)

    def forward(self, inp: torch.Tensor) -> torch.Tensor:
        """(N, 7, H, W) guided input -> (N, 3, H, W) correction in (-1, 1)."""
        if inp.shape[1] != 7:
            raise ValueError(f"expected 7 input channels, got {inp.shape[1]}")
        f = self.cfg.downsampling
        if inp.shape[-1] % f or inp.shape[-2] % f:
            raise ValueError(f"input side {tuple(inp.shape[-2:])} not divisible by {f}")
        h = self.embed(inp)
        for stage in self.stages:
            h = stage(h)
        h = self.ups(self.head(h))
        return torch.tanh(self.final(h))


def predict_correction(inp, model: MGHNet) -> np.ndarray | torch.Tensor:
    """Correction field for a :class:`RefinerInput` (returns (H, W, 3)) or an (N, 7, H, W) tensor."""
    model.eval()
    with torch.no_grad():
        if isinstance(inp, RefinerInput):
            x = torch.as_tensor(inp.stack(), dtype=torch.float32).permute(2, 0, 1)[None]
            return model(x)[0].permute(1, 2, 0).numpy().astype(np.float64)
        return model(inp)


def refine(x0_hat: torch.Tensor, y0: torch.Tensor, m: torch.Tensor, model: MGHNet | None) -> torch.Tensor:
    """Full refinement stage on NCHW tensors; ``model=None`` composes with a zero correction."""
    if model is None:
        return compose(x0_hat, torch.zeros_like(x0_hat), y0, m)
    r_hat = predict_correction(build_input(x0_hat, y0, m, model.cfg.guidance), model)
    return compose(x0_hat, r_hat, y0, m)


# ---------------------------------------------------------------- training


def _stacks(triples: Sequence[PatchTriple], surrogate: np.ndarray, k: int):
    rot = lambda a: np.ascontiguousarray(np.rot90(a, k=k, axes=(1, 2)))  # noqa: E731
    to_t = lambda a: torch.as_tensor(a, dtype=torch.float32).permute(0, 3, 1, 2).contiguous()  # noqa: E731
    return (
        to_t(rot(surrogate)),
        to_t(rot(np.stack([t.slc_off for t in triples]))),
        to_t(rot(np.stack([t.mask for t in triples])[..., None])),
        to_t(rot(np.stack([t.gt for t in triples]))),
    )


def make_surrogates(triples: Sequence[PatchTriple], codec: Codec) -> np.ndarray:
    """Codec round trips of the ground truth, standing in for diffusion outputs during training."""
    if codec is None:
        raise ValueError("a trained codec is required to build refiner surrogates")
    return roundtrip_batch(np.stack([t.gt for t in triples]), codec)


def train_refiner(
    train_set: Sequence[PatchTriple],
    codec: Codec,
    cfg: RefinerConfig = RefinerConfig(),
    protocol: TrainProtocol = REFINER_PROTOCOL,
    seed: int = 0,
    lambda_ref: float = 200.0,
    A_min: float = 10.0,
    perceptual: nn.Module | None = None,
) -> tuple[MGHNet, list[float]]:
    """Train on (roundtrip(gt), slc_off, mask) -> gt with random quarter-turn rotations."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    surrogate = make_surrogates(train_set, codec)
    seed_everything(seed)
    model = MGHNet(cfg)
    # rotation k applies to every member of a triple and its surrogate alike
    rotations = [_stacks(train_set, surrogate, k) for k in range(4)]
    opt = torch.optim.AdamW(model.parameters(), lr=protocol.lr, weight_decay=protocol.weight_decay)
    rng = np.random.default_rng([seed, 0x4E7])
    n = len(train_set)
    steps_per_epoch = int(np.ceil(n / protocol.batch_size))
    total = max(1, protocol.epochs * steps_per_epoch)
    losses: list[float] = []
    step = 0
    model.train()
    for epoch in range(protocol.epochs):
        perm = rng.permutation(n)
        for i in range(0, n, protocol.batch_size):
            idx = perm[i : i + protocol.batch_size]
            k = rng.integers(0, 4, size=len(idx))
            x0_hat, y0, m, gt = (torch.stack([rotations[kk][j][ii] for kk, ii in zip(k, idx)]) for j in range(4))
            for g in opt.param_groups:
                g["lr"] = protocol.lr_at(step / total)
            r_hat = model(build_input(x0_hat, y0, m, cfg.guidance))
            I_hat = compose(x0_hat, r_hat, y0, m)
            parts = refiner_loss(I_hat, gt, m, lambda_ref, A_min, perceptual)
            if not torch.isfinite(parts["total"]):
                raise DivergenceError(f"refiner loss became {parts['total'].item()} at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            parts["total"].backward()
            opt.step()
            losses.append(parts["total"].item())
            step += 1
        log.info("refiner epoch %d loss %.5f", epoch + 1, float(np.mean(losses[-steps_per_epoch:])))
    model.eval()
    return model, losses
