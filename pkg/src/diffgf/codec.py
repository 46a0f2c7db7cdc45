"""Lossy convolutional autoencoder mapping pixel patches to latent grids.

The codec is trained once on complete patches and then frozen: the diffusion
stage runs in its latent space, and its encode/decode round trip supplies the
degraded surrogates the harmonization network learns to correct.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import PatchTriple
from .training import DivergenceError, seed_everything, to_nchw, to_hwc

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CodecConfig:
    downsample_factor: int = 4
    latent_channels: int = 4
    width: int = 64  # channels of the latent-resolution trunk
    depth: int = 2  # pre-activation residual blocks on each side
    lr: float = 2e-3
    batch_size: int = 4
    gapped_fraction: float = 0.5  # share of training samples drawn from the gapped input instead of gt

    def validate(self) -> None:
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError("downsample_factor must be a positive power of two")
        if self.latent_channels < 1 or self.width < 1 or self.depth < 0:
            raise ValueError("invalid codec widths")
        if not 0.0 <= self.gapped_fraction <= 1.0:
            raise ValueError("gapped_fraction must lie in [0, 1]")


class _Res(nn.Module):
    """Pre-activation block; the identity path keeps the codec close to linear at init."""

    def __init__(self, c):
        super().__init__()
        self.c1 = nn.Conv2d(c, c, 3, padding=1)
        self.c2 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return x + self.c2(F.silu(self.c1(F.silu(x))))


class Codec(nn.Module):
    """Patchify encoder (stride-f conv) and sub-pixel decoder; the trunk runs at latent resolution."""

    def __init__(self, cfg: CodecConfig = CodecConfig()):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        f, w = cfg.downsample_factor, cfg.width
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w, f, stride=f),
            *[_Res(w) for _ in range(cfg.depth)],
            nn.Conv2d(w, cfg.latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(cfg.latent_channels, w, 3, padding=1),
            *[_Res(w) for _ in range(cfg.depth)],
            nn.Conv2d(w, 3 * f * f, 3, padding=1),
            nn.PixelShuffle(f),
        )
        # latents are divided by this so the diffusion stage sees roughly unit variance
        self.register_buffer("latent_scale", torch.ones(()))

    def check_input(self, x: torch.Tensor) -> None:
        f = self.cfg.downsample_factor
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ValueError(f"patch side {tuple(x.shape[-2:])} not divisible by downsample factor {f}")

    def encode_t(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self.encoder(x - 0.5) / self.latent_scale

    def decode_t(self, z: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        if z.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"latent has {z.shape[1]} channels, codec expects {self.cfg.latent_channels}")
        out = self.decoder(z * self.latent_scale) + 0.5
        return out.clamp(0.0, 1.0) if clamp else out

    def forward(self, x):
        return self.decode_t(self.encode_t(x), clamp=False)


@torch.no_grad()
def encode(img: np.ndarray, codec: Codec) -> np.ndarray:
    """(H, W, 3) patch -> (H/f, W/f, c) latent."""
    codec.eval()
    return to_hwc(codec.encode_t(to_nchw(img)))


@torch.no_grad()
def decode(z: np.ndarray, codec: Codec) -> np.ndarray:
    codec.eval()
    return to_hwc(codec.decode_t(to_nchw(z)))


@torch.no_grad()
def roundtrip(img: np.ndarray, codec: Codec) -> np.ndarray:
    codec.eval()
    return to_hwc(codec.decode_t(codec.encode_t(to_nchw(img))))


@torch.no_grad()
def roundtrip_batch(imgs: np.ndarray, codec: Codec, chunk: int = 64) -> np.ndarray:
    """Round trip of an (N, H, W, 3) stack."""
    codec.eval()
    out = []
    for i in range(0, len(imgs), chunk):
        x = torch.as_tensor(imgs[i : i + chunk], dtype=torch.float32).permute(0, 3, 1, 2)
        out.append(codec.decode_t(codec.encode_t(x)).permute(0, 2, 3, 1).numpy())
    return np.concatenate(out).astype(np.float64)


def train_codec(
    train_set: Sequence[PatchTriple],
    cfg: CodecConfig = CodecConfig(),
    epochs: int = 30,
    seed: int = 0,
    log_every: int = 0,
) -> tuple[Codec, list[float]]:
    """Fit the codec with a pixel MSE loss.

    Each sample is the ground-truth patch or, with probability
    ``cfg.gapped_fraction``, its gapped counterpart, so that stripe gaps stay
    local in latent space instead of being extrapolated wildly. Returns the
    frozen codec and the per-step loss trajectory.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    seed_everything(seed)
    codec = Codec(cfg)
    data = torch.as_tensor(np.stack([t.gt for t in train_set]), dtype=torch.float32).permute(0, 3, 1, 2).contiguous()
    gapped = torch.as_tensor(np.stack([t.slc_off for t in train_set]), dtype=torch.float32).permute(0, 3, 1, 2).contiguous()
    opt = torch.optim.AdamW(codec.parameters(), lr=cfg.lr, weight_decay=0.0)
    total = max(1, epochs * int(np.ceil(len(data) / cfg.batch_size)))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + np.cos(np.pi * min(s, total) / total)) * 0.9 + 0.1)
    rng = np.random.default_rng([seed, 0xC0DEC])
    losses: list[float] = []
    codec.train()
    for epoch in range(epochs):
        perm = rng.permutation(len(data))
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            use_gap = torch.as_tensor(rng.random(len(idx)) < cfg.gapped_fraction)[:, None, None, None]
            x = torch.where(use_gap, gapped[idx], data[idx])
            loss = F.mse_loss(codec(x), x)
            if not torch.isfinite(loss):
                raise DivergenceError(f"codec loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        if log_every and (epoch + 1) % log_every == 0:
            log.info("codec epoch %d loss %.5f", epoch + 1, np.mean(losses[-len(perm) // cfg.batch_size :]))
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    fit_latent_scale(codec, data)
    return codec, losses


@torch.no_grad()
def fit_latent_scale(codec: Codec, data: torch.Tensor, chunk: int = 128) -> float:
    """Set ``latent_scale`` to the std of the raw training latents; decode(encode(x)) is unchanged."""
    codec.latent_scale.fill_(1.0)
    z = torch.cat([codec.encode_t(data[i : i + chunk]) for i in range(0, len(data), chunk)])
    std = float(z.double().std())
    codec.latent_scale.fill_(std if std > 0 else 1.0)
    return float(codec.latent_scale)
