"""Time-conditioned latent denoiser that predicts the clean latent, and its training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import Codec
from .dataset import PatchTriple, flip
from .layers import WindowTransformerBlock, timestep_embedding
from .schedule import NoiseSchedule, q_sample_batch
from .training import DIFFUSION_PROTOCOL, DivergenceError, TrainProtocol, seed_everything

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    base_channels: int = 32
    depth: int = 2  # resolution levels
    window_size: int = 4
    time_embedding_dim: int = 64
    heads: int = 2
    conditioning: str = "concat"

    def validate(self, latent_side: int | None = None) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.conditioning != "concat":
            raise ValueError("only channel-concatenation conditioning is supported")
        if latent_side is not None:
            bottom = latent_side // 2 ** (self.depth - 1)
            if latent_side % 2 ** (self.depth - 1) or bottom % self.window_size:
                raise ValueError(f"window {self.window_size} does not divide the {bottom}-pixel bottleneck")


@dataclass
class DiffusionLossParts:
    latent_l2: torch.Tensor
    perceptual: torch.Tensor
    lambda_diff: float
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {"latent_l2": float(self.latent_l2), "perceptual": float(self.perceptual), "total": float(self.total)}


class TimeResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(math.gcd(8, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(math.gcd(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Denoiser(nn.Module):
    """U-Net over latents with window attention at the coarsest level.

    Input is ``concat(x_t, y0_latent)``; the output is the clean-latent
    prediction itself. A skip from ``y0_latent`` is deliberately absent: inside
    the gaps the degraded latent sits far from the target, and adding it
    measurably slowed learning.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c, tdim = cfg.base_channels, cfg.time_embedding_dim
        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.inp = nn.Conv2d(2 * cfg.latent_channels, c, 3, padding=1)
        widths = [c * min(2**i, 4) for i in range(cfg.depth)]
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        cin = c
        for i, w in enumerate(widths):
            self.down_blocks.append(TimeResBlock(cin, w, tdim))
            cin = w
            if i < cfg.depth - 1:
                self.downsamplers.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
        self.mid = TimeResBlock(cin, cin, tdim)
        self.attn = nn.ModuleList(
            [
                WindowTransformerBlock(cin, cfg.window_size, cfg.heads, shift=0),
                WindowTransformerBlock(cin, cfg.window_size, cfg.heads, shift=cfg.window_size // 2),
            ]
        )
        self.up_blocks = nn.ModuleList()
        for i in range(cfg.depth - 2, -1, -1):
            self.up_blocks.append(TimeResBlock(cin + widths[i], widths[i], tdim))
            cin = widths[i]
        self.out_norm = nn.GroupNorm(math.gcd(8, cin), cin)
        self.out = nn.Conv2d(cin, cfg.latent_channels, 3, padding=1)

    def forward(self, x_t: torch.Tensor, y0: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x_t.shape != y0.shape:
            raise ValueError(f"x_t {tuple(x_t.shape)} and y0 {tuple(y0.shape)} differ")
        if t.dim() == 0:
            t = t.expand(x_t.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_embedding_dim).to(x_t.dtype))
        h = self.inp(torch.cat([x_t, y0], dim=1))
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, temb)
            if i < len(self.downsamplers):
                skips.append(h)
                h = self.downsamplers[i](h)
        h = self.mid(h, temb)
        for blk in self.attn:
            h = blk(h)
        for block in self.up_blocks:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
        return self.out(F.silu(self.out_norm(h)))


def predict_x0(x_t: torch.Tensor, y0_latent: torch.Tensor, t: int, model: Denoiser, T: int | None = None) -> torch.Tensor:
    """Clean-latent prediction for a batch or a single (C, h, w) latent."""
    if x_t.shape != y0_latent.shape:
        raise ValueError("x_t and y0_latent must share a shape")
    if t < 1 or (T is not None and t > T):
        raise ValueError(f"timestep {t} out of range")
    single = x_t.dim() == 3
    if single:
        x_t, y0_latent = x_t[None], y0_latent[None]
    with torch.no_grad():
        out = model(x_t, y0_latent, torch.full((x_t.shape[0],), t, dtype=torch.long))
    return out[0] if single else out


def diffusion_loss(
    z0_hat: torch.Tensor,
    z0: torch.Tensor,
    x0_hat: torch.Tensor,
    x0: torch.Tensor,
    lambda_diff: float = 10.0,
    perceptual: nn.Module | None = None,
) -> DiffusionLossParts:
    """Latent squared error (summed per example, averaged over the batch) plus weighted perceptual term."""
    if z0_hat.shape != z0.shape or x0_hat.shape != x0.shape:
        raise ValueError("paired tensors must share shapes")
    if lambda_diff < 0:
        raise ValueError("lambda_diff must be nonnegative")
    diff = (z0_hat - z0).reshape(z0.shape[0], -1) if z0.dim() > 1 else (z0_hat - z0)[None]
    latent_l2 = diff.pow(2).sum(dim=1).mean()
    if not torch.isfinite(latent_l2):
        raise ValueError("non-finite latent inputs")
    percept = perceptual(x0_hat, x0) if perceptual is not None else latent_l2.new_zeros(())
    return DiffusionLossParts(latent_l2, percept, lambda_diff, latent_l2 + lambda_diff * percept)


@torch.no_grad()
def _encode_stack(codec: Codec, imgs: np.ndarray, chunk: int = 128) -> torch.Tensor:
    x = torch.as_tensor(imgs, dtype=torch.float32).permute(0, 3, 1, 2)
    return torch.cat([codec.encode_t(x[i : i + chunk]) for i in range(0, len(x), chunk)])


def train_denoiser(
    train_set: Sequence[PatchTriple],
    codec: Codec,
    sched: NoiseSchedule,
    cfg: DenoiserConfig = DenoiserConfig(),
    protocol: TrainProtocol = DIFFUSION_PROTOCOL,
    seed: int = 0,
    lambda_diff: float = 10.0,
    perceptual: nn.Module | None = None,
) -> tuple[Denoiser, list[float]]:
    """Fit the denoiser on (gt, slc_off) latent pairs with random flips and uniform t."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if codec is None:
        raise ValueError("a trained codec is required")
    seed_everything(seed)
    model = Denoiser(cfg)
    # latents of the four flip variants, computed once with the frozen codec
    variants = []
    for h in (False, True):
        for v in (False, True):
            flipped = [flip(tr, h, v) for tr in train_set]
            gt = np.stack([tr.gt for tr in flipped])
            variants.append(
                (
                    _encode_stack(codec, gt),
                    _encode_stack(codec, np.stack([tr.slc_off for tr in flipped])),
                    torch.as_tensor(gt, dtype=torch.float32).permute(0, 3, 1, 2),
                )
            )
    for p in codec.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(model.parameters(), lr=protocol.lr, weight_decay=protocol.weight_decay)
    rng = np.random.default_rng([seed, 0xD1FF])
    n = len(train_set)
    steps_per_epoch = int(np.ceil(n / protocol.batch_size))
    total = max(1, protocol.epochs * steps_per_epoch)
    losses: list[float] = []
    model.train()
    step = 0
    for epoch in range(protocol.epochs):
        perm = rng.permutation(n)
        for i in range(0, n, protocol.batch_size):
            idx = perm[i : i + protocol.batch_size]
            flip_id = rng.integers(0, 4, size=len(idx))
            z0 = torch.stack([variants[f][0][j] for f, j in zip(flip_id, idx)])
            y0 = torch.stack([variants[f][1][j] for f, j in zip(flip_id, idx)])
            x0 = torch.stack([variants[f][2][j] for f, j in zip(flip_id, idx)])
            t = torch.as_tensor(rng.integers(1, sched.T + 1, size=len(idx)), dtype=torch.long)
            noise = torch.as_tensor(rng.standard_normal(z0.shape), dtype=torch.float32)
            x_t = q_sample_batch(z0, y0, t, sched, noise)
            for g in opt.param_groups:
                g["lr"] = protocol.lr_at(step / total)
            z0_hat = model(x_t, y0, t)
            x0_hat = codec.decode_t(z0_hat, clamp=False) if perceptual is not None else x0
            parts = diffusion_loss(z0_hat, z0, x0_hat, x0, lambda_diff, perceptual)
            if not torch.isfinite(parts.total):
                raise DivergenceError(f"denoiser loss became {parts.total.item()} at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            parts.total.backward()
            opt.step()
            losses.append(parts.total.item())
            step += 1
        log.info("denoiser epoch %d loss %.5f", epoch + 1, float(np.mean(losses[-steps_per_epoch:])))
    model.eval()
    return model, losses
