"""Small building blocks shared by the denoiser and the harmonization network."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 1000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (N, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None] * 100.0
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping square windows.

    With ``shift > 0`` the feature map is cyclically rolled before
    partitioning so that neighbouring windows exchange information.
    """

    def __init__(self, channels: int, window: int, heads: int = 2, shift: int = 0):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.window, self.heads, self.shift = window, heads, shift
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        ws = self.window
        if h % ws or w % ws:
            raise ValueError(f"window {ws} does not divide feature map {h}x{w}")
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(2, 3))
        # (n, c, h, w) -> (n * windows, ws * ws, c)
        t = x.view(n, c, h // ws, ws, w // ws, ws).permute(0, 2, 4, 3, 5, 1).reshape(-1, ws * ws, c)
        q, k, v = self.qkv(t).chunk(3, dim=-1)
        split = lambda z: z.view(z.shape[0], z.shape[1], self.heads, c // self.heads).transpose(1, 2)  # noqa: E731
        q, k, v = split(q), split(k), split(v)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(c // self.heads)
        out = (att.softmax(dim=-1) @ v).transpose(1, 2).reshape(t.shape)
        out = self.proj(out)
        out = out.view(n, h // ws, w // ws, ws, ws, c).permute(0, 5, 1, 3, 2, 4).reshape(n, c, h, w)
        if self.shift:
            out = torch.roll(out, shifts=(self.shift, self.shift), dims=(2, 3))
        return out


class WindowTransformerBlock(nn.Module):
    def __init__(self, channels: int, window: int, heads: int = 2, shift: int = 0, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm1 = ChannelNorm(channels)
        self.attn = WindowAttention(channels, window, heads, shift)
        self.norm2 = ChannelNorm(channels)
        hidden = int(channels * mlp_ratio)
        self.mlp = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.GELU(), nn.Conv2d(hidden, channels, 1))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r), channel-major as in sub-pixel convolution."""
    n, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"{c} channels not divisible by r^2 = {r * r}")
    co = c // (r * r)
    return x.view(n, co, r, r, h, w).permute(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)
