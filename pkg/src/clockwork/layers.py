"""Parameterized building blocks shared by the UNet and the adaptors."""

from __future__ import annotations

import math

import torch
from torch import nn

from . import numerics as nx
from .errors import ConfigurationError


def _fan_in_normal(shape: tuple[int, ...], fan_in: int, gen: torch.Generator) -> nn.Parameter:
    std = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.randn(shape, generator=gen) * std)


class Conv2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, gen: torch.Generator,
                 stride: int = 1, padding: int | None = None, zero_init: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        if zero_init:
            self.weight = nn.Parameter(torch.zeros(c_out, c_in, kernel, kernel))
        else:
            self.weight = _fan_in_normal((c_out, c_in, kernel, kernel), c_in * kernel * kernel, gen)
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(nn.Module):
    """Stride-2, 4x4 transposed conv: doubles the spatial extent."""

    def __init__(self, c_in: int, c_out: int, gen: torch.Generator, zero_init: bool = False):
        super().__init__()
        if zero_init:
            self.weight = nn.Parameter(torch.zeros(c_in, c_out, 4, 4))
        else:
            # each output pixel sees K^2/stride^2 = 4 taps per input channel
            self.weight = _fan_in_normal((c_in, c_out, 4, 4), c_in * 4, gen)
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.conv_transpose2d(x, self.weight, self.bias, stride=2, padding=1)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, gen: torch.Generator, zero_init: bool = False):
        super().__init__()
        if zero_init:
            self.weight = nn.Parameter(torch.zeros(d_out, d_in))
        else:
            self.weight = _fan_in_normal((d_out, d_in), d_in, gen)
        self.bias = nn.Parameter(torch.zeros(d_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.linear(x, self.weight, self.bias)


class GroupNorm(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        if channels % groups:
            raise ConfigurationError(f"{channels} channels not divisible by {groups} groups")
        self.groups = groups
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.group_norm(x, self.groups, self.weight, self.bias)


def sinusoidal_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype = torch.float32,
                         max_period: float = 10000.0) -> torch.Tensor:
    """(N,) timesteps -> (N, dim) sin/cos features."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1).to(dtype)


class ResBlock(nn.Module):
    """GN-SiLU-conv, additive embedding, GN-SiLU-conv, plus a (1x1-projected) shortcut."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int, groups: int, gen: torch.Generator):
        super().__init__()
        self.norm1 = GroupNorm(c_in, groups)
        self.conv1 = Conv2d(c_in, c_out, 3, gen)
        self.emb_proj = Linear(emb_dim, c_out, gen)
        self.norm2 = GroupNorm(c_out, groups)
        self.conv2 = Conv2d(c_out, c_out, 3, gen)
        self.shortcut = Conv2d(c_in, c_out, 1, gen) if c_in != c_out else None

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(nx.silu(self.norm1(x)))
        h = h + self.emb_proj(nx.silu(emb))[:, :, None, None]
        h = self.conv2(nx.silu(self.norm2(h)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return skip + h


class AttentionBlock(nn.Module):
    """Single-head spatial self-attention with a residual connection."""

    def __init__(self, channels: int, groups: int, gen: torch.Generator):
        super().__init__()
        self.norm = GroupNorm(channels, groups)
        self.qkv = Conv2d(channels, 3 * channels, 1, gen)
        self.proj = Conv2d(channels, channels, 1, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        qkv = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).transpose(2, 3)
        out = nx.attention(qkv[:, 0], qkv[:, 1], qkv[:, 2])
        out = out.transpose(1, 2).reshape(n, c, h, w)
        return x + self.proj(out)
