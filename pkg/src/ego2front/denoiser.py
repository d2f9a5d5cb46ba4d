"""Trainable noise-prediction network.

An encoder/decoder conv net with skip connections, sinusoidal timestep
embeddings added in every residual block, cross-attention on concept tokens
at the configured levels, and additive control-residual injection after
every down block and the mid block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .tensors import LatentTensor


@dataclass
class DenoiserSpec:
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    attention_levels: tuple[int, ...] = (1, 2)
    in_channels: int = 8
    out_channels: int = 4
    embed_dim: int = 128
    num_heads: int = 4

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_levels = tuple(self.attention_levels)
        levels = len(self.channel_multipliers)
        if levels < 1:
            raise ValueError("need at least one resolution level")
        for a in self.attention_levels:
            if not 0 <= a < levels:
                raise ValueError(f"attention level {a} outside 0..{levels - 1}")
        if self.in_channels < self.out_channels:
            raise ValueError("in_channels must cover the fused latent (>= out_channels)")

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of the (1-based) step index, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = t.to(torch.float32)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    groups = min(8, channels)
    while channels % groups:
        groups -= 1
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.time_proj(self.act(temb))[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class CrossAttentionBlock(nn.Module):
    """Spatial features attend over the concept token sequence."""

    def __init__(self, channels: int, embed_dim: int, num_heads: int):
        super().__init__()
        self.norm = _norm(channels)
        self.attn = nn.MultiheadAttention(
            channels, num_heads, kdim=embed_dim, vdim=embed_dim, batch_first=True
        )
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.norm(x).flatten(2).transpose(1, 2)  # (B, HW, C)
        attended, _ = self.attn(q, tokens, tokens, need_weights=False)
        return x + self.proj(attended).transpose(1, 2).reshape(b, c, h, w)


class DownBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, spec: DenoiserSpec, attend: bool, downsample: bool):
        super().__init__()
        self.res = ResidualBlock(in_ch, out_ch, time_dim)
        self.attn = CrossAttentionBlock(out_ch, spec.embed_dim, spec.num_heads) if attend else None
        self.down = nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1) if downsample else None

    def forward(self, x: torch.Tensor, temb: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        h = self.res(x, temb)
        if self.attn is not None:
            h = self.attn(h, tokens)
        if self.down is not None:
            h = self.down(h)
        return h


class UpBlock(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, time_dim: int, spec: DenoiserSpec, attend: bool, upsample: bool):
        super().__init__()
        self.res = ResidualBlock(in_ch + skip_ch, out_ch, time_dim)
        self.attn = CrossAttentionBlock(out_ch, spec.embed_dim, spec.num_heads) if attend else None
        self.up = (
            nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(out_ch, out_ch, 3, padding=1))
            if upsample
            else None
        )

    def forward(self, x: torch.Tensor, skip: torch.Tensor, temb: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        h = self.res(torch.cat([x, skip], dim=1), temb)
        if self.attn is not None:
            h = self.attn(h, tokens)
        if self.up is not None:
            h = self.up(h)
        return h


def control_site_shapes(spec: DenoiserSpec, latent_hw: tuple[int, int]) -> list[tuple[int, int, int]]:
    """Expected (C, H, W) of each control injection site: one per down block, plus mid."""
    h, w = latent_hw
    shapes = []
    ch = spec.base_channels
    for i, m in enumerate(spec.channel_multipliers):
        ch = spec.base_channels * m
        if i < spec.levels - 1:
            h, w = h // 2, w // 2
        shapes.append((ch, h, w))
    shapes.append((ch, h, w))
    return shapes


class NoisePredictor(nn.Module):
    """Predicts the injected noise from a fused latent, step index, and conditioning."""

    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        self.spec = spec
        time_dim = spec.base_channels * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(spec.base_channels, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.conv_in = nn.Conv2d(spec.in_channels, spec.base_channels, 3, padding=1)

        downs, skip_chs, up_flags = [], [spec.base_channels], []
        ch = spec.base_channels
        for i, m in enumerate(spec.channel_multipliers):
            out = spec.base_channels * m
            downsample = i < spec.levels - 1
            downs.append(DownBlock(ch, out, time_dim, spec, i in spec.attention_levels, downsample))
            skip_chs.append(out)
            up_flags.append(downsample)
            ch = out
        self.downs = nn.ModuleList(downs)

        self.mid_res1 = ResidualBlock(ch, ch, time_dim)
        self.mid_attn = CrossAttentionBlock(ch, spec.embed_dim, spec.num_heads)
        self.mid_res2 = ResidualBlock(ch, ch, time_dim)

        ups = []
        for i in reversed(range(spec.levels)):
            ups.append(
                UpBlock(ch, skip_chs[i + 1], skip_chs[i], time_dim, spec, i in spec.attention_levels, up_flags[i])
            )
            ch = skip_chs[i]
        ups.append(UpBlock(ch, skip_chs[0], spec.base_channels, time_dim, spec, False, False))
        self.ups = nn.ModuleList(ups)

        self.out_norm = _norm(spec.base_channels)
        self.out_conv = nn.Conv2d(spec.base_channels, spec.out_channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(
        self,
        z_fused: torch.Tensor,
        t: torch.Tensor,
        tokens: torch.Tensor,
        control: list[torch.Tensor] | None = None,
    ) -> torch.Tensor:
        if z_fused.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"fused latent has {z_fused.shape[1]} channels, spec expects {self.spec.in_channels}"
            )
        expected = control_site_shapes(self.spec, tuple(z_fused.shape[-2:]))
        if control is not None:
            if len(control) != len(expected):
                raise ValueError(f"expected {len(expected)} control residuals, got {len(control)}")
            for i, (r, shape) in enumerate(zip(control, expected)):
                if tuple(r.shape[-3:]) != shape:
                    site = "mid block" if i == len(expected) - 1 else f"down block {i}"
                    raise ValueError(
                        f"control residual at {site} has shape {tuple(r.shape[-3:])}, expected {shape}"
                    )

        temb = self.time_mlp(
            timestep_embedding(t, self.spec.base_channels).to(self.conv_in.weight.dtype)
        )
        h = self.conv_in(z_fused)
        skips = [h]
        for i, block in enumerate(self.downs):
            h = block(h, temb, tokens)
            if control is not None:
                h = h + control[i]
            skips.append(h)

        h = self.mid_res1(h, temb)
        h = self.mid_attn(h, tokens)
        h = self.mid_res2(h, temb)
        if control is not None:
            h = h + control[-1]

        for block in self.ups:
            h = block(h, skips.pop(), temb, tokens)
        return self.out_conv(self.act(self.out_norm(h)))


def predict_noise(model: NoisePredictor, z_fused: LatentTensor, t: int, bundle) -> LatentTensor:
    """Single-sample noise prediction from a conditioning bundle."""
    tokens = bundle.concept.tokens.unsqueeze(0)
    control = None
    if bundle.control_residuals is not None:
        control = [r.unsqueeze(0) for r in bundle.control_residuals]
    with torch.no_grad():
        out = model(z_fused.data.unsqueeze(0), torch.tensor([t]), tokens, control)
    return LatentTensor(out[0])


@dataclass
class ParameterGroup:
    name: str
    parameter_count: int
    trainable: bool


def parameter_census(groups: dict[str, nn.Module]) -> list[ParameterGroup]:
    """Enumerate parameter groups with their frozen/trainable status."""
    census = []
    for name, module in groups.items():
        params = list(module.parameters())
        count = sum(p.numel() for p in params)
        trainable = any(p.requires_grad for p in params)
        census.append(ParameterGroup(name, count, trainable))
    return census
