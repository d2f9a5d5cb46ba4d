"""Conditioning bundle construction: concept tokens, pose-control residuals,
and ego-latent fusion.

The concept pathway runs the ego image through a frozen backbone and a
trainable projection (one global token, or a learned-query decoder over the
backbone's feature grid). The pose-control branch mirrors the denoiser's
encoder half over the fused latent plus an embedded silhouette mask, with
zero-initialized 1x1 output projections, so a fresh branch contributes
exactly nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .denoiser import DenoiserSpec, ResidualBlock, control_site_shapes, timestep_embedding
from .tensors import ImageTensor, LatentTensor, PoseMask

CONCEPT_VARIANTS = ("global_cls", "grid_decoder")


@dataclass
class ConceptEmbedding:
    tokens: torch.Tensor  # (token_count, embed_dim)
    variant: str

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError(f"tokens must be (count, dim) with count >= 1, got {tuple(self.tokens.shape)}")
        if self.variant not in CONCEPT_VARIANTS:
            raise ValueError(f"unknown concept variant {self.variant!r}")


@dataclass
class ConditioningBundle:
    concept: ConceptEmbedding
    control_residuals: list[torch.Tensor] | None
    ego_latent: LatentTensor


class FrozenImageBackbone(nn.Module):
    """Stand-in for a pretrained image encoder: fixed random conv features.

    Exposes the same surface a production backbone adapter would (a patch
    feature grid and a pooled global vector) so every conditioning contract
    is testable without external weights.
    """

    def __init__(self, image_channels: int = 3, feature_dim: int = 64, grid_strides: int = 3, init_seed: int = 7):
        super().__init__()
        gen = torch.Generator().manual_seed(init_seed)
        layers = []
        ch = image_channels
        for i in range(grid_strides):
            out = feature_dim if i == grid_strides - 1 else max(feature_dim // 2, 8)
            conv = nn.Conv2d(ch, out, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.2)
                conv.bias.zero_()
            layers += [conv, nn.SiLU()]
            ch = out
        self.features = nn.Sequential(*layers)
        self.feature_dim = feature_dim
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def feature_grid(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.features(images)

    def global_features(self, images: torch.Tensor) -> torch.Tensor:
        return self.feature_grid(images).mean(dim=(2, 3))


class GlobalTokenHead(nn.Module):
    """Bias-free linear projection of pooled features to one token."""

    def __init__(self, feature_dim: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Linear(feature_dim, embed_dim, bias=False)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.proj(pooled).unsqueeze(1)


class GridDecoderHead(nn.Module):
    """Learned queries cross-attending over a projected feature grid."""

    def __init__(self, feature_dim: int, embed_dim: int, queries: int, num_heads: int, grid_size: int):
        super().__init__()
        self.kv_proj = nn.Linear(feature_dim, embed_dim)
        self.queries = nn.Parameter(torch.randn(queries, embed_dim) * 0.02)
        self.grid_pos = nn.Parameter(torch.randn(grid_size * grid_size, embed_dim) * 0.02)
        self.decoder = nn.MultiheadAttention(embed_dim, num_heads, batch_first=True)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        kv = self.kv_proj(grid.flatten(2).transpose(1, 2))  # (B, g*g, D)
        if kv.shape[1] != self.grid_pos.shape[0]:
            raise ValueError(
                f"feature grid has {kv.shape[1]} positions, positional table expects {self.grid_pos.shape[0]}"
            )
        kv = kv + self.grid_pos.unsqueeze(0)
        q = self.queries.unsqueeze(0).expand(grid.shape[0], -1, -1)
        out, _ = self.decoder(q, kv, kv, need_weights=False)
        return out


class ConceptEncoder(nn.Module):
    """Frozen backbone + trainable head producing cross-attention tokens."""

    def __init__(
        self,
        backbone: FrozenImageBackbone | None,
        embed_dim: int,
        variant: str = "global_cls",
        queries: int = 8,
        num_heads: int = 4,
        grid_size: int = 8,
    ):
        super().__init__()
        if variant not in CONCEPT_VARIANTS:
            raise ValueError(f"unknown concept variant {variant!r}")
        if backbone is None:
            raise RuntimeError(
                "concept backbone unavailable; configure the stand-in backbone or a pretrained adapter"
            )
        self.backbone = backbone
        self.variant = variant
        self.embed_dim = embed_dim
        if variant == "global_cls":
            self.head: nn.Module = GlobalTokenHead(backbone.feature_dim, embed_dim)
        else:
            self.head = GridDecoderHead(backbone.feature_dim, embed_dim, queries, num_heads, grid_size)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if self.variant == "global_cls":
            return self.head(self.backbone.global_features(images))
        return self.head(self.backbone.feature_grid(images))

    @property
    def token_count(self) -> int:
        return 1 if self.variant == "global_cls" else int(self.head.queries.shape[0])


def encode_concept_global(ego: ImageTensor, encoder: ConceptEncoder) -> ConceptEmbedding:
    """Single projected token from the frozen backbone's pooled features."""
    if encoder.variant != "global_cls":
        raise ValueError("encoder is not configured for the global_cls variant")
    ego.validate()
    tokens = encoder(ego.data.unsqueeze(0))[0]
    return ConceptEmbedding(tokens, "global_cls")


def encode_concept_grid(ego: ImageTensor, encoder: ConceptEncoder) -> ConceptEmbedding:
    """Learned queries cross-attending over the backbone's feature grid."""
    if encoder.variant != "grid_decoder":
        raise ValueError("encoder is not configured for the grid_decoder variant")
    ego.validate()
    tokens = encoder(ego.data.unsqueeze(0))[0]
    return ConceptEmbedding(tokens, "grid_decoder")


class MaskEmbedding(nn.Module):
    """Downsamples the full-resolution silhouette to the latent grid."""

    def __init__(self, out_channels: int, downsample_factor: int, hidden: int = 16):
        super().__init__()
        layers = [nn.Conv2d(1, hidden, 3, padding=1), nn.SiLU()]
        strides = downsample_factor.bit_length() - 1
        ch = hidden
        for _ in range(strides):
            layers += [nn.Conv2d(ch, ch, 3, stride=2, padding=1), nn.SiLU()]
        layers += [nn.Conv2d(ch, out_channels, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        return self.net(mask)


class PoseControlBranch(nn.Module):
    """Mirror of the denoiser's encoder half emitting per-site residual maps.

    Every output projection starts at exactly zero, so attaching a freshly
    initialized branch cannot change the denoiser's behavior.
    """

    def __init__(self, spec: DenoiserSpec, downsample_factor: int):
        super().__init__()
        self.spec = spec
        time_dim = spec.base_channels * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(spec.base_channels, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.conv_in = nn.Conv2d(spec.in_channels, spec.base_channels, 3, padding=1)
        self.mask_embed = MaskEmbedding(spec.base_channels, downsample_factor)

        blocks, projections = [], []
        ch = spec.base_channels
        for i, m in enumerate(spec.channel_multipliers):
            out = spec.base_channels * m
            down = nn.Conv2d(out, out, 3, stride=2, padding=1) if i < spec.levels - 1 else None
            blocks.append(nn.ModuleDict({"res": ResidualBlock(ch, out, time_dim), "down": down or nn.Identity()}))
            projections.append(self._zero_proj(out))
            ch = out
        self.blocks = nn.ModuleList(blocks)
        self.mid_res = ResidualBlock(ch, ch, time_dim)
        projections.append(self._zero_proj(ch))
        self.projections = nn.ModuleList(projections)

    @staticmethod
    def _zero_proj(channels: int) -> nn.Conv2d:
        proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(proj.weight)
        nn.init.zeros_(proj.bias)
        return proj

    @property
    def site_count(self) -> int:
        return self.spec.levels + 1

    def forward(self, mask: torch.Tensor, z_fused: torch.Tensor, t: torch.Tensor) -> list[torch.Tensor]:
        if mask.ndim != 4 or mask.shape[1] != 1:
            raise ValueError(f"mask must be (B,1,H,W), got {tuple(mask.shape)}")
        temb = self.time_mlp(
            timestep_embedding(t, self.spec.base_channels).to(self.conv_in.weight.dtype)
        )
        h = self.conv_in(z_fused) + self.mask_embed(mask)
        residuals = []
        for block, proj in zip(self.blocks, self.projections[:-1]):
            h = block["down"](block["res"](h, temb))
            residuals.append(proj(h))
        h = self.mid_res(h, temb)
        residuals.append(self.projections[-1](h))
        return residuals


def encode_pose_control(
    mask: PoseMask, noised_input: LatentTensor, t: int, branch: PoseControlBranch
) -> list[torch.Tensor]:
    """One residual map per injection site for a single sample."""
    mask.validate()
    with torch.no_grad():
        residuals = branch(
            mask.data.unsqueeze(0).unsqueeze(0),
            noised_input.data.unsqueeze(0),
            torch.tensor([t]),
        )
    expected = control_site_shapes(branch.spec, tuple(noised_input.data.shape[-2:]))
    for i, (r, shape) in enumerate(zip(residuals, expected)):
        if tuple(r.shape[-3:]) != shape:
            raise ValueError(f"control residual {i} shaped {tuple(r.shape[-3:])}, expected {shape}")
    return [r[0] for r in residuals]


def fuse_ego_latent(z_t: LatentTensor, ego_latent: LatentTensor) -> LatentTensor:
    """Channel-concatenate the noised target latent with the clean ego latent."""
    if z_t.data.shape[-2:] != ego_latent.data.shape[-2:]:
        raise ValueError(
            f"spatial mismatch: {tuple(z_t.data.shape[-2:])} vs {tuple(ego_latent.data.shape[-2:])}"
        )
    return LatentTensor(torch.cat([z_t.data, ego_latent.data], dim=0), scale=z_t.scale)
