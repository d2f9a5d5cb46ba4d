"""Image <-> latent codecs with swappable encoder variants.

Three interchangeable kinds share one shape contract (latent spatial dims =
image dims / downsample_factor):

* ``toy_autoencoder`` - small strided-conv encoder / transposed-conv decoder,
  trainable at desk scale, frozen once fitted.
* ``pretrained_vae_adapter`` - wrapper around externally supplied frozen
  weights (weights are not shipped).
* ``human_prior_adapter`` - frozen feature extractor followed by a learned
  convolutional reduction to the latent shape; decodes through a borrowed
  toy decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensors import ImageTensor, LatentTensor

CODEC_KINDS = ("toy_autoencoder", "pretrained_vae_adapter", "human_prior_adapter")


class VariantUnavailableError(RuntimeError):
    """An ablation codec variant was requested without its required backbone."""


@dataclass
class CodecSpec:
    kind: str = "toy_autoencoder"
    downsample_factor: int = 8
    latent_channels: int = 4
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in CODEC_KINDS:
            raise ValueError(f"unknown codec kind {self.kind!r}, expected one of {CODEC_KINDS}")
        f = self.downsample_factor
        if f < 1 or (f & (f - 1)) != 0:
            raise ValueError(f"downsample_factor must be a power of two, got {f}")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


class Codec(nn.Module):
    """Base class: subclasses provide raw (unscaled) batched encode/decode."""

    def __init__(self, spec: CodecSpec):
        super().__init__()
        self.spec = spec

    def encode_raw(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode_raw(self, latents: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_batch(self, images: torch.Tensor) -> torch.Tensor:
        return self.encode_raw(images) * self.spec.scale

    def decode_batch(self, latents: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(latents / self.spec.scale)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)

    def fittable_parameters(self) -> list[nn.Parameter]:
        """Parameters the reconstruction pretraining phase is allowed to touch."""
        return list(self.parameters())


class ToyAutoencoder(Codec):
    """Strided-conv encoder and mirrored transposed-conv decoder.

    Both ends finish in tanh, so raw latents and decoded pixels are bounded
    by (-1, 1) and the whole path stays smooth for gradient checks.
    """

    def __init__(self, spec: CodecSpec, image_channels: int = 3, base_channels: int = 32):
        super().__init__(spec)
        levels = spec.downsample_factor.bit_length() - 1
        enc = []
        ch = image_channels
        for i in range(levels):
            out = base_channels * (2**i)
            enc += [nn.Conv2d(ch, out, 3, stride=2, padding=1), nn.SiLU()]
            ch = out
        enc += [nn.Conv2d(ch, spec.latent_channels, 3, padding=1), nn.Tanh()]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(spec.latent_channels, ch, 3, padding=1), nn.SiLU()]
        for i in reversed(range(levels)):
            out = base_channels * (2 ** max(i - 1, 0)) if i > 0 else base_channels
            dec += [nn.ConvTranspose2d(ch, out, 4, stride=2, padding=1), nn.SiLU()]
            ch = out
        dec += [nn.Conv2d(ch, image_channels, 3, padding=1), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

    def encode_raw(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def decode_raw(self, latents: torch.Tensor) -> torch.Tensor:
        return self.decoder(latents)


class PretrainedVaeAdapter(Codec):
    """Adapter around a frozen externally supplied VAE-style module.

    The wrapped module must expose ``encode(images) -> latents`` and
    ``decode(latents) -> images`` with the spec's shape contract.
    """

    def __init__(self, spec: CodecSpec, backbone: nn.Module | None):
        super().__init__(spec)
        if backbone is None:
            raise VariantUnavailableError(
                "pretrained_vae_adapter requires externally supplied weights; none configured"
            )
        if not hasattr(backbone, "encode") or not hasattr(backbone, "decode"):
            raise ValueError("pretrained VAE backbone must expose encode/decode")
        self.backbone = backbone
        self.freeze()

    def encode_raw(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone.encode(images)

    def decode_raw(self, latents: torch.Tensor) -> torch.Tensor:
        return self.backbone.decode(latents)

    def fittable_parameters(self) -> list[nn.Parameter]:
        return []  # externally supplied weights stay untouched


class HumanPriorCodec(Codec):
    """Frozen human-prior feature extractor + learned downsampling reduction.

    The extractor yields a spatial feature map at ``extractor_stride``; a
    single strided conv reduces it to the spec's latent shape. With an
    identity extractor the encode path is exactly one strided convolution
    of the input. Decoding borrows a toy decoder so the round-trip shape
    contract holds for this variant too.
    """

    def __init__(
        self,
        spec: CodecSpec,
        extractor: nn.Module | None,
        extractor_channels: int = 3,
        extractor_stride: int = 1,
        decoder: nn.Module | None = None,
        image_channels: int = 3,
        base_channels: int = 32,
    ):
        super().__init__(spec)
        if extractor is None:
            raise VariantUnavailableError(
                "human_prior_adapter requires a configured feature extractor; none available"
            )
        remaining = spec.downsample_factor // extractor_stride
        if remaining < 1 or spec.downsample_factor % extractor_stride != 0:
            raise ValueError(
                f"extractor stride {extractor_stride} incompatible with factor {spec.downsample_factor}"
            )
        self.extractor = extractor
        for p in self.extractor.parameters():
            p.requires_grad_(False)
        self.reduce = nn.Conv2d(
            extractor_channels, spec.latent_channels, kernel_size=remaining, stride=remaining
        )
        if decoder is None:
            decoder = ToyAutoencoder(
                CodecSpec("toy_autoencoder", spec.downsample_factor, spec.latent_channels),
                image_channels,
                base_channels,
            ).decoder
        self.decoder = decoder

    def encode_raw(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            feats = self.extractor(images)
        return self.reduce(feats)

    def decode_raw(self, latents: torch.Tensor) -> torch.Tensor:
        return self.decoder(latents)

    def fittable_parameters(self) -> list[nn.Parameter]:
        return list(self.reduce.parameters()) + list(self.decoder.parameters())


def encode(image: ImageTensor, codec: Codec) -> LatentTensor:
    """Compress an image into a latent; validates range and divisibility."""
    image.validate()
    f = codec.spec.downsample_factor
    h, w = image.resolution
    if h % f != 0 or w % f != 0:
        raise ValueError(f"resolution {h}x{w} not divisible by downsample factor {f}")
    with torch.no_grad():
        z = codec.encode_batch(image.data.unsqueeze(0))[0]
    return LatentTensor(z, scale=codec.spec.scale)


def decode(latent: LatentTensor, codec: Codec) -> ImageTensor:
    """Expand a latent back to an image, clamped into the canonical range."""
    c, h, w = latent.shape
    if c != codec.spec.latent_channels:
        raise ValueError(f"latent has {c} channels, codec expects {codec.spec.latent_channels}")
    with torch.no_grad():
        x = codec.decode_batch(latent.data.unsqueeze(0))[0]
    return ImageTensor(x, (-1.0, 1.0)).clamped()


def encode_human_prior(image: ImageTensor, codec: HumanPriorCodec) -> LatentTensor:
    """Encode through the human-prior variant; same contract as encode()."""
    if not isinstance(codec, HumanPriorCodec):
        raise ValueError("encode_human_prior requires a HumanPriorCodec")
    return encode(image, codec)


def fit_codec(
    codec: Codec,
    images: torch.Tensor,
    steps: int,
    lr: float = 2e-3,
    batch_size: int = 8,
    seed: int = 0,
) -> list[float]:
    """Reconstruction-pretrain a codec on a stack of images (B,C,H,W).

    Single-writer phase: unfreezes the codec's fittable parameters, minimizes
    per-pixel MSE, then freezes the whole codec. Returns per-step losses.
    """
    params = codec.fittable_parameters()
    if not params:
        codec.freeze()
        return []
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    for _ in range(steps):
        idx = torch.randint(0, images.shape[0], (min(batch_size, images.shape[0]),), generator=gen)
        batch = images[idx]
        recon = codec.decode_raw(codec.encode_raw(batch))
        loss = F.mse_loss(recon, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    codec.freeze()
    return losses


def estimate_latent_scale(codec: Codec, images: torch.Tensor) -> float:
    """Scale factor mapping raw latent std to ~1 over the given images."""
    with torch.no_grad():
        z = codec.encode_raw(images)
    std = float(z.std())
    if std < 1e-6:
        return 1.0
    return 1.0 / std
