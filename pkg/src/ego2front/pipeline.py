"""Model assembly: codec + conditioning + control branch + noise predictor,
and the sampling-based frontal image generation path.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from . import codec as codec_mod
from .codec import Codec, CodecSpec, HumanPriorCodec, PretrainedVaeAdapter, ToyAutoencoder
from .conditioning import ConceptEncoder, FrozenImageBackbone, PoseControlBranch
from .config import RunConfig
from .denoiser import DenoiserSpec, NoisePredictor
from .schedule import NoiseSchedule, build_linear_schedule, sample
from .tensors import ImageTensor, LatentTensor, PoseMask


@dataclass
class GenerationConditioning:
    """What the sampler's denoise closure needs per generated image."""

    ego_latent: LatentTensor
    tokens: torch.Tensor  # (1, n, d)
    mask: torch.Tensor  # (1, 1, H, W)


class FrontalSynthesizer(nn.Module):
    """Full egocentric-to-frontal model with swappable codec and concept variants."""

    def __init__(
        self,
        codec: Codec,
        concept: ConceptEncoder,
        control: PoseControlBranch,
        denoiser: NoisePredictor,
        schedule: NoiseSchedule,
        control_enabled: bool = True,
        clamp_latents: bool = True,
        guidance_scale: float = 1.0,
    ):
        super().__init__()
        self.codec = codec
        self.concept = concept
        self.control = control
        self.denoiser = denoiser
        self.schedule = schedule
        self.control_enabled = control_enabled
        self.clamp_latents = clamp_latents
        self.guidance_scale = guidance_scale

    @classmethod
    def from_config(
        cls,
        cfg: RunConfig,
        vae_backbone: nn.Module | None = None,
        prior_extractor: nn.Module | None = None,
    ) -> "FrontalSynthesizer":
        spec = CodecSpec(
            kind=cfg.codec.kind,
            downsample_factor=cfg.codec.downsample_factor,
            latent_channels=cfg.codec.latent_channels,
        )
        if spec.kind == "toy_autoencoder":
            codec: Codec = ToyAutoencoder(spec, base_channels=cfg.codec.base_channels)
        elif spec.kind == "pretrained_vae_adapter":
            codec = PretrainedVaeAdapter(spec, vae_backbone)
        else:
            if prior_extractor is None:
                # Desk-scale stand-in with the real extractor's interface.
                prior_extractor = FrozenImageBackbone(
                    feature_dim=cfg.conditioning.backbone_feature_dim,
                    grid_strides=spec.downsample_factor.bit_length() - 1,
                    init_seed=11,
                ).features
            codec = HumanPriorCodec(
                spec,
                prior_extractor,
                extractor_channels=cfg.conditioning.backbone_feature_dim,
                extractor_stride=spec.downsample_factor,
                base_channels=cfg.codec.base_channels,
            )
        codec.freeze()  # operational state; pretraining unfreezes explicitly

        dn_spec = DenoiserSpec(
            base_channels=cfg.denoiser.base_channels,
            channel_multipliers=tuple(cfg.denoiser.channel_multipliers),
            attention_levels=tuple(cfg.denoiser.attention_levels),
            in_channels=2 * spec.latent_channels,
            out_channels=spec.latent_channels,
            embed_dim=cfg.denoiser.embed_dim,
            num_heads=cfg.denoiser.num_heads,
        )
        backbone = FrozenImageBackbone(feature_dim=cfg.conditioning.backbone_feature_dim)
        concept = ConceptEncoder(
            backbone,
            embed_dim=cfg.denoiser.embed_dim,
            variant=cfg.conditioning.concept_variant,
            queries=cfg.conditioning.concept_queries,
            num_heads=cfg.denoiser.num_heads,
            grid_size=cfg.data.image_size // 8,
        )
        control = PoseControlBranch(dn_spec, spec.downsample_factor)
        schedule = build_linear_schedule(
            cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end
        )
        return cls(
            codec,
            concept,
            control,
            NoisePredictor(dn_spec),
            schedule,
            control_enabled=cfg.conditioning.control_enabled,
            clamp_latents=cfg.sample.clamp_latents,
            guidance_scale=cfg.sample.guidance_scale,
        )

    def parameter_groups(self) -> dict[str, nn.Module]:
        return {
            "codec": self.codec,
            "concept_backbone": self.concept.backbone,
            "concept_projection": self.concept.head,
            "control_branch": self.control,
            "denoiser": self.denoiser,
        }

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def predict_noise_batch(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        ego_latent: torch.Tensor,
        mask: torch.Tensor,
        tokens: torch.Tensor,
    ) -> torch.Tensor:
        """Training-path prediction: fuse, inject control residuals, denoise."""
        fused = torch.cat([z_t, ego_latent], dim=1)
        control = self.control(mask, fused, t) if self.control_enabled else None
        return self.denoiser(fused, t, tokens, control)

    def x0_clamp_bound(self) -> float | None:
        if not self.clamp_latents:
            return None
        return 1.05 * self.codec.spec.scale

    def generate(
        self,
        ego: ImageTensor,
        mask: PoseMask,
        steps: int,
        seed: int,
        eta: float | None = None,
    ) -> ImageTensor:
        """Synthesize a frontal image from an ego image and a target pose mask."""
        ego.validate()
        mask.validate()
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                ego_latent = codec_mod.encode(ego, self.codec)
                tokens = self.concept(ego.data.unsqueeze(0))
                cond = GenerationConditioning(
                    ego_latent=ego_latent,
                    tokens=tokens,
                    mask=mask.data.unsqueeze(0).unsqueeze(0),
                )

                def denoise_fn(z: torch.Tensor, t: int, c: GenerationConditioning) -> torch.Tensor:
                    t_vec = torch.tensor([t])
                    fused = torch.cat([z.unsqueeze(0), c.ego_latent.data.unsqueeze(0)], dim=1)
                    control = self.control(c.mask, fused, t_vec) if self.control_enabled else None
                    eps = self.denoiser(fused, t_vec, c.tokens, control)
                    if self.guidance_scale != 1.0:
                        eps_uncond = self.denoiser(fused, t_vec, torch.zeros_like(c.tokens), control)
                        eps = eps_uncond + self.guidance_scale * (eps - eps_uncond)
                    return eps[0]

                z0 = sample(
                    denoise_fn,
                    cond,
                    self.schedule,
                    steps=steps,
                    seed=seed,
                    eta=self.schedule_eta(eta),
                    x0_clamp=self.x0_clamp_bound(),
                )
                z0.scale = self.codec.spec.scale
                return codec_mod.decode(z0, self.codec)
        finally:
            self.train(was_training)

    @staticmethod
    def schedule_eta(eta: float | None) -> float:
        return 0.0 if eta is None else eta
