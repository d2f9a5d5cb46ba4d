"""Egocentric top-down to frontal T-pose image synthesis.

A pose-conditioned latent diffusion pipeline: a codec compresses images to
latents, a conditional noise predictor is trained with a compound
noise-prediction + perceptual objective, and a zero-initialized control
branch injects body-pose guidance. Ships with dataset pairing/augmentation
tools and a region-wise evaluation suite (PSNR/SSIM/perceptual metrics,
clothing-type accuracy, Borda rank aggregation).
"""

__version__ = "0.1.0"
