"""Core tensor wrappers and lossless image file I/O.

Images live in a declared value range (canonical [-1, 1]) as CHW float
tensors; latents are CHW floats produced by a codec. Conversion to and
from 8-bit RGB files happens only here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

CANONICAL_RANGE = (-1.0, 1.0)


@dataclass
class ImageTensor:
    """A CHW image with an explicit value range."""

    data: torch.Tensor
    value_range: tuple[float, float] = CANONICAL_RANGE

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"image must be CHW rank-3, got shape {tuple(self.data.shape)}")
        lo, hi = self.value_range
        if not lo < hi:
            raise ValueError(f"invalid value range ({lo}, {hi})")

    @property
    def resolution(self) -> tuple[int, int]:
        return (int(self.data.shape[1]), int(self.data.shape[2]))

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    def validate(self) -> None:
        if not torch.isfinite(self.data).all():
            raise ValueError("image contains non-finite values")
        lo, hi = self.value_range
        dmin, dmax = float(self.data.min()), float(self.data.max())
        if dmin < lo - 1e-6 or dmax > hi + 1e-6:
            raise ValueError(
                f"image values [{dmin:.4f}, {dmax:.4f}] outside declared range ({lo}, {hi})"
            )

    def clamped(self) -> "ImageTensor":
        lo, hi = self.value_range
        return ImageTensor(self.data.clamp(lo, hi), self.value_range)

    def to_unit(self) -> torch.Tensor:
        """Rescale to [0, 1] (range width mapped to 1.0)."""
        lo, hi = self.value_range
        return (self.data - lo) / (hi - lo)


@dataclass
class LatentTensor:
    """A CHW codec latent; ``scale`` is the codec scaling applied at encode time."""

    data: torch.Tensor
    scale: float = 1.0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"latent must be CHW rank-3, got shape {tuple(self.data.shape)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    def validate(self) -> None:
        if not torch.isfinite(self.data).all():
            raise ValueError("latent contains non-finite values")


@dataclass
class PoseMask:
    """Single-channel body-silhouette mask in [0, 1], registered to the frontal frame."""

    data: torch.Tensor
    source: str = "rendered-silhouette"

    def __post_init__(self):
        if self.data.ndim == 3 and self.data.shape[0] == 1:
            self.data = self.data[0]
        if self.data.ndim != 2:
            raise ValueError(f"pose mask must be HW, got shape {tuple(self.data.shape)}")

    @property
    def resolution(self) -> tuple[int, int]:
        return (int(self.data.shape[0]), int(self.data.shape[1]))

    def validate(self) -> None:
        if float(self.data.min()) < 0.0 or float(self.data.max()) > 1.0:
            raise ValueError("pose mask values outside [0, 1]")
        if not bool((self.data > 0.5).any()):
            raise ValueError("pose mask has empty foreground")

    def foreground(self) -> torch.Tensor:
        return self.data > 0.5


def load_image(path: str | Path, value_range: tuple[float, float] = CANONICAL_RANGE) -> ImageTensor:
    """Read an 8-bit RGB file and map it linearly into ``value_range``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    lo, hi = value_range
    data = torch.from_numpy(arr).permute(2, 0, 1) * (hi - lo) + lo
    return ImageTensor(data, value_range)


def save_image(image: ImageTensor, path: str | Path) -> None:
    """Write an image as lossless 8-bit RGB PNG."""
    unit = image.clamped().to_unit()
    arr = (unit * 255.0).round().clamp(0, 255).to(torch.uint8)
    arr = arr.permute(1, 2, 0).numpy()
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_mask(path: str | Path) -> PoseMask:
    """Read a single-channel mask file into [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return PoseMask(torch.from_numpy(arr))


def save_mask(mask: PoseMask, path: str | Path) -> None:
    arr = (mask.data.clamp(0, 1) * 255.0).round().to(torch.uint8).numpy()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PNG")
