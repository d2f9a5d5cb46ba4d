"""Procedural paired-shapes dataset: a stylized person seen top-down and in a
frontal T-pose.

Clothing cues are visible in both views (sleeve length for tshirt/sweater,
bare knees for shorts/pants, garment colors), so a model must read the
top-down frame to reproduce the frontal appearance. Images are small and
flat-shaded; the generator is deterministic for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .datapipe import LoadedSample
from .tensors import ImageTensor, PoseMask, save_image, save_mask

BACKGROUND_FRONTAL = 0.85
BACKGROUND_EGO = 0.30


@dataclass
class ToySubject:
    subject_id: str
    lower: str  # shorts | pants
    upper: str  # tshirt | sweater
    upper_color: np.ndarray
    lower_color: np.ndarray
    skin: np.ndarray
    hair: np.ndarray


def make_subject(subject_id: str, rng: np.random.Generator) -> ToySubject:
    def saturated() -> np.ndarray:
        c = rng.uniform(0.0, 1.0, size=3)
        c[rng.integers(3)] = rng.uniform(0.75, 1.0)  # keep one strong channel
        return c

    return ToySubject(
        subject_id=subject_id,
        lower=("shorts", "pants")[int(rng.integers(2))],
        upper=("tshirt", "sweater")[int(rng.integers(2))],
        upper_color=saturated(),
        lower_color=saturated(),
        skin=np.array([0.87, 0.68, 0.55]) + rng.uniform(-0.05, 0.05, 3),
        hair=np.array([0.15, 0.10, 0.08]) + rng.uniform(0.0, 0.1, 3),
    )


def _canvas(size: int, background: float) -> np.ndarray:
    return np.full((size, size, 3), background, dtype=np.float64)


def _ellipse(img: np.ndarray, color: np.ndarray, cy: float, cx: float, ry: float, rx: float,
             mask: np.ndarray | None = None) -> None:
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    inside = ((yy - cy * size) / (ry * size)) ** 2 + ((xx - cx * size) / (rx * size)) ** 2 <= 1.0
    img[inside] = np.clip(color, 0, 1)
    if mask is not None:
        mask[inside] = 1.0


def _rect(img: np.ndarray, color: np.ndarray, y0: float, y1: float, x0: float, x1: float,
          mask: np.ndarray | None = None) -> None:
    size = img.shape[0]
    ys, ye = int(round(y0 * size)), int(round(y1 * size))
    xs, xe = int(round(x0 * size)), int(round(x1 * size))
    img[ys:ye, xs:xe] = np.clip(color, 0, 1)
    if mask is not None:
        mask[ys:ye, xs:xe] = 1.0


def render_frontal(subject: ToySubject, size: int = 64, dx: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Frontal T-pose view; returns (HWC image in [0,1], HW silhouette mask)."""
    img = _canvas(size, BACKGROUND_FRONTAL)
    mask = np.zeros((size, size), dtype=np.float64)
    cx = 0.5 + dx

    # arms (T-pose): sweater sleeves reach the wrists, tshirt sleeves stop early
    sleeve_end = 0.92 if subject.upper == "sweater" else 0.70
    _rect(img, subject.skin, 0.27, 0.34, cx - 0.44, cx + 0.44, mask)
    _rect(img, subject.upper_color, 0.27, 0.34, cx - 0.44 * sleeve_end, cx + 0.44 * sleeve_end, mask)

    # torso and head
    _rect(img, subject.upper_color, 0.24, 0.54, cx - 0.12, cx + 0.12, mask)
    _ellipse(img, subject.skin, 0.16, cx, 0.075, 0.065, mask)
    _ellipse(img, subject.hair, 0.115, cx, 0.045, 0.06, mask)

    # legs: pants cover to the ankles, shorts leave the lower leg bare
    for leg_cx in (cx - 0.065, cx + 0.065):
        _rect(img, subject.skin, 0.54, 0.88, leg_cx - 0.045, leg_cx + 0.045, mask)
    leg_end = 0.86 if subject.lower == "pants" else 0.68
    for leg_cx in (cx - 0.065, cx + 0.065):
        _rect(img, subject.lower_color, 0.54, leg_end, leg_cx - 0.045, leg_cx + 0.045, mask)
        _rect(img, np.array([0.1, 0.1, 0.12]), 0.88, 0.92, leg_cx - 0.05, leg_cx + 0.05, mask)
    return img, mask


def _rotate_point(cy: float, cx: float, deg: float) -> tuple[float, float]:
    rad = np.deg2rad(deg)
    oy, ox = cy - 0.5, cx - 0.5
    return (
        0.5 + oy * np.cos(rad) - ox * np.sin(rad),
        0.5 + oy * np.sin(rad) + ox * np.cos(rad),
    )


def render_ego(
    subject: ToySubject, size: int = 64, rot_deg: float = 0.0, dy: float = 0.0, dx: float = 0.0
) -> np.ndarray:
    """Top-down view: big head, shoulders in garment color, forearm and knee cues."""
    img = _canvas(size, BACKGROUND_EGO)

    def put(color, cy, cx, ry, rx):
        py, px = _rotate_point(cy + dy, cx + dx, rot_deg)
        _ellipse(img, color, py, px, ry, rx)

    # shoulders / torso seen from above, dominated by the upper garment
    put(subject.upper_color, 0.52, 0.5, 0.20, 0.30)
    # forearms poking out: skin for tshirt, garment color for sweater
    arm_color = subject.upper_color if subject.upper == "sweater" else subject.skin
    put(arm_color, 0.58, 0.16, 0.09, 0.07)
    put(arm_color, 0.58, 0.84, 0.09, 0.07)
    # knees near the bottom: garment color for pants, skin for shorts
    knee_color = subject.lower_color if subject.lower == "pants" else subject.skin
    put(knee_color, 0.82, 0.38, 0.07, 0.06)
    put(knee_color, 0.82, 0.62, 0.07, 0.06)
    # upper legs between torso and knees carry the lower garment color
    put(subject.lower_color, 0.71, 0.40, 0.06, 0.06)
    put(subject.lower_color, 0.71, 0.60, 0.06, 0.06)
    # feet
    put(np.array([0.08, 0.08, 0.1]), 0.93, 0.40, 0.04, 0.05)
    put(np.array([0.08, 0.08, 0.1]), 0.93, 0.60, 0.04, 0.05)
    # the wearer's own head/hair fills the near field
    put(subject.hair, 0.24, 0.5, 0.17, 0.19)
    return img


def _to_image(arr_hwc: np.ndarray) -> ImageTensor:
    data = torch.from_numpy(arr_hwc.astype(np.float32)).permute(2, 0, 1) * 2.0 - 1.0
    return ImageTensor(data, (-1.0, 1.0))


def _pose_signature(subject: ToySubject, rng: np.random.Generator) -> list[list[float]]:
    base = np.array([[0.0, 0.0], [0.0, 1.0], [-1.5, 0.3], [1.5, 0.3]])
    return (base + rng.normal(0.0, 0.02, base.shape)).tolist()


def generate_toy_dataset(
    root: str | Path,
    subjects: int = 6,
    frontals_per_subject: int = 4,
    egos_per_frontal: int = 10,
    image_size: int = 64,
    seed: int = 0,
) -> Path:
    """Write a pairable toy capture under root: ego/, frontal/, masks/."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    ego_dir, frontal_dir, mask_dir = root / "ego", root / "frontal", root / "masks"
    for d in (ego_dir, frontal_dir, mask_dir):
        d.mkdir(parents=True, exist_ok=True)

    for s in range(subjects):
        subject = make_subject(f"s{s:02d}", rng)
        for k in range(frontals_per_subject):
            base_t = 1000.0 * s + 10.0 * k
            stem = f"{subject.subject_id}_{base_t:09.3f}"
            img, mask = render_frontal(subject, image_size, dx=float(rng.uniform(-0.02, 0.02)))
            save_image(_to_image(img), frontal_dir / f"{stem}.png")
            save_mask(PoseMask(torch.from_numpy(mask.astype(np.float32))), mask_dir / f"{stem}.png")
            (frontal_dir / f"{stem}.json").write_text(
                json.dumps(
                    {
                        "timestamp": base_t,
                        "subject": subject.subject_id,
                        "lower": subject.lower,
                        "upper": subject.upper,
                        "pose": _pose_signature(subject, rng),
                    }
                )
            )
            offsets = np.sort(rng.uniform(-3.0, 3.0, size=egos_per_frontal))
            for off in offsets:
                t = base_t + float(off)
                ego_stem = f"{subject.subject_id}_{t:09.3f}"
                ego = render_ego(
                    subject,
                    image_size,
                    rot_deg=float(rng.uniform(-8.0, 8.0)),
                    dy=float(rng.uniform(-0.02, 0.02)),
                    dx=float(rng.uniform(-0.02, 0.02)),
                )
                save_image(_to_image(ego), ego_dir / f"{ego_stem}.png")
                (ego_dir / f"{ego_stem}.json").write_text(
                    json.dumps(
                        {
                            "timestamp": t,
                            "subject": subject.subject_id,
                            "pose": _pose_signature(subject, rng),
                        }
                    )
                )
    return root


def synthetic_samples(n: int, size: int = 32, seed: int = 0) -> list[LoadedSample]:
    """In-memory loaded samples for tests that skip file I/O."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        subject = make_subject(f"mem{i:02d}", rng)
        front, mask = render_frontal(subject, size)
        ego = render_ego(subject, size)
        samples.append(
            LoadedSample(
                sample_id=f"mem{i:02d}",
                frontal=_to_image(front),
                mask=PoseMask(torch.from_numpy(mask.astype(np.float32))),
                ego=_to_image(ego),
            )
        )
    return samples
