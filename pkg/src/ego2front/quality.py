"""Evaluation instruments: masked PSNR/SSIM/perceptual metrics with body-region
splits, coarse clothing-type accuracy, and ranking-ballot aggregation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import UserError
from .datapipe import LOWER_LABELS, UPPER_LABELS
from .objective import PerceptualNet, perceptual_distance_batch
from .tensors import ImageTensor, PoseMask

PSNR_CAP_DB = 99.0


# ---------------------------------------------------------------------------
# Region masks


@dataclass
class RegionMasks:
    """Body-region masks registered to the frontal frame: full silhouette,
    upper body above the hip line, lower body at/below it."""

    full: torch.Tensor
    upper: torch.Tensor
    lower: torch.Tensor

    def __post_init__(self):
        for name in ("full", "upper", "lower"):
            m = getattr(self, name)
            if m.ndim != 2 or m.dtype != torch.bool:
                raise ValueError(f"{name} mask must be a 2-D bool tensor")
        if (self.upper & self.lower).any():
            raise ValueError("upper and lower masks overlap")
        if ((self.upper | self.lower) & ~self.full).any():
            raise ValueError("upper/lower masks extend beyond the full silhouette")

    def as_dict(self) -> dict[str, torch.Tensor]:
        return {"full": self.full, "upper": self.upper, "lower": self.lower}


def split_regions(pose_mask: PoseMask, hip_fraction: float = 0.5) -> RegionMasks:
    """Partition the silhouette by a hip line placed hip_fraction down its bounding box."""
    if not 0.0 <= hip_fraction <= 1.0:
        raise ValueError(f"hip_fraction={hip_fraction} outside [0, 1]")
    sil = pose_mask.foreground()
    rows = sil.any(dim=1).nonzero().flatten()
    if rows.numel() == 0:
        raise ValueError("empty silhouette")
    top, bottom = int(rows[0]), int(rows[-1])
    hip_line = top + hip_fraction * (bottom - top + 1)
    row_idx = torch.arange(sil.shape[0]).unsqueeze(1).expand_as(sil)
    upper = sil & (row_idx < hip_line)
    lower = sil & (row_idx >= hip_line)
    return RegionMasks(full=sil, upper=upper, lower=lower)


# ---------------------------------------------------------------------------
# Image metrics


def _unit_pair(pred: ImageTensor, gt: ImageTensor) -> tuple[torch.Tensor, torch.Tensor]:
    if pred.data.shape != gt.data.shape:
        raise ValueError(
            f"shape mismatch {tuple(pred.data.shape)} vs {tuple(gt.data.shape)}"
        )
    if pred.value_range != gt.value_range:
        raise ValueError("value-range mismatch")
    return pred.to_unit().double(), gt.to_unit().double()


def psnr(pred: ImageTensor, gt: ImageTensor, mask: torch.Tensor, cap: float = PSNR_CAP_DB) -> float:
    """Masked PSNR in dB with the range width mapped to peak 1.0; capped at `cap`."""
    a, b = _unit_pair(pred, gt)
    m = mask.bool()
    if m.shape != a.shape[-2:]:
        raise ValueError(f"mask shape {tuple(m.shape)} != image shape {tuple(a.shape[-2:])}")
    if not m.any():
        raise ValueError("empty metric mask")
    diff2 = (a - b).pow(2)[:, m]
    mse = float(diff2.mean())
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def _gaussian_kernel(window: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(window, dtype=torch.float64) - (window - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = g.outer(g)
    return kernel / kernel.sum()


def ssim(
    pred: ImageTensor,
    gt: ImageTensor,
    mask: torch.Tensor,
    window: int = 11,
    sigma: float = 1.5,
) -> float:
    """Windowed SSIM averaged over windows whose center lies inside the mask.

    Gaussian 11x11 window with the original stabilizing constants
    (K1=0.01, K2=0.03 on the unit dynamic range).
    """
    a, b = _unit_pair(pred, gt)
    c, h, w = a.shape
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than SSIM window {window}")
    m = mask.bool()
    if m.shape != (h, w):
        raise ValueError("mask/image shape mismatch")
    half = window // 2
    centers = m[half : h - half, half : w - half]
    if not centers.any():
        raise ValueError("no SSIM window centers inside the mask")

    kernel = _gaussian_kernel(window, sigma).view(1, 1, window, window).expand(c, 1, window, window)
    x = a.unsqueeze(0)
    y = b.unsqueeze(0)
    conv = lambda z: F.conv2d(z, kernel, groups=c)
    mu_x, mu_y = conv(x), conv(y)
    sxx = conv(x * x) - mu_x * mu_x
    syy = conv(y * y) - mu_y * mu_y
    sxy = conv(x * y) - mu_x * mu_y

    c1 = (0.01) ** 2
    c2 = (0.03) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    ssim_map = (num / den)[0].mean(dim=0)  # channel-averaged, (H-2*half, W-2*half)
    return float(ssim_map[centers].mean())


def masked_perceptual(
    pred: ImageTensor, gt: ImageTensor, mask: torch.Tensor, net: PerceptualNet | None = None
) -> float:
    """Perceptual distance restricted to a region by zeroing everything else."""
    a, b = _unit_pair(pred, gt)
    m = mask.bool()
    if not m.any():
        raise ValueError("empty metric mask")
    a = (a * m).float().unsqueeze(0)
    b = (b * m).float().unsqueeze(0)
    with torch.no_grad():
        return float(perceptual_distance_batch(a, b, net)[0])


# ---------------------------------------------------------------------------
# Region-wise evaluation report


@dataclass
class MetricStats:
    mean: float
    std: float

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("std must be >= 0")


@dataclass
class RegionStats:
    psnr: MetricStats
    ssim: MetricStats
    perceptual: MetricStats


@dataclass
class EvalReport:
    regions: dict[str, RegionStats]
    sample_count: int
    config_hash: str = ""

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        for name, stats in self.regions.items():
            if not -1.0 <= stats.ssim.mean <= 1.0:
                raise ValueError(f"region {name}: SSIM mean outside [-1, 1]")


def _stats(values: list[float]) -> MetricStats:
    arr = np.asarray(values, dtype=np.float64)
    return MetricStats(mean=float(arr.mean()), std=float(arr.std()))  # population std


def region_eval(
    pred_set: list[ImageTensor],
    gt_set: list[ImageTensor],
    masks: list[RegionMasks],
    psnr_cap: float = PSNR_CAP_DB,
    config_hash: str = "",
    perceptual_net: PerceptualNet | None = None,
) -> EvalReport:
    """Per-region mean +/- std of PSNR, SSIM, and perceptual distance."""
    if not (len(pred_set) == len(gt_set) == len(masks)):
        raise ValueError(
            f"set lengths differ: {len(pred_set)} preds, {len(gt_set)} gts, {len(masks)} masks"
        )
    if len(pred_set) < 1:
        raise ValueError("need at least one sample")
    values: dict[str, dict[str, list[float]]] = {
        r: {"psnr": [], "ssim": [], "perceptual": []} for r in ("full", "upper", "lower")
    }
    for pred, gt, regions in zip(pred_set, gt_set, masks):
        for name, mask in regions.as_dict().items():
            values[name]["psnr"].append(psnr(pred, gt, mask, cap=psnr_cap))
            values[name]["ssim"].append(ssim(pred, gt, mask))
            values[name]["perceptual"].append(masked_perceptual(pred, gt, mask, perceptual_net))
    regions = {
        name: RegionStats(
            psnr=_stats(vals["psnr"]),
            ssim=_stats(vals["ssim"]),
            perceptual=_stats(vals["perceptual"]),
        )
        for name, vals in values.items()
    }
    return EvalReport(regions=regions, sample_count=len(pred_set), config_hash=config_hash)


# ---------------------------------------------------------------------------
# Clothing-type accuracy


def _round_percent(fraction: float) -> int:
    return int(math.floor(fraction * 100.0 + 0.5))


def clothing_accuracy(
    predicted_labels: list[tuple[str, str]], gt_labels: list[tuple[str, str]]
) -> tuple[int, int]:
    """Exact-match percentages for (lower, upper) garment label pairs."""
    if not predicted_labels or len(predicted_labels) != len(gt_labels):
        raise UserError(
            f"label lists must be nonempty and equal length, got {len(predicted_labels)} vs {len(gt_labels)}"
        )
    for pair in list(predicted_labels) + list(gt_labels):
        lower, upper = pair
        if lower not in LOWER_LABELS:
            raise UserError(f"unknown lower-body label {lower!r}")
        if upper not in UPPER_LABELS:
            raise UserError(f"unknown upper-body label {upper!r}")
    n = len(gt_labels)
    lower_hits = sum(p[0] == g[0] for p, g in zip(predicted_labels, gt_labels))
    upper_hits = sum(p[1] == g[1] for p, g in zip(predicted_labels, gt_labels))
    return _round_percent(lower_hits / n), _round_percent(upper_hits / n)


def format_clothing_accuracy(lower_pct: int, upper_pct: int) -> str:
    return f"{lower_pct}% / {upper_pct}%"


# ---------------------------------------------------------------------------
# Ranking-ballot aggregation


@dataclass
class Ballot:
    rater_id: str
    ranking: list[str]  # ranking[0] is rank 1 (best)


@dataclass
class MethodRank:
    method: str
    borda_score: int
    mean_rank: float


@dataclass
class RankAggregate:
    methods: list[MethodRank]
    ballot_count: int
    method_count: int

    def score_of(self, method: str) -> MethodRank:
        for m in self.methods:
            if m.method == method:
                return m
        raise KeyError(method)


def borda_aggregate(ballots: list[Ballot]) -> RankAggregate:
    """Borda scores and mean ranks over complete, tie-free ballots.

    Each ballot awards (method_count - rank) points per method; total points
    conserve ballot_count * k * (k - 1) / 2.
    """
    if not ballots:
        raise UserError("no ballots")
    method_set = set(ballots[0].ranking)
    k = len(method_set)
    if len(ballots[0].ranking) != k:
        raise UserError(f"ballot {ballots[0].rater_id} has tied or duplicate ranks")
    scores = {m: 0 for m in method_set}
    rank_sums = {m: 0 for m in method_set}
    for ballot in ballots:
        if len(ballot.ranking) != k or set(ballot.ranking) != method_set:
            raise UserError(
                f"ballot {ballot.rater_id} is not a complete permutation of the method set"
            )
        for rank, method in enumerate(ballot.ranking, start=1):
            scores[method] += k - rank
            rank_sums[method] += rank
    b = len(ballots)
    methods = [
        MethodRank(method=m, borda_score=scores[m], mean_rank=rank_sums[m] / b)
        for m in sorted(method_set, key=lambda m: (-scores[m], m))
    ]
    return RankAggregate(methods=methods, ballot_count=b, method_count=k)


def load_ballots(path: str | Path) -> list[Ballot]:
    """Delimited ballot file: one line per ballot, ``rater_id,best,...,worst``."""
    path = Path(path)
    if not path.exists():
        raise UserError(f"ballot file not found: {path}")
    ballots = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) < 3:
            raise UserError(f"ballot line {lineno}: need a rater id and at least two methods")
        ballots.append(Ballot(rater_id=parts[0], ranking=parts[1:]))
    if not ballots:
        raise UserError(f"ballot file {path} contains no ballots")
    return ballots
