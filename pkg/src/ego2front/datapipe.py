"""Dataset manifest management, ego-to-frontal pairing, and the two
stochastic training augmentations.

Frames are image files named ``<subject>_<timestamp>.png`` (timestamp in
seconds), optionally accompanied by a ``<stem>.json`` sidecar carrying
subject id, 2-D pose joints, and (for frontal frames) clothing labels.
Pose masks for frontal frames live in a parallel masks directory under the
same filename. The manifest is line-delimited JSON with a schema header,
one record per frontal id, all paths relative to the manifest location.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import AugmentConfig, UserError
from .tensors import ImageTensor, PoseMask, load_image, load_mask

MANIFEST_SCHEMA = "pairs/1"
LOWER_LABELS = ("shorts", "pants")
UPPER_LABELS = ("tshirt", "sweater")


@dataclass
class FrameRecord:
    """One captured frame prior to pairing."""

    path: str
    timestamp: float
    subject_id: str = ""
    pose: np.ndarray | None = None  # (J, 2) joints, torso-normalized
    mask_path: str | None = None
    clothing_lower: str | None = None
    clothing_upper: str | None = None


@dataclass
class PairedSample:
    frontal_id: str
    frontal_path: str
    pose_mask_path: str
    ego_paths: list[str]
    frontal_timestamp: float
    ego_timestamps: list[float]
    subject_id: str
    clothing_lower: str
    clothing_upper: str
    pose_signature: list[list[float]] | None = None
    split: str = "train"

    def validate(self, window: float | None = None, max_ego: int | None = None) -> None:
        if self.clothing_lower not in LOWER_LABELS:
            raise UserError(f"sample {self.frontal_id}: unknown lower label {self.clothing_lower!r}")
        if self.clothing_upper not in UPPER_LABELS:
            raise UserError(f"sample {self.frontal_id}: unknown upper label {self.clothing_upper!r}")
        if len(self.ego_paths) < 1:
            raise UserError(f"sample {self.frontal_id}: no ego frames")
        if max_ego is not None and len(self.ego_paths) > max_ego:
            raise UserError(f"sample {self.frontal_id}: {len(self.ego_paths)} ego frames > max {max_ego}")
        if window is not None:
            for ts in self.ego_timestamps:
                if abs(ts - self.frontal_timestamp) > window + 1e-9:
                    raise UserError(f"sample {self.frontal_id}: ego frame outside pairing window")


@dataclass
class DropReport:
    dropped: list[tuple[str, str]] = field(default_factory=list)  # (frontal_id, reason)
    rejected_records: int = 0

    def add(self, frontal_id: str, reason: str) -> None:
        self.dropped.append((frontal_id, reason))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"# drop-report/1 rejected_records={self.rejected_records}"]
        lines += [f"{fid}\t{reason}" for fid, reason in self.dropped]
        path.write_text("\n".join(lines) + "\n")


@dataclass
class DatasetManifest:
    entries: list[PairedSample]
    root: Path = Path(".")

    def split_entries(self, split: str) -> list[PairedSample]:
        return [e for e in self.entries if e.split == split]

    def stats(self) -> dict[str, int]:
        out = {"total": len(self.entries)}
        for split in ("train", "val"):
            out[split] = len(self.split_entries(split))
        return out

    def validate(self, window: float | None = None, max_ego: int | None = None) -> None:
        seen: set[str] = set()
        for e in self.entries:
            if e.frontal_id in seen:
                raise UserError(f"frontal id {e.frontal_id} appears more than once")
            seen.add(e.frontal_id)
        for e in self.entries:
            e.validate(window=window, max_ego=max_ego)
            for rel in [e.frontal_path, e.pose_mask_path, *e.ego_paths]:
                if not (self.root / rel).exists():
                    raise UserError(f"sample {e.frontal_id}: missing file {rel}")

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps({"schema": MANIFEST_SCHEMA, "entries": len(self.entries)})]
        for e in sorted(self.entries, key=lambda s: s.frontal_id):
            lines.append(
                json.dumps(
                    {
                        "frontal_id": e.frontal_id,
                        "frontal": e.frontal_path,
                        "mask": e.pose_mask_path,
                        "egos": e.ego_paths,
                        "t_frontal": e.frontal_timestamp,
                        "t_egos": e.ego_timestamps,
                        "subject": e.subject_id,
                        "lower": e.clothing_lower,
                        "upper": e.clothing_upper,
                        "pose": e.pose_signature,
                        "split": e.split,
                    },
                    sort_keys=True,
                )
            )
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise UserError(f"manifest not found: {path}")
        lines = path.read_text().splitlines()
        if not lines:
            raise UserError(f"manifest {path} is empty")
        header = json.loads(lines[0])
        if header.get("schema") != MANIFEST_SCHEMA:
            raise UserError(f"manifest schema {header.get('schema')!r} != {MANIFEST_SCHEMA!r}")
        entries = []
        for line in lines[1:]:
            if not line.strip():
                continue
            d = json.loads(line)
            entries.append(
                PairedSample(
                    frontal_id=d["frontal_id"],
                    frontal_path=d["frontal"],
                    pose_mask_path=d["mask"],
                    ego_paths=list(d["egos"]),
                    frontal_timestamp=float(d["t_frontal"]),
                    ego_timestamps=[float(t) for t in d["t_egos"]],
                    subject_id=d["subject"],
                    clothing_lower=d["lower"],
                    clothing_upper=d["upper"],
                    pose_signature=d.get("pose"),
                    split=d["split"],
                )
            )
        return cls(entries=entries, root=path.parent)


def assign_split(frontal_id: str, val_fraction: float) -> str:
    """Split keyed by id hash, so entry order can never move an id across splits."""
    bucket = int(hashlib.sha256(frontal_id.encode()).hexdigest(), 16) % 10_000
    return "val" if bucket < int(round(val_fraction * 10_000)) else "train"


def pose_distance(a: np.ndarray | None, b: np.ndarray | None) -> float:
    """Mean joint distance between torso-normalized signatures; inf when unavailable."""
    if a is None or b is None or len(a) == 0 or len(b) == 0 or len(a) != len(b):
        return math.inf
    return float(np.mean(np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1)))


def normalize_pose(joints: np.ndarray, anchor: int = 0, torso_ref: int = 1) -> np.ndarray:
    """Center joints on the anchor and scale by the anchor->torso_ref distance."""
    joints = np.asarray(joints, dtype=np.float64)
    torso = float(np.linalg.norm(joints[torso_ref] - joints[anchor]))
    if torso < 1e-9:
        raise ValueError("degenerate pose: zero torso length")
    return (joints - joints[anchor]) / torso


def _check_monotone(frames: list[FrameRecord], name: str) -> None:
    for prev, cur in zip(frames, frames[1:]):
        if cur.timestamp < prev.timestamp:
            raise UserError(f"{name} stream timestamps are not monotone non-decreasing")


def pair_samples(
    ego_stream: list[FrameRecord],
    frontal_stream: list[FrameRecord],
    window: float,
    per_frontal: int,
    max_per_frontal: int = 12,
    val_fraction: float = 0.2,
) -> tuple[list[PairedSample], DropReport]:
    """Pair each frontal frame with up to per_frontal in-window ego frames.

    Candidates are ranked by pose-signature similarity, then temporal
    proximity, then path (a total order, so pairing is deterministic).
    Frontal frames with zero candidates are dropped and reported.
    """
    if per_frontal < 1:
        raise UserError("per_frontal must be >= 1")
    per_frontal = min(per_frontal, max_per_frontal)
    _check_monotone(ego_stream, "ego")
    _check_monotone(frontal_stream, "frontal")

    report = DropReport()
    entries: list[PairedSample] = []
    for fr in frontal_stream:
        fid = Path(fr.path).stem
        if fr.mask_path is None:
            report.add(fid, "no pose mask")
            continue
        if fr.clothing_lower is None or fr.clothing_upper is None:
            report.add(fid, "missing clothing labels")
            continue
        candidates = [
            e
            for e in ego_stream
            if abs(e.timestamp - fr.timestamp) <= window
            and (not fr.subject_id or not e.subject_id or e.subject_id == fr.subject_id)
        ]
        if not candidates:
            report.add(fid, f"no ego frames within {window}s window")
            continue
        candidates.sort(
            key=lambda e: (pose_distance(e.pose, fr.pose), abs(e.timestamp - fr.timestamp), e.path)
        )
        chosen = candidates[:per_frontal]
        entries.append(
            PairedSample(
                frontal_id=fid,
                frontal_path=fr.path,
                pose_mask_path=fr.mask_path,
                ego_paths=[c.path for c in chosen],
                frontal_timestamp=fr.timestamp,
                ego_timestamps=[c.timestamp for c in chosen],
                subject_id=fr.subject_id,
                clothing_lower=fr.clothing_lower,
                clothing_upper=fr.clothing_upper,
                pose_signature=None if fr.pose is None else np.asarray(fr.pose).tolist(),
                split=assign_split(fid, val_fraction),
            )
        )
    return entries, report


def scan_directory(
    directory: str | Path,
    mask_dir: str | Path | None = None,
    rel_to: str | Path | None = None,
) -> tuple[list[FrameRecord], int]:
    """Scan a frame directory into records sorted by timestamp.

    Returns (records, rejected_count); a frame is rejected when no timestamp
    can be parsed from its filename or sidecar.
    """
    import os

    directory = Path(directory)
    if not directory.is_dir():
        raise UserError(f"not a directory: {directory}")

    def rel(p: Path) -> str:
        return os.path.relpath(p, rel_to) if rel_to is not None else str(p)

    records, rejected = [], 0
    for img_path in sorted(directory.glob("*.png")):
        sidecar = img_path.with_suffix(".json")
        meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        ts = meta.get("timestamp")
        if ts is None:
            tail = img_path.stem.rsplit("_", 1)[-1]
            try:
                ts = float(tail)
            except ValueError:
                rejected += 1
                continue
        subject = meta.get("subject", img_path.stem.rsplit("_", 1)[0])
        pose = meta.get("pose")
        mask_path = None
        if mask_dir is not None:
            candidate = Path(mask_dir) / img_path.name
            if candidate.exists():
                mask_path = rel(candidate)
        records.append(
            FrameRecord(
                path=rel(img_path),
                timestamp=float(ts),
                subject_id=str(subject),
                pose=None if pose is None else np.asarray(pose, dtype=np.float64),
                mask_path=mask_path,
                clothing_lower=meta.get("lower"),
                clothing_upper=meta.get("upper"),
            )
        )
    records.sort(key=lambda r: (r.timestamp, r.path))
    return records, rejected


# ---------------------------------------------------------------------------
# Augmentations


@dataclass
class FrontalAugParams:
    zoom: float
    shift: tuple[float, float]  # (dx, dy) as fractions of the frame
    rotation_deg: float


def _affine(data: torch.Tensor, params: FrontalAugParams, padding_mode: str) -> torch.Tensor:
    """Apply zoom-in + shift + rotation to a CHW tensor via a sampling grid."""
    rad = math.radians(params.rotation_deg)
    cos, sin = math.cos(rad), math.sin(rad)
    sc = 1.0 / params.zoom
    tx, ty = 2.0 * params.shift[0], 2.0 * params.shift[1]
    theta = torch.tensor(
        [[sc * cos, -sc * sin, tx], [sc * sin, sc * cos, ty]], dtype=torch.float32
    ).unsqueeze(0)
    x = data.unsqueeze(0)
    grid = F.affine_grid(theta, x.shape, align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode=padding_mode, align_corners=False)
    return out[0]


def augment_frontal(
    image: ImageTensor,
    mask: PoseMask,
    q: float,
    rng: np.random.Generator,
    cfg: AugmentConfig | None = None,
) -> tuple[ImageTensor, PoseMask, FrontalAugParams | None]:
    """With probability q, one jointly parameterized zoom/shift/rotation on both."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q={q} outside [0, 1]")
    cfg = cfg or AugmentConfig()
    if rng.random() >= q:
        return image, mask, None
    params = FrontalAugParams(
        zoom=float(np.clip(rng.uniform(1.0, cfg.frontal_zoom_max), 1.0, cfg.frontal_zoom_max)),
        shift=(
            float(np.clip(rng.uniform(-cfg.frontal_shift_max, cfg.frontal_shift_max), -cfg.frontal_shift_max, cfg.frontal_shift_max)),
            float(np.clip(rng.uniform(-cfg.frontal_shift_max, cfg.frontal_shift_max), -cfg.frontal_shift_max, cfg.frontal_shift_max)),
        ),
        rotation_deg=float(
            np.clip(
                rng.uniform(-cfg.frontal_rotation_max_deg, cfg.frontal_rotation_max_deg),
                -cfg.frontal_rotation_max_deg,
                cfg.frontal_rotation_max_deg,
            )
        ),
    )
    new_image = ImageTensor(_affine(image.data, params, "border"), image.value_range)
    new_mask = PoseMask(_affine(mask.data.unsqueeze(0), params, "zeros")[0], mask.source)
    return new_image, new_mask, params


def apply_frontal_params(mask: PoseMask, params: FrontalAugParams) -> PoseMask:
    """Re-apply recorded frontal-perturbation parameters to a mask."""
    return PoseMask(_affine(mask.data.unsqueeze(0), params, "zeros")[0], mask.source)


def augment_ego(
    ego: ImageTensor,
    p: float,
    rng: np.random.Generator,
    cfg: AugmentConfig | None = None,
) -> tuple[ImageTensor, float | None]:
    """With probability p, a small global rotation of the ego image alone."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p={p} outside [0, 1]")
    cfg = cfg or AugmentConfig()
    if rng.random() >= p:
        return ego, None
    angle = float(
        np.clip(
            rng.uniform(-cfg.ego_rotation_max_deg, cfg.ego_rotation_max_deg),
            -cfg.ego_rotation_max_deg,
            cfg.ego_rotation_max_deg,
        )
    )
    params = FrontalAugParams(zoom=1.0, shift=(0.0, 0.0), rotation_deg=angle)
    return ImageTensor(_affine(ego.data, params, "border"), ego.value_range), angle


# ---------------------------------------------------------------------------
# Sample loading for training and evaluation


@dataclass
class LoadedSample:
    sample_id: str
    frontal: ImageTensor
    mask: PoseMask
    ego: ImageTensor


def load_training_sample(
    entry: PairedSample,
    root: Path,
    aug: AugmentConfig,
    rng: np.random.Generator,
) -> LoadedSample:
    """Load one (augmented) training view of a paired sample."""
    frontal = load_image(root / entry.frontal_path)
    mask = load_mask(root / entry.pose_mask_path)
    ego_path = entry.ego_paths[int(rng.integers(len(entry.ego_paths)))]
    ego = load_image(root / ego_path)
    frontal, mask, _ = augment_frontal(frontal, mask, aug.q, rng, aug)
    ego, _ = augment_ego(ego, aug.p, rng, aug)
    return LoadedSample(entry.frontal_id, frontal, mask, ego)


def load_eval_sample(entry: PairedSample, root: Path, ego_index: int = 0) -> LoadedSample:
    frontal = load_image(root / entry.frontal_path)
    mask = load_mask(root / entry.pose_mask_path)
    ego = load_image(root / entry.ego_paths[ego_index % len(entry.ego_paths)])
    return LoadedSample(entry.frontal_id, frontal, mask, ego)
