"""Compound training objective, perceptual distance, training loop, checkpoints.

The loss combines a noise-prediction term with a perceptual term computed on
the decoded single-step clean-latent estimate:

    total = lambda_diff * mse(eps_hat, eps) + lambda_perc * perceptual(x0_hat, frontal)

All randomness inside a loss evaluation comes from the explicit seed, so the
loss is a pure function of (parameters, batch, seed).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import estimate_latent_scale, fit_codec
from .config import RunConfig, UserError, config_digest, config_from_dict, resolved_dict
from .datapipe import DatasetManifest, LoadedSample, load_training_sample
from .pipeline import FrontalSynthesizer
from .schedule import forward_noise_batch, predict_x0_batch
from .tensors import ImageTensor

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class LossWeights:
    lambda_diff: float = 1.0
    lambda_perc: float = 0.2

    def __post_init__(self):
        if self.lambda_diff < 0 or self.lambda_perc < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossResult:
    total: torch.Tensor
    diff: torch.Tensor
    perc: torch.Tensor


# ---------------------------------------------------------------------------
# Perceptual distance


class PerceptualNet(nn.Module):
    """Fixed random multi-scale conv features for a perceptual distance.

    The raw input counts as the first feature level, which makes the distance
    zero exactly when the inputs are identical. The net is frozen and seeded,
    so the metric is a stable pure function; a production adapter can replace
    it with a learned perceptual model behind the same contract.
    """

    def __init__(self, channels: int = 3, widths: tuple[int, ...] = (8, 16, 32), init_seed: int = 23):
        super().__init__()
        gen = torch.Generator().manual_seed(init_seed)
        convs = []
        ch = channels
        for w in widths:
            conv = nn.Conv2d(ch, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.3)
                conv.bias.zero_()
            convs.append(conv)
            ch = w
        self.convs = nn.ModuleList(convs)
        self.act = nn.SiLU()
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = [x]
        h = x
        for conv in self.convs:
            h = self.act(conv(h))
            feats.append(h)
        return feats


_PERCEPTUAL_CACHE: dict[torch.dtype, PerceptualNet] = {}


def default_perceptual_net(dtype: torch.dtype = torch.float32) -> PerceptualNet:
    if dtype not in _PERCEPTUAL_CACHE:
        _PERCEPTUAL_CACHE[dtype] = PerceptualNet().to(dtype)
    return _PERCEPTUAL_CACHE[dtype]


def perceptual_distance_batch(
    a: torch.Tensor, b: torch.Tensor, net: PerceptualNet | None = None
) -> torch.Tensor:
    """Per-sample feature-space distance for (B,C,H,W) pairs; differentiable."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    net = net or default_perceptual_net(a.dtype)
    dist = torch.zeros(a.shape[0], dtype=a.dtype)
    for fa, fb in zip(net.features(a), net.features(b)):
        na = fa / (fa.pow(2).sum(dim=1, keepdim=True) + 1e-10).sqrt()
        nb = fb / (fb.pow(2).sum(dim=1, keepdim=True) + 1e-10).sqrt()
        dist = dist + (na - nb).pow(2).mean(dim=(1, 2, 3))
    return dist


def perceptual_distance(a: ImageTensor, b: ImageTensor, net: PerceptualNet | None = None) -> float:
    """Symmetric learned-feature distance; zero iff the images are identical."""
    if a.resolution != b.resolution:
        raise ValueError(f"resolution mismatch {a.resolution} vs {b.resolution}")
    if a.value_range != b.value_range:
        raise ValueError("value-range mismatch")
    with torch.no_grad():
        return float(perceptual_distance_batch(a.data.unsqueeze(0), b.data.unsqueeze(0), net)[0])


# ---------------------------------------------------------------------------
# Compound loss


def _validate_sample(s: LoadedSample) -> None:
    try:
        s.frontal.validate()
        s.ego.validate()
        s.mask.validate()
    except ValueError as e:
        raise UserError(f"invalid sample {s.sample_id}: {e}") from e
    if s.frontal.resolution != s.mask.resolution:
        raise UserError(f"invalid sample {s.sample_id}: mask not registered to frontal frame")


def compound_loss(
    model: FrontalSynthesizer,
    batch: list[LoadedSample],
    weights: LossWeights,
    seed: int,
    concept_dropout: float = 0.0,
    perceptual_net: PerceptualNet | None = None,
) -> LossResult:
    """Noise-prediction + perceptual loss over a batch, seeded and reproducible."""
    if not batch:
        raise UserError("empty batch")
    for s in batch:
        _validate_sample(s)
    dtype = next(model.parameters()).dtype
    frontal = torch.stack([s.frontal.data for s in batch]).to(dtype)
    ego = torch.stack([s.ego.data for s in batch]).to(dtype)
    mask = torch.stack([s.mask.data.unsqueeze(0) for s in batch]).to(dtype)

    gen = torch.Generator().manual_seed(int(seed))
    schedule = model.schedule
    t = torch.randint(1, schedule.T + 1, (len(batch),), generator=gen)

    z0 = model.codec.encode_batch(frontal)
    ego_latent = model.codec.encode_batch(ego)
    eps = torch.randn(z0.shape, generator=gen, dtype=dtype)
    z_t = forward_noise_batch(z0, t, eps, schedule)

    tokens = model.concept(ego)
    if concept_dropout > 0.0:
        keep = (torch.rand(len(batch), generator=gen) >= concept_dropout).to(dtype)
        tokens = tokens * keep.view(-1, 1, 1)

    eps_hat = model.predict_noise_batch(z_t, t, ego_latent, mask, tokens)
    loss_diff = F.mse_loss(eps_hat, eps)

    if weights.lambda_perc > 0.0:
        x0_hat = predict_x0_batch(z_t, eps_hat, t, schedule)
        decoded = model.codec.decode_batch(x0_hat)
        net = perceptual_net or default_perceptual_net(dtype)
        loss_perc = perceptual_distance_batch(decoded, frontal, net).mean()
    else:
        loss_perc = torch.zeros((), dtype=dtype)

    total = weights.lambda_diff * loss_diff + weights.lambda_perc * loss_perc
    return LossResult(total=total, diff=loss_diff, perc=loss_perc)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(
    path: str | Path,
    model: FrontalSynthesizer,
    cfg: RunConfig,
    step: int,
    optimizer: torch.optim.Optimizer | None = None,
) -> None:
    groups = {}
    for name, module in model.parameter_groups().items():
        params = list(module.parameters())
        groups[name] = {
            "trainable": any(p.requires_grad for p in params),
            "state": module.state_dict(),
        }
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": int(step),
        "config": resolved_dict(cfg),
        "config_hash": config_digest(cfg),
        "schedule": {
            "steps": cfg.schedule.steps,
            "beta_start": cfg.schedule.beta_start,
            "beta_end": cfg.schedule.beta_end,
        },
        "codec_scale": model.codec.spec.scale,
        "groups": groups,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(
    path: str | Path,
    vae_backbone: nn.Module | None = None,
    prior_extractor: nn.Module | None = None,
) -> tuple[FrontalSynthesizer, RunConfig, int, dict]:
    path = Path(path)
    if not path.exists():
        raise UserError(f"checkpoint not found: {path}")
    payload = torch.load(path, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise UserError(
            f"checkpoint format version {version} unsupported (expected {CHECKPOINT_FORMAT_VERSION})"
        )
    cfg = config_from_dict(payload["config"])
    model = FrontalSynthesizer.from_config(cfg, vae_backbone=vae_backbone, prior_extractor=prior_extractor)
    model.codec.spec.scale = float(payload["codec_scale"])
    for name, module in model.parameter_groups().items():
        module.load_state_dict(payload["groups"][name]["state"])
        if not payload["groups"][name]["trainable"]:
            for p in module.parameters():
                p.requires_grad_(False)
    return model, cfg, int(payload["step"]), payload


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    checkpoint_path: Path
    init_checkpoint_path: Path
    metrics_path: Path
    final_step: int
    final_loss: float


def _step_seeds(base_seed: int, step: int) -> tuple[np.random.Generator, int]:
    ss_np, ss_torch = np.random.SeedSequence([base_seed, step]).spawn(2)
    return np.random.default_rng(ss_np), int(ss_torch.generate_state(1)[0])


def _truncate_metrics(path: Path, keep_up_to: int) -> None:
    if not path.exists():
        return
    kept = [
        line
        for line in path.read_text().splitlines()
        if line.strip() and json.loads(line)["step"] <= keep_up_to
    ]
    path.write_text("".join(l + "\n" for l in kept))


def _pretrain_codec(model: FrontalSynthesizer, manifest: DatasetManifest, cfg: RunConfig) -> None:
    from .tensors import load_image  # local import keeps module import light

    entries = sorted(manifest.entries, key=lambda e: e.frontal_id)[:32]
    images = []
    for e in entries:
        images.append(load_image(manifest.root / e.frontal_path).data)
        images.append(load_image(manifest.root / e.ego_paths[0]).data)
    stack = torch.stack(images)
    fit_codec(
        model.codec,
        stack,
        steps=cfg.codec.pretrain_steps,
        lr=cfg.codec.pretrain_lr,
        seed=cfg.train.seed,
    )
    model.codec.spec.scale = estimate_latent_scale(model.codec, stack)


def train(
    cfg: RunConfig,
    manifest: DatasetManifest,
    out_dir: str | Path,
    resume: bool = False,
    stop_after_step: int | None = None,
) -> TrainResult:
    """Run the training loop; emits periodic checkpoints and a metrics log.

    Identical config + seed + data give identical loss trajectories; resuming
    from a checkpoint matches the uninterrupted run because all per-step
    randomness is derived from (seed, step). ``stop_after_step`` checkpoints
    and returns early (an orderly interruption).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.pt"
    init_path = out_dir / "checkpoint_init.pt"
    metrics_path = out_dir / "metrics.jsonl"
    digest = config_digest(cfg)

    train_entries = manifest.split_entries("train")
    if not train_entries:
        raise UserError("manifest has no training entries")
    train_entries = sorted(train_entries, key=lambda e: e.frontal_id)

    weights = LossWeights(cfg.loss.lambda_diff, cfg.loss.lambda_perc)

    if resume:
        model, _, start_step, payload = load_checkpoint(ckpt_path)
        if payload["config_hash"] != digest:
            raise UserError(
                f"refusing to resume: checkpoint config hash {payload['config_hash']} "
                f"!= current {digest}"
            )
        optimizer = torch.optim.Adam(model.trainable_parameters(), lr=cfg.train.learning_rate)
        if payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
        _truncate_metrics(metrics_path, start_step)
    else:
        torch.manual_seed(cfg.train.seed)
        model = FrontalSynthesizer.from_config(cfg)
        _pretrain_codec(model, manifest, cfg)
        optimizer = torch.optim.Adam(model.trainable_parameters(), lr=cfg.train.learning_rate)
        start_step = 0
        save_checkpoint(init_path, model, cfg, 0, optimizer=None)
        save_checkpoint(ckpt_path, model, cfg, 0, optimizer=optimizer)
        metrics_path.write_text("")

    pnet = default_perceptual_net(next(model.parameters()).dtype)
    start_time = time.monotonic()
    final_loss = math.nan

    with metrics_path.open("a") as metrics:
        for step in range(start_step + 1, cfg.train.steps + 1):
            np_rng, torch_seed = _step_seeds(cfg.train.seed, step)
            idx = np_rng.integers(0, len(train_entries), size=cfg.train.batch_size)
            batch = [
                load_training_sample(train_entries[i], manifest.root, cfg.augment, np_rng)
                for i in idx
            ]
            result = compound_loss(
                model,
                batch,
                weights,
                seed=torch_seed,
                concept_dropout=cfg.conditioning.concept_dropout,
                perceptual_net=pnet,
            )
            if not torch.isfinite(result.total):
                raise RuntimeError(
                    f"non-finite loss at step {step}; last good checkpoint retained at {ckpt_path}"
                )
            optimizer.zero_grad()
            result.total.backward()
            optimizer.step()
            final_loss = float(result.total.detach())

            if step % cfg.train.log_every == 0 or step == 1 or step == cfg.train.steps:
                record = {
                    "step": step,
                    "loss_diff": float(result.diff.detach()),
                    "loss_perc": float(result.perc.detach()),
                    "loss_total": final_loss,
                    "wall_time": round(time.monotonic() - start_time, 3),
                }
                metrics.write(json.dumps(record) + "\n")
                metrics.flush()
            if step % cfg.train.checkpoint_every == 0 or step == cfg.train.steps:
                save_checkpoint(ckpt_path, model, cfg, step, optimizer=optimizer)
            if stop_after_step is not None and step >= stop_after_step:
                save_checkpoint(ckpt_path, model, cfg, step, optimizer=optimizer)
                return TrainResult(ckpt_path, init_path, metrics_path, step, final_loss)

    return TrainResult(
        checkpoint_path=ckpt_path,
        init_checkpoint_path=init_path,
        metrics_path=metrics_path,
        final_step=cfg.train.steps,
        final_loss=final_loss,
    )
