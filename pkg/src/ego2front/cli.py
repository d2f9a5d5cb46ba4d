"""Command-line entry point.

Subcommands: prep, train, infer, eval, rank, ablate, toydata. Results are
files: manifests, checkpoints, metric logs, delimited reports, and figures.
Exit status: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import itertools
import os
import sys
import traceback
from contextlib import contextmanager
from pathlib import Path

from . import report
from .config import RunConfig, UserError, config_digest, load_config, save_resolved
from .datapipe import DatasetManifest, load_eval_sample, pair_samples, scan_directory
from .objective import load_checkpoint, train
from .quality import borda_aggregate, load_ballots, region_eval, split_regions
from .tensors import load_image, load_mask, save_image
from .toydata import generate_toy_dataset


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit(2); bad flags are user errors
        raise UserError(f"{self.prog}: {message}")


@contextmanager
def output_lock(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UserError(f"output directory {directory} is locked by another run ({lock})")
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _load_run_config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or [])


# ---------------------------------------------------------------------------
# prep


def cmd_prep(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mask_dir = Path(args.mask_dir) if args.mask_dir else Path(args.frontal_dir).parent / "masks"
    ego_records, ego_rejected = scan_directory(args.ego_dir, rel_to=out.parent)
    frontal_records, frontal_rejected = scan_directory(
        args.frontal_dir, mask_dir=mask_dir, rel_to=out.parent
    )
    if not frontal_records:
        raise UserError(f"no frontal frames found in {args.frontal_dir}")
    entries, drops = pair_samples(
        ego_records,
        frontal_records,
        window=args.window,
        per_frontal=args.per_frontal,
        max_per_frontal=args.max_per_frontal,
        val_fraction=args.val_fraction,
    )
    drops.rejected_records = ego_rejected + frontal_rejected
    if not entries:
        drops.save(out.with_suffix(".drops.txt"))
        raise UserError(
            f"no pairable frames ({len(drops.dropped)} frontal frames dropped); empty manifest refused"
        )
    manifest = DatasetManifest(entries=entries, root=out.parent)
    manifest.validate(window=args.window, max_ego=args.max_per_frontal)
    manifest.save(out)
    drops.save(out.with_suffix(".drops.txt"))
    stats = manifest.stats()
    print(
        f"manifest: {out} ({stats['total']} entries, {stats['train']} train / {stats['val']} val); "
        f"dropped {len(drops.dropped)}, rejected records {drops.rejected_records}"
    )
    if drops.dropped or drops.rejected_records:
        return 1
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    manifest_path = args.manifest or cfg.data.manifest
    if not manifest_path:
        raise UserError("no manifest given (flag --manifest or config data.manifest)")
    manifest = DatasetManifest.load(manifest_path)
    manifest.validate()
    digest = config_digest(cfg)
    run_dir = Path(args.out_root or cfg.paths.output_root) / f"run_{digest}"
    with output_lock(run_dir):
        save_resolved(cfg, run_dir / "config.yaml")
        result = train(cfg, manifest, run_dir, resume=args.resume)
        rows = report.read_metrics(result.metrics_path)
        if rows:
            report.save_loss_curves(rows, run_dir / "loss_curves.png")
    print(
        f"run {digest}: {result.final_step} steps, final loss {result.final_loss:.5f}\n"
        f"checkpoint: {result.checkpoint_path}\nmetrics: {result.metrics_path}"
    )
    return 0


# ---------------------------------------------------------------------------
# infer


def cmd_infer(args) -> int:
    model, cfg, step, payload = load_checkpoint(args.checkpoint)
    ego = load_image(args.ego)
    mask = load_mask(args.mask)
    expected = (cfg.data.image_size, cfg.data.image_size)
    if ego.resolution != expected or mask.resolution != expected:
        raise UserError(
            f"input resolution {ego.resolution}/{mask.resolution} does not match "
            f"the checkpoint's configured {expected}"
        )
    steps = args.steps or cfg.sample.steps
    eta = cfg.sample.eta if args.eta is None else args.eta
    output = model.generate(ego, mask, steps=steps, seed=args.seed, eta=eta)
    out = Path(args.out)
    save_image(output, out)
    report.save_infer_grid(ego, mask, output, out.with_name(out.stem + "_grid.png"))
    out.with_suffix(".json").write_text(
        '{"config": "%s", "checkpoint_step": %d, "steps": %d, "seed": %d, "eta": %s}\n'
        % (payload["config_hash"], step, steps, args.seed, eta)
    )
    print(f"wrote {out} and {out.stem}_grid.png (config {payload['config_hash']})")
    return 0


# ---------------------------------------------------------------------------
# eval


def _evaluate(model, cfg: RunConfig, manifest: DatasetManifest, split: str,
              max_samples: int | None, stub_identity: bool, digest: str,
              predictions_dir: Path | None = None):
    entries = manifest.split_entries(split)
    if not entries:
        raise UserError(f"eval split {split!r} is empty")
    entries = sorted(entries, key=lambda e: e.frontal_id)
    if max_samples is not None:
        entries = entries[:max_samples]
    preds, gts, masks = [], [], []
    for i, entry in enumerate(entries):
        sample = load_eval_sample(entry, manifest.root)
        if stub_identity:
            pred = sample.frontal
        else:
            pred = model.generate(
                sample.ego,
                sample.mask,
                steps=cfg.eval.sample_steps,
                seed=cfg.eval.seed * 100_003 + i,
                eta=cfg.sample.eta,
            )
        if predictions_dir is not None:
            save_image(pred, predictions_dir / f"{entry.frontal_id}.png")
        preds.append(pred)
        gts.append(sample.frontal)
        masks.append(split_regions(sample.mask, cfg.eval.hip_fraction))
    return region_eval(preds, gts, masks, psnr_cap=cfg.eval.psnr_cap, config_hash=digest)


def cmd_eval(args) -> int:
    if args.stub_identity:
        model, cfg = None, _load_run_config(args)
        digest = config_digest(cfg)
    else:
        if not args.checkpoint:
            raise UserError("--checkpoint required unless --stub-identity is given")
        model, cfg, _, payload = load_checkpoint(args.checkpoint)
        digest = payload["config_hash"]
    manifest = DatasetManifest.load(args.manifest)
    report_dir = Path(args.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    max_samples = args.max_samples if args.max_samples is not None else cfg.eval.max_samples
    rep = _evaluate(
        model, cfg, manifest, args.split, max_samples, args.stub_identity, digest,
        predictions_dir=report_dir / "predictions",
    )
    report.write_eval_tsv(rep, report_dir / "report.tsv")
    table = report.format_eval_table(rep)
    (report_dir / "report.txt").write_text(table + "\n")
    report.save_eval_figure(rep, report_dir / "report.png")
    print(table)
    return 0


# ---------------------------------------------------------------------------
# rank


def cmd_rank(args) -> int:
    ballots = load_ballots(args.ballots)
    agg = borda_aggregate(ballots)
    source = "sha256:" + hashlib.sha256(Path(args.ballots).read_bytes()).hexdigest()[:12]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_rank_tsv(agg, out_dir / "rank.tsv", source=source)
    table = report.format_rank_table(agg)
    (out_dir / "rank.txt").write_text(table + "\n")
    report.save_rank_figure(agg, out_dir / "rank.png")
    print(table)
    return 0


# ---------------------------------------------------------------------------
# ablate


ABLATION_AXES = {
    "control": [("control-on", ("conditioning", "control_enabled", True)),
                ("control-off", ("conditioning", "control_enabled", False))],
    "perc_loss": [("perc-on", ("loss", "lambda_perc", 0.2)),
                  ("perc-off", ("loss", "lambda_perc", 0.0))],
    "codec": [("codec-toy", ("codec", "kind", "toy_autoencoder")),
              ("codec-prior", ("codec", "kind", "human_prior_adapter"))],
    "concept": [("concept-global", ("conditioning", "concept_variant", "global_cls")),
                ("concept-grid", ("conditioning", "concept_variant", "grid_decoder"))],
}


def cmd_ablate(args) -> int:
    base = _load_run_config(args)
    manifest_path = args.manifest or base.data.manifest
    if not manifest_path:
        raise UserError("no manifest given (flag --manifest or config data.manifest)")
    manifest = DatasetManifest.load(manifest_path)
    manifest.validate()
    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    for a in axes:
        if a not in ABLATION_AXES:
            raise UserError(f"unknown ablation axis {a!r}; choose from {sorted(ABLATION_AXES)}")
    out_root = Path(args.out_root or base.paths.output_root)

    rows = []
    for combo in itertools.product(*(ABLATION_AXES[a] for a in axes)):
        cfg = copy.deepcopy(base)
        labels = []
        for label, (section, key, value) in combo:
            setattr(getattr(cfg, section), key, value)
            labels.append(label)
        variant = "+".join(labels)
        digest = config_digest(cfg)
        run_dir = out_root / f"ablate_{digest}"
        with output_lock(run_dir):
            save_resolved(cfg, run_dir / "config.yaml")
            result = train(cfg, manifest, run_dir)
        model, cfg_loaded, _, payload = load_checkpoint(result.checkpoint_path)
        split = args.split if manifest.split_entries(args.split) else "train"
        rep = _evaluate(model, cfg_loaded, manifest, split, args.max_samples, False, digest)
        stats = rep.regions["full"]
        rows.append(
            {
                "variant": variant,
                "config": digest,
                "psnr_full": stats.psnr.mean,
                "ssim_full": stats.ssim.mean,
                "perceptual_full": stats.perceptual.mean,
            }
        )
        print(f"[{variant}] config {digest}: full-body PSNR {stats.psnr.mean:.2f} dB")

    report.write_ablation_tsv(rows, out_root / "ablation.tsv")
    table = report.format_ablation_table(rows)
    (out_root / "ablation.txt").write_text(table + "\n")
    report.save_ablation_figure(rows, out_root / "ablation.png")
    print(table)
    return 0


# ---------------------------------------------------------------------------
# toydata


def cmd_toydata(args) -> int:
    root = generate_toy_dataset(
        args.out,
        subjects=args.subjects,
        frontals_per_subject=args.frontals_per_subject,
        egos_per_frontal=args.egos_per_frontal,
        image_size=args.size,
        seed=args.seed,
    )
    print(f"toy dataset written under {root}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ego2front", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", parents=[], help="pair ego/frontal frames into a manifest")
    p.add_argument("--ego-dir", required=True)
    p.add_argument("--frontal-dir", required=True)
    p.add_argument("--mask-dir", default=None, help="defaults to <frontal-dir>/../masks")
    p.add_argument("--out", required=True, help="manifest output path")
    p.add_argument("--window", type=float, default=5.0)
    p.add_argument("--per-frontal", type=int, default=10)
    p.add_argument("--max-per-frontal", type=int, default=12)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train from a config and manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out-root", default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="synthesize a frontal image from an ego image + pose mask")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ego", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eta", type=float, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="region-wise metrics over a manifest split")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--report-dir", required=True)
    p.add_argument("--max-samples", type=int, default=None)
    p.add_argument("--stub-identity", action="store_true",
                   help="use ground truth as predictions (reporting-path self-test)")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rank", help="aggregate ranking ballots (Borda score, mean rank)")
    p.add_argument("--ballots", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("ablate", help="train+eval a matrix of config variants")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out-root", default=None)
    p.add_argument("--axes", default="control,perc_loss")
    p.add_argument("--split", default="val")
    p.add_argument("--max-samples", type=int, default=4)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("toydata", help="generate the procedural paired-shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=6)
    p.add_argument("--frontals-per-subject", type=int, default=4)
    p.add_argument("--egos-per-frontal", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toydata)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
