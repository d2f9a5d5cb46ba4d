"""Report rendering: delimited machine-readable tables, human-readable text
tables, and matplotlib figures written next to them.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from .quality import EvalReport, RankAggregate
from .tensors import ImageTensor, PoseMask, save_image

plt.rcParams.update(
    {
        "figure.dpi": 110,
        "font.size": 9,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "figure.autolayout": True,
    }
)

REGIONS = ("full", "upper", "lower")
METRICS = ("psnr", "ssim", "perceptual")


# ---------------------------------------------------------------------------
# Evaluation reports


def write_eval_tsv(report: EvalReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        "# schema: eval-report/1",
        f"# config: {report.config_hash}",
        f"# samples: {report.sample_count}",
        "region\tmetric\tmean\tstd",
    ]
    for region in REGIONS:
        stats = report.regions[region]
        for metric in METRICS:
            ms = getattr(stats, metric)
            lines.append(f"{region}\t{metric}\t{ms.mean:.6f}\t{ms.std:.6f}")
    path.write_text("\n".join(lines) + "\n")


def format_eval_table(report: EvalReport) -> str:
    header = f"{'region':<8}" + "".join(f"{m:>22}" for m in ("PSNR (dB)", "SSIM", "Perceptual"))
    rows = [header, "-" * len(header)]
    for region in REGIONS:
        stats = report.regions[region]
        cells = [
            f"{stats.psnr.mean:.2f} ± {stats.psnr.std:.2f}",
            f"{stats.ssim.mean:.4f} ± {stats.ssim.std:.4f}",
            f"{stats.perceptual.mean:.4f} ± {stats.perceptual.std:.4f}",
        ]
        rows.append(f"{region:<8}" + "".join(f"{c:>22}" for c in cells))
    rows.append(f"samples: {report.sample_count}   config: {report.config_hash}")
    return "\n".join(rows)


def save_eval_figure(report: EvalReport, path: str | Path) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    titles = {"psnr": "PSNR (dB) ↑", "ssim": "SSIM ↑", "perceptual": "Perceptual ↓"}
    for ax, metric in zip(axes, METRICS):
        means = [getattr(report.regions[r], metric).mean for r in REGIONS]
        stds = [getattr(report.regions[r], metric).std for r in REGIONS]
        ax.bar(REGIONS, means, yerr=stds, capsize=3, color=["#4878d0", "#ee854a", "#6acc64"])
        ax.set_title(titles[metric])
    fig.suptitle(f"region-wise metrics over {report.sample_count} samples", y=1.02)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


# ---------------------------------------------------------------------------
# Rank aggregation


def write_rank_tsv(agg: RankAggregate, path: str | Path, source: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        "# schema: rank-aggregate/1",
        f"# source: {source}",
        f"# ballots: {agg.ballot_count}",
        f"# methods: {agg.method_count}",
        "method\tborda_score\tmean_rank",
    ]
    for m in agg.methods:
        lines.append(f"{m.method}\t{m.borda_score}\t{m.mean_rank:.4f}")
    path.write_text("\n".join(lines) + "\n")


def format_rank_table(agg: RankAggregate) -> str:
    header = f"{'method':<20}{'Borda ↑':>10}{'MeanRank ↓':>12}"
    rows = [header, "-" * len(header)]
    for m in agg.methods:
        rows.append(f"{m.method:<20}{m.borda_score:>10}{m.mean_rank:>12.2f}")
    rows.append(f"ballots: {agg.ballot_count}   methods: {agg.method_count}")
    return "\n".join(rows)


def save_rank_figure(agg: RankAggregate, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 0.6 * len(agg.methods) + 1.2))
    names = [m.method for m in agg.methods][::-1]
    scores = [m.borda_score for m in agg.methods][::-1]
    ranks = [m.mean_rank for m in agg.methods][::-1]
    bars = ax.barh(names, scores, color="#4878d0")
    for bar, mr in zip(bars, ranks):
        ax.annotate(
            f"MR {mr:.2f}",
            (bar.get_width(), bar.get_y() + bar.get_height() / 2),
            xytext=(4, 0),
            textcoords="offset points",
            va="center",
        )
    ax.set_xlabel("Borda score")
    ax.set_title(f"rank aggregation over {agg.ballot_count} ballots")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


# ---------------------------------------------------------------------------
# Training metrics


def read_metrics(path: str | Path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


def save_loss_curves(metrics_rows: list[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in metrics_rows]
    for key, label in (("loss_total", "total"), ("loss_diff", "noise"), ("loss_perc", "perceptual")):
        ax.plot(steps, [r[key] for r in metrics_rows], label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


# ---------------------------------------------------------------------------
# Ablation tables


def write_ablation_tsv(rows: list[dict], path: str | Path) -> None:
    """Rows carry variant name, config digest, and full-body metric means."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        "# schema: ablation-report/1",
        "variant\tconfig\tpsnr_full\tssim_full\tperceptual_full",
    ]
    for r in rows:
        lines.append(
            f"{r['variant']}\t{r['config']}\t{r['psnr_full']:.4f}\t{r['ssim_full']:.4f}\t{r['perceptual_full']:.4f}"
        )
    path.write_text("\n".join(lines) + "\n")


def format_ablation_table(rows: list[dict]) -> str:
    header = f"{'variant':<36}{'config':<14}{'PSNR ↑':>10}{'SSIM ↑':>10}{'Perc ↓':>10}"
    out = [header, "-" * len(header)]
    for r in rows:
        out.append(
            f"{r['variant']:<36}{r['config']:<14}{r['psnr_full']:>10.2f}"
            f"{r['ssim_full']:>10.4f}{r['perceptual_full']:>10.4f}"
        )
    return "\n".join(out)


def save_ablation_figure(rows: list[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 0.55 * len(rows) + 1.5))
    names = [r["variant"] for r in rows][::-1]
    psnrs = [r["psnr_full"] for r in rows][::-1]
    ax.barh(names, psnrs, color="#ee854a")
    ax.set_xlabel("full-body PSNR (dB)")
    ax.set_title("ablation variants")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


# ---------------------------------------------------------------------------
# Inference grid


def save_infer_grid(ego: ImageTensor, mask: PoseMask, output: ImageTensor, path: str | Path) -> None:
    """Side-by-side ego | pose mask | synthesized frontal, with thin separators."""
    h = output.data.shape[1]
    panels = [
        ego.clamped().data,
        torch.stack([mask.data, mask.data, mask.data]) * 2.0 - 1.0,
        output.clamped().data,
    ]
    sep = torch.full((3, h, 2), -1.0)
    cells: list[torch.Tensor] = []
    for i, p in enumerate(panels):
        if i:
            cells.append(sep)
        cells.append(p)
    save_image(ImageTensor(torch.cat(cells, dim=2), (-1.0, 1.0)), path)
