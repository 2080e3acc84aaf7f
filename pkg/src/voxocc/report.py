"""Evaluation report rendering: text tables, a CSV summary, and figure files."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def _format_ray_table(name, result):
    lines = [f"{name} by threshold:"]
    for tau, val in zip(result["thresholds"], result["per_threshold"]):
        lines.append(f"  {tau:>5.1f} m : {val:.4f}")
    lines.append(f"  mean    : {result['mean']:.4f}")
    return lines


def render_text(summary) -> str:
    lines = []
    lines.append(f"samples evaluated: {len(summary['samples'])}")
    lines.append(f"excluded from class means: {', '.join(summary['eval_excluded']) or 'none'}")
    lines.append("")
    lines.append("per-class voxel IoU:")
    for name, val in sorted(summary["per_class_iou"].items()):
        lines.append(f"  {name:<22s} {val:.4f}")
    lines.append(f"mIoU    : {summary['miou']:.4f}")
    lines.append(f"IoU_occ : {summary['iou_occ']:.4f}")
    lines.append("")
    lines.extend(_format_ray_table("RayIoU", summary["rayiou"]))
    lines.append("")
    lines.extend(_format_ray_table("RayPQ", summary["raypq"]))
    lines.append("")
    return "\n".join(lines)


def write_summary_csv(summary, path) -> None:
    """Flat delimited summary: one (section, key, value) row per scalar."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["section", "key", "value"])
        w.writerow(["voxel", "miou", f"{summary['miou']:.6f}"])
        w.writerow(["voxel", "iou_occ", f"{summary['iou_occ']:.6f}"])
        for name, val in sorted(summary["per_class_iou"].items()):
            w.writerow(["voxel_class_iou", name, f"{val:.6f}"])
        for metric in ("rayiou", "raypq"):
            res = summary[metric]
            for tau, val in zip(res["thresholds"], res["per_threshold"]):
                w.writerow([metric, f"{tau:g}m", f"{val:.6f}"])
            w.writerow([metric, "mean", f"{res['mean']:.6f}"])
        w.writerow(["meta", "samples", len(summary["samples"])])


def write_figures(summary, fig_dir) -> list[Path]:
    """Render the report figures (PNG) next to the delimited output."""
    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    names = sorted(summary["per_class_iou"])
    values = [summary["per_class_iou"][n] for n in names]
    fig, ax = plt.subplots(figsize=(max(6, 0.45 * len(names) + 2), 4))
    ax.bar(range(len(names)), values, color="#4878d0")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=8)
    ax.set_ylabel("voxel IoU")
    ax.set_ylim(0, 1)
    ax.set_title(f"per-class IoU (mIoU {summary['miou']:.3f})")
    fig.tight_layout()
    path = fig_dir / "per_class_iou.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(5, 4))
    for metric, color in (("rayiou", "#4878d0"), ("raypq", "#d65f5f")):
        res = summary[metric]
        ax.plot(res["thresholds"], res["per_threshold"], marker="o", color=color,
                label=f"{metric} (mean {res['mean']:.3f})")
    ax.set_xlabel("depth threshold [m]")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend()
    ax.set_title("ray metrics by threshold")
    fig.tight_layout()
    path = fig_dir / "ray_metrics.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)
    return paths


def write_report(summary, out_dir) -> dict:
    """Write report.txt, summary.csv, and figures/ into out_dir. Returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text_path = out_dir / "report.txt"
    text_path.write_text(render_text(summary), encoding="utf-8")
    csv_path = out_dir / "summary.csv"
    write_summary_csv(summary, csv_path)
    figures = write_figures(summary, out_dir / "figures")
    return {"text": text_path, "csv": csv_path, "figures": figures}
