"""Run reports: delimited output plus matplotlib figures rendered to files."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


def write_csv(path, header: list[str], rows: list[list]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def save_line_figure(path, xs, ys, xlabel: str, ylabel: str, title: str,
                     labels: list[str] | None = None):
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    if labels is None:
        ax.plot(xs, ys, marker="o", markersize=3)
    else:
        for y, lab in zip(ys, labels):
            ax.plot(xs, y, marker="o", markersize=3, label=lab)
        ax.legend(fontsize=8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=10)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_figures(fig_dir: Path, loss_trace: list[float],
                     frame_rows: list[list]):
    """Loss curve for the initial fit, PSNR and payload size per frame."""
    fig_dir.mkdir(parents=True, exist_ok=True)
    if loss_trace:
        save_line_figure(
            fig_dir / "loss_curve.png", range(len(loss_trace)), loss_trace,
            "epoch", "loss", "initial-frame training loss",
        )
    if frame_rows:
        frames = [r[1] for r in frame_rows]
        save_line_figure(
            fig_dir / "stream_psnr.png", frames, [r[3] for r in frame_rows],
            "frame", "PSNR (dB)", "train-view PSNR per frame",
        )
        save_line_figure(
            fig_dir / "stream_bytes.png", frames, [r[5] for r in frame_rows],
            "frame", "bytes", "residual payload per frame",
        )


def eval_figures(fig_dir: Path, frames: list[int], psnr_means: list[float],
                 ssim_means: list[float], bytes_per_frame: list[int]):
    fig_dir.mkdir(parents=True, exist_ok=True)
    save_line_figure(
        fig_dir / "eval_psnr.png", frames, psnr_means,
        "frame", "PSNR (dB)", "held-out PSNR per frame",
    )
    save_line_figure(
        fig_dir / "eval_ssim.png", frames, ssim_means,
        "frame", "SSIM", "held-out SSIM per frame",
    )
    save_line_figure(
        fig_dir / "eval_storage.png", frames, bytes_per_frame,
        "frame", "bytes", "stream payload per frame",
    )
