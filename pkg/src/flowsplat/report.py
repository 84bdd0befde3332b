"""Report rendering: metric figures and delimited tables for a run."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .pipeline import umeyama_sim3


def save_trajectory_figure(path, est_poses, gt_poses=None):
    """Top-down (x, z) view of the camera path, aligned to GT when present."""
    est = np.stack([p.camera_center for p in est_poses])
    fig, ax = plt.subplots(figsize=(6, 5))
    if gt_poses is not None and len(gt_poses) == len(est_poses):
        gt = np.stack([p.camera_center for p in gt_poses])
        scale, rot, trans = umeyama_sim3(est, gt)
        est = (scale * (rot @ est.T)).T + trans
        ax.plot(gt[:, 0], gt[:, 2], "k-", lw=1.5, label="ground truth")
    ax.plot(est[:, 0], est[:, 2], "b--", lw=1.2, label="estimated")
    ax.scatter(est[:1, 0], est[:1, 2], c="g", s=30, zorder=5, label="start")
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize=8)
    ax.set_title("camera trajectory (top-down)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_psnr_figure(path, per_frame):
    idx = [f["index"] for f in per_frame]
    vals = [f["psnr"] for f in per_frame]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(idx, vals, "o-", ms=4)
    ax.set_xlabel("frame")
    ax.set_ylabel("PSNR [dB]")
    ax.grid(alpha=0.3)
    ax.set_title("per-frame PSNR")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_growth_figure(path, count_history):
    its = [c[0] for c in count_history]
    counts = [c[1] for c in count_history]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.step(its, counts, where="post")
    ax.set_xlabel("scene iteration")
    ax.set_ylabel("gaussian count")
    ax.grid(alpha=0.3)
    ax.set_title("progressive growing")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_per_frame_csv(path, per_frame):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "psnr_db", "ssim"])
        for f in per_frame:
            writer.writerow([f["index"], f"{f['psnr']:.6f}", f"{f['ssim']:.6f}"])


def save_report(out_dir, result=None, nvs=None, gt_poses=None):
    """Render all applicable figures and tables into out_dir/report/."""
    report_dir = Path(out_dir) / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if result is not None and result.trajectory:
        gt_for_plot = None
        if gt_poses is not None:
            indices = [i for i, _ in result.trajectory]
            if max(indices) < len(gt_poses):
                gt_for_plot = [gt_poses[i] for i in indices]
        save_trajectory_figure(
            report_dir / "trajectory.png", result.poses, gt_for_plot
        )
        written.append("trajectory.png")
        if result.count_history:
            save_growth_figure(report_dir / "gaussian_growth.png", result.count_history)
            written.append("gaussian_growth.png")
    if nvs is not None and nvs.get("per_frame"):
        save_psnr_figure(report_dir / "psnr_per_frame.png", nvs["per_frame"])
        write_per_frame_csv(report_dir / "per_frame_metrics.csv", nvs["per_frame"])
        written.extend(["psnr_per_frame.png", "per_frame_metrics.csv"])
    return written
