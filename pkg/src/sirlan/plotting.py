"""Report figures rendered to files with the Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_ced(curves: dict, path, threshold: float | None = None) -> Path:
    """``curves`` maps a label to a list of ``(error, fraction)`` pairs."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, samples in curves.items():
        xs, ys = np.asarray(samples, dtype=float).T
        ax.step(xs, ys, where="post", label=label)
    if threshold is not None:
        ax.set_xlim(0, threshold)
    ax.set_ylim(0, 1)
    ax.set_xlabel("normalized mean error")
    ax.set_ylabel("fraction of images")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_series(xs, series: dict, path, xlabel: str, ylabel: str = "mean NME",
                logx: bool = False) -> Path:
    """One line per entry of ``series`` (label to y values) against ``xs``."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, ys in series.items():
        ax.plot(xs[:len(ys)], ys, marker="o", label=label)
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    if len(series) > 1:
        ax.legend()
    return _save(fig, path)


def plot_loss(records, path) -> Path:
    """Training and validation loss from TrainLogRecord dicts."""
    fig, ax = plt.subplots(figsize=(5, 4))
    tags = sorted({r.get("stage", "") for r in records})  # CR logs carry a stage tag
    for tag in tags:
        rs = [r for r in records if r.get("stage", "") == tag]
        suffix = f" {tag}" if tag else ""
        ax.plot([r["step"] for r in rs], [r["mean_batch_loss"] for r in rs], label="train" + suffix)
        val = [r for r in rs if r.get("val_loss") is not None]
        if val:
            ax.plot([r["step"] for r in val], [r["val_loss"] for r in val], "--", label="val" + suffix)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_sample_cloud(pixels, truth, sampled, branches, path) -> Path:
    """Sampled landmark sets over a face, coloured by mixture branch."""
    fig, ax = plt.subplots(figsize=(5, 5))
    img = np.asarray(pixels)
    ax.imshow(img[..., 0] if img.shape[-1] == 1 else img, cmap="gray", vmin=0, vmax=1)
    for theta, branch in zip(sampled, branches):
        pts = np.asarray(theta)
        ax.scatter(pts[:, 0], pts[:, 1], s=4, alpha=0.4,
                   color="tab:orange" if branch == "mean" else "tab:blue")
    gt = np.asarray(truth)
    ax.scatter(gt[:, 0], gt[:, 1], s=30, marker="x", color="red", label="ground truth")
    ax.scatter([], [], s=8, color="tab:blue", label="around truth")
    ax.scatter([], [], s=8, color="tab:orange", label="around mean")
    ax.legend(loc="upper right", fontsize=7)
    ax.set_axis_off()
    return _save(fig, path)
