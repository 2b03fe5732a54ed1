"""Report figures written to files (non-interactive matplotlib backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def loss_curve(records, path):
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key, label in (("loss_total", "total"), ("loss_photo", "photometric"),
                       ("loss_sil", "silhouette")):
        vals = np.array([r.get(key, np.nan) for r in records], dtype=np.float64)
        if np.any(vals > 0):
            ax.plot(steps, vals, label=label, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def frame_metrics(report, path):
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
    x = np.arange(len(report.names))
    a1.bar(x, report.psnr, color="tab:blue")
    a1.set_ylabel("PSNR (dB)")
    a2.bar(x, report.ssim, color="tab:orange")
    a2.set_ylabel("SSIM")
    a2.set_ylim(min(0.0, min(report.ssim, default=0.0)), 1.0)
    for ax in (a1, a2):
        ax.set_xticks(x)
        ax.set_xticklabels(report.names, rotation=60, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def weight_maps(weights, alpha, path):
    """One panel per basis: mixture weight over the visible surface (H, W, M)."""
    m = weights.shape[-1]
    cols = min(m, 4)
    rows = int(np.ceil(m / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows), squeeze=False)
    for i, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if i < m:
            img = np.where(alpha > 0.5, weights[..., i], np.nan)
            ax.imshow(img, vmin=0.0, vmax=1.0, cmap="viridis")
            ax.set_title(f"basis {i}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def comparison(reference, rendered, path, title=""):
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    err = np.abs(np.asarray(reference) - np.asarray(rendered)).mean(axis=-1)
    for ax, img, label in zip(axes, (reference, rendered, err), ("reference", "render", "|error|")):
        ax.imshow(np.clip(img, 0, 1), cmap=None if img.ndim == 3 else "magma")
        ax.set_title(label, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
