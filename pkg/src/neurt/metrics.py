"""PSNR and SSIM, plus a per-frame report with a JSON and a table rendering."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """10 log10(1 / MSE) for images in [0, 1]; identical images give the 99 dB cap."""
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, g):
    """Separable correlation keeping only fully-covered (valid) positions."""
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    h = len(g) // 2
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim(a, b, data_range=1.0):
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), mean over the valid map and channels."""
    a, b = _check(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def iou(mask_a, mask_b):
    a = np.asarray(mask_a) > 0.5
    b = np.asarray(mask_b) > 0.5
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


@dataclass
class MetricReport:
    names: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    iou: list = field(default_factory=list)

    def add(self, name, p, s, i=None):
        self.names.append(name)
        self.psnr.append(float(p))
        self.ssim.append(float(s))
        self.iou.append(None if i is None else float(i))

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    @property
    def mean_iou(self):
        vals = [v for v in self.iou if v is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self):
        return {
            "frames": [{"name": n, "psnr": p, "ssim": s, "iou": i}
                       for n, p, s, i in zip(self.names, self.psnr, self.ssim, self.iou)],
            "mean": {"psnr": self.mean_psnr, "ssim": self.mean_ssim, "iou": self.mean_iou},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def rows(self):
        """Delimited rows (header first) for CSV export."""
        out = [["frame", "psnr", "ssim", "iou"]]
        for n, p, s, i in zip(self.names, self.psnr, self.ssim, self.iou):
            out.append([n, f"{p:.4f}", f"{s:.6f}", "" if i is None else f"{i:.6f}"])
        mi = self.mean_iou
        out.append(["mean", f"{self.mean_psnr:.4f}", f"{self.mean_ssim:.6f}",
                    "" if mi is None else f"{mi:.6f}"])
        return out

    def table(self):
        rows = self.rows()
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)
