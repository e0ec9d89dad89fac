"""Image-quality metrics and the evaluation report."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .losses import ssim_loss

PSNR_CAP = 99.0


def _as_hwc(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give the 99 dB cap."""
    a, b = _as_hwc(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a, b) -> float:
    """Mean SSIM of two (H, W, 3) images; defined as 1 - ssim_loss on the same kernel."""
    a, b = _as_hwc(a, b)
    with dc.no_grad(), dc.precision(np.float64):
        loss = ssim_loss(dc.Tensor(a.transpose(2, 0, 1)), dc.Tensor(b.transpose(2, 0, 1)))
    return 1.0 - float(loss.data)


@dataclass
class EvalReport:
    views: list[int] = field(default_factory=list)
    psnrs: list[float] = field(default_factory=list)
    ssims: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, view: int, p: float, s: float):
        self.views.append(int(view))
        self.psnrs.append(float(p))
        self.ssims.append(float(s))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnrs)) if self.psnrs else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssims)) if self.ssims else float("nan")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["view", "psnr", "ssim"])
            for v, p, s in zip(self.views, self.psnrs, self.ssims):
                w.writerow([v, f"{p:.6f}", f"{s:.6f}"])
            w.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])
