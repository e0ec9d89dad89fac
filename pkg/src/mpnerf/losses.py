"""Objective terms for both branches and their joint combination.

Image losses take channel-first (3, H, W) renders against (3, H, W) targets;
ray losses take (n, 3) colour batches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import diffcore as dc

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# a feature extractor maps a (3, H, W) tensor to (C, H, W) features
PerceptualExtractor = Optional[Callable[[dc.Tensor], dc.Tensor]]


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0
    l1: float = 1.0
    ssim: float = 1.0
    perceptual: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"guidance weight must be non-negative, got {self.lam}")


def _check_pair(a: dc.Tensor, b: dc.Tensor, what: str):
    if a.shape != b.shape:
        raise dc.ShapeError(f"{what}: prediction {a.shape} and target {b.shape} differ")


def nerf_mse(pred, target) -> dc.Tensor:
    """Mean over rays of the squared L2 colour error."""
    pred, target = dc.as_tensor(pred), dc.as_tensor(target)
    _check_pair(pred, target, "nerf_mse")
    if pred.shape[0] == 0:
        raise ValueError("nerf_mse: empty ray batch")
    return dc.mean(dc.tsum(dc.square(pred - target), axis=-1))


def _mask_weights(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape[1:]:
        raise dc.ShapeError(f"mask {mask.shape} does not match image {shape}")
    if not mask.any():
        raise ValueError("loss mask selects no pixels")
    return mask


def l1_loss(pred, target, mask=None) -> dc.Tensor:
    pred, target = dc.as_tensor(pred), dc.as_tensor(target)
    _check_pair(pred, target, "l1_loss")
    mask = _mask_weights(mask, pred.shape)
    diff = dc.tabs(pred - target)
    if mask is None:
        return dc.mean(diff)
    w = np.broadcast_to(mask, pred.shape).astype(dc._dt()) / (mask.sum() * pred.shape[0])
    return dc.tsum(diff * w)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _window_size(h: int, w: int) -> int:
    # images smaller than the standard window use the largest odd window that fits
    k = min(SSIM_WINDOW, h, w)
    return k if k % 2 else k - 1


def ssim_map(a, b) -> dc.Tensor:
    """Per-channel SSIM over all fully-inside windows, shape (C, H-k+1, W-k+1)."""
    a, b = dc.as_tensor(a), dc.as_tensor(b)
    _check_pair(a, b, "ssim")
    c, h, w = a.shape
    k = _window_size(h, w)
    if k < 1:
        raise ValueError(f"image {h}x{w} too small for SSIM")
    win = gaussian_window(k).astype(dc._dt())[None, None]
    x = dc.reshape(a, (c, 1, h, w))
    y = dc.reshape(b, (c, 1, h, w))

    def blur(t):
        return dc.conv2d(t, win, padding="valid")

    mx, my = blur(x), blur(y)
    mx2, my2, mxy = mx * mx, my * my, mx * my
    vx = blur(x * x) - mx2
    vy = blur(y * y) - my2
    cov = blur(x * y) - mxy
    num = (2.0 * mxy + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mx2 + my2 + SSIM_C1) * (vx + vy + SSIM_C2)
    s = num / den
    return dc.reshape(s, (c, *s.shape[2:]))


def valid_windows(mask: np.ndarray, k: int) -> np.ndarray:
    """Window positions whose k x k footprint lies entirely inside ``mask``."""
    win = np.lib.stride_tricks.sliding_window_view(np.asarray(mask, dtype=bool), (k, k))
    return win.all(axis=(-2, -1))


def ssim_loss(pred, target, mask=None) -> dc.Tensor:
    """1 - mean SSIM; with a mask only windows fully inside it are averaged."""
    pred, target = dc.as_tensor(pred), dc.as_tensor(target)
    mask = _mask_weights(mask, pred.shape)
    s = ssim_map(pred, target)
    if mask is None:
        return 1.0 - dc.mean(s)
    keep = valid_windows(mask, _window_size(*pred.shape[1:]))
    if not keep.any():
        logger.debug("ssim_loss: no SSIM window fits inside the mask; term skipped")
        return dc.Tensor(np.zeros((), dtype=dc._dt()))
    w = np.broadcast_to(keep, s.shape).astype(dc._dt()) / (keep.sum() * s.shape[0])
    return 1.0 - dc.tsum(s * w)


def random_conv_features(seed: int = 0, channels: int = 8) -> Callable[[dc.Tensor], dc.Tensor]:
    """Fixed random 3x3 conv + ELU features.  Not LPIPS; a stand-in for experiments."""
    rng = np.random.default_rng(seed)
    w = (rng.standard_normal((channels, 3, 3, 3)) / np.sqrt(27)).astype(np.float32)

    def extract(img: dc.Tensor) -> dc.Tensor:
        x = dc.reshape(img, (1, *img.shape))
        y = dc.elu(dc.conv2d(x, w.astype(dc._dt()), padding="same"))
        return dc.reshape(y, y.shape[1:])

    return extract


def perceptual_loss(pred, target, extractor: PerceptualExtractor, mask=None) -> dc.Tensor:
    if extractor is None:
        return dc.Tensor(np.zeros((), dtype=dc._dt()))
    fp = extractor(dc.as_tensor(pred))
    ft = dc.stop_gradient(extractor(dc.as_tensor(target)))
    return l1_loss(fp, ft, mask)


def mpi_total(pred, target, mask=None, weights: LossWeights = LossWeights(),
              extractor: PerceptualExtractor = None) -> tuple[dc.Tensor, dict[str, float]]:
    """L1 + SSIM loss + perceptual term over the (masked) target image."""
    l1 = l1_loss(pred, target, mask)
    ss = ssim_loss(pred, target, mask)
    total = weights.l1 * l1 + weights.ssim * ss
    parts = {"l1": l1.item(), "ssim": ss.item(), "perceptual": 0.0}
    if extractor is not None:
        pc = perceptual_loss(pred, target, extractor, mask)
        total = total + weights.perceptual * pc
        parts["perceptual"] = pc.item()
    return total, parts


def guidance_loss(nerf_colors, mpi_colors, mask_bits=None) -> dc.Tensor | None:
    """Squared colour error between NeRF rays and detached MPI pseudo-labels.

    Rows whose mask bit is false are dropped.  Returns None (and logs) when no
    rows remain, meaning the guidance term is skipped for this step.
    """
    nerf_colors = dc.as_tensor(nerf_colors)
    labels = mpi_colors.data if isinstance(mpi_colors, dc.Tensor) else np.asarray(mpi_colors)
    labels = dc.Tensor(labels)
    _check_pair(nerf_colors, labels, "guidance_loss")
    if mask_bits is not None:
        keep = np.asarray(mask_bits, dtype=bool).reshape(-1)
        if not keep.all():
            if not keep.any():
                logger.warning("guidance_loss: no mask-valid pixels; guidance skipped")
                return None
            rows = np.flatnonzero(keep)
            nerf_colors = dc.take_rows(nerf_colors, rows)
            labels = dc.Tensor(labels.data[rows])
    if nerf_colors.shape[0] == 0:
        logger.warning("guidance_loss: no mask-valid pixels; guidance skipped")
        return None
    return dc.mean(dc.tsum(dc.square(nerf_colors - labels), axis=-1))


def joint_objectives(parts: dict[str, dc.Tensor | None], lam: float) -> tuple[dc.Tensor, dc.Tensor | None]:
    """(L_G1, L_G2) = (nerf_mse + lam * guidance, mpi_total)."""
    if lam < 0:
        raise ValueError(f"guidance weight must be non-negative, got {lam}")
    g1 = parts["nerf_mse"]
    guide = parts.get("guidance")
    if guide is not None:
        g1 = g1 + lam * guide
    return g1, parts.get("mpi_total")
