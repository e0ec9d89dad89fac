"""Radiance-field branch: positional encoding, field MLP, ray sampling, compositing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .geometry import Intrinsics, Pose, cast_rays, pixel_grid


@dataclass(frozen=True)
class PosEncConfig:
    l_pos: int = 10
    l_dir: int = 4
    include_identity: bool = True

    def __post_init__(self):
        if self.l_pos < 0 or self.l_dir < 0:
            raise ValueError("frequency counts must be non-negative")

    def out_dim(self, in_dim: int, n_freq: int) -> int:
        return in_dim * ((1 if self.include_identity else 0) + 2 * n_freq)


def posenc(v: np.ndarray, n_freq: int, include_identity: bool = True) -> np.ndarray:
    """[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)]."""
    v = np.asarray(v, dtype=np.float32)
    parts = [v] if include_identity else []
    for j in range(n_freq):
        arg = (2.0 ** j * np.pi) * v
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1).astype(np.float32)


@dataclass(frozen=True)
class NerfConfig:
    depth: int = 8
    width: int = 256
    skip: int | None = 5
    encoding: PosEncConfig = field(default_factory=PosEncConfig)
    n_coarse: int = 64
    n_fine: int = 32
    two_networks: bool = False

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be positive")
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ValueError("need n_coarse >= 1 and n_fine >= 0")


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(np.float32)
    b = rng.uniform(-bound, bound, (fan_out,)).astype(np.float32)
    return w, b


def _init_network(cfg: NerfConfig, rng: np.random.Generator, prefix: str, zero_heads: bool) -> dict[str, dc.Tensor]:
    enc = cfg.encoding
    in_x = enc.out_dim(3, enc.l_pos)
    in_d = enc.out_dim(3, enc.l_dir)
    params: dict[str, dc.Tensor] = {}

    def add(name, fan_in, fan_out, zero=False):
        w, b = _linear_init(rng, fan_in, fan_out)
        if zero:
            w[:] = 0
            b[:] = 0
        params[f"{prefix}{name}.w"] = dc.parameter(w, f"{prefix}{name}.w")
        params[f"{prefix}{name}.b"] = dc.parameter(b, f"{prefix}{name}.b")

    for i in range(cfg.depth):
        fan_in = in_x if i == 0 else cfg.width
        if cfg.skip is not None and i == cfg.skip and i > 0:
            fan_in += in_x
        add(f"layer{i}", fan_in, cfg.width)
    add("sigma", cfg.width, 1, zero_heads)
    add("feature", cfg.width, cfg.width)
    add("dir", cfg.width + in_d, max(cfg.width // 2, 1))
    add("rgb", max(cfg.width // 2, 1), 3, zero_heads)
    return params


def init_field(cfg: NerfConfig, rng: np.random.Generator, zero_heads: bool = False) -> dict[str, dc.Tensor]:
    if cfg.two_networks:
        params = _init_network(cfg, rng, "coarse/", zero_heads)
        params.update(_init_network(cfg, rng, "fine/", zero_heads))
        return params
    return _init_network(cfg, rng, "", zero_heads)


def _net_prefix(cfg: NerfConfig, stage: str) -> str:
    return f"{stage}/" if cfg.two_networks else ""


def field_query(params: dict[str, dc.Tensor], cfg: NerfConfig, x, d, stage: str = "fine"):
    """Colour in [0,1]^3 and density >= 0 at normalised positions ``x`` seen along ``d``."""
    x = np.asarray(x, dtype=np.float32)
    d = np.asarray(d, dtype=np.float32)
    if not (np.isfinite(x).all() and np.isfinite(d).all()):
        raise FloatingPointError("field_query: non-finite position or direction")
    p = _net_prefix(cfg, stage)
    enc = cfg.encoding
    ex = dc.Tensor(posenc(x, enc.l_pos, enc.include_identity))
    ed = dc.Tensor(posenc(d, enc.l_dir, enc.include_identity))
    h = ex
    for i in range(cfg.depth):
        if cfg.skip is not None and i == cfg.skip and i > 0:
            h = dc.concat([h, ex], axis=1)
        h = dc.relu(h @ params[f"{p}layer{i}.w"] + params[f"{p}layer{i}.b"])
    sigma = dc.softplus(h @ params[f"{p}sigma.w"] + params[f"{p}sigma.b"])
    feat = h @ params[f"{p}feature.w"] + params[f"{p}feature.b"]
    hd = dc.relu(dc.concat([feat, ed], axis=1) @ params[f"{p}dir.w"] + params[f"{p}dir.b"])
    rgb = dc.sigmoid(hd @ params[f"{p}rgb.w"] + params[f"{p}rgb.b"])
    return rgb, dc.reshape(sigma, (-1,))


# ---------------------------------------------------------------------------
# sampling


def stratified_sample(near, far, n_rays: int, n_samples: int, rng: np.random.Generator | None) -> np.ndarray:
    """One draw per equal-width bin of [near, far]; ``rng=None`` pins draws to bin midpoints."""
    if n_samples < 1:
        raise ValueError("need at least one sample per ray")
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,))[:, None]
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))[:, None]
    u = np.full((n_rays, n_samples), 0.5) if rng is None else rng.random((n_rays, n_samples))
    edges = np.arange(n_samples)[None, :]
    return near + (far - near) * (edges + u) / n_samples


def _bin_edges(depths: np.ndarray, near, far) -> np.ndarray:
    n = depths.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n,))[:, None]
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n,))[:, None]
    mids = 0.5 * (depths[:, 1:] + depths[:, :-1])
    return np.concatenate([near, mids, far], axis=1)


def sample_pdf(depths: np.ndarray, weights: np.ndarray, n_fine: int, rng: np.random.Generator | None,
               near, far) -> np.ndarray:
    """Inverse-transform draws from the piecewise-constant PDF over the coarse bins.

    Bin i spans the midpoints around coarse sample i (near/far at the ends);
    its probability is proportional to weights[:, i].  Rays with all-zero
    weights fall back to a uniform PDF.
    """
    depths = np.asarray(depths, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("sample weights must be non-negative")
    n_rays, m = depths.shape
    edges = _bin_edges(depths, near, far)
    total = w.sum(axis=1, keepdims=True)
    w = np.where(total > 0, w, 1.0)
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (n_rays, n_fine)).copy()
    else:
        u = rng.random((n_rays, n_fine))
    # first bin whose right cdf edge exceeds u; zero-mass bins are never chosen
    idx = (cdf[:, None, 1:] <= u[:, :, None]).sum(axis=2)
    idx = np.clip(idx, 0, m - 1)
    lo_cdf = np.take_along_axis(cdf, idx, axis=1)
    p = np.take_along_axis(pdf, idx, axis=1)
    frac = np.where(p > 0, (u - lo_cdf) / np.where(p > 0, p, 1.0), 0.5)
    frac = np.clip(frac, 0.0, 1.0)
    lo = np.take_along_axis(edges, idx, axis=1)
    hi = np.take_along_axis(edges, idx + 1, axis=1)
    return lo + frac * (hi - lo)


def hierarchical_sample(depths, weights, n_fine: int, rng, near, far) -> np.ndarray:
    """Coarse depths merged with ``n_fine`` importance draws, sorted per ray."""
    fine = sample_pdf(depths, weights, n_fine, rng, near, far)
    return np.sort(np.concatenate([np.asarray(depths, dtype=np.float64), fine], axis=1), axis=1)


def sample_deltas(depths: np.ndarray, far) -> np.ndarray:
    depths = np.asarray(depths, dtype=np.float64)
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (depths.shape[0],))[:, None]
    return np.concatenate([np.diff(depths, axis=1), far - depths[:, -1:]], axis=1)


# ---------------------------------------------------------------------------
# compositing


_TRI_CACHE: dict[int, np.ndarray] = {}


def _exclusive_prefix(m: int) -> np.ndarray:
    tri = _TRI_CACHE.get(m)
    if tri is None:
        tri = np.triu(np.ones((m, m), dtype=np.float32), k=1)
        _TRI_CACHE[m] = tri
    return tri


def composite(colors, sigmas, deltas, depths=None):
    """Front-to-back volume compositing along the last sample axis.

    colors (R, M, 3), sigmas (R, M), deltas (R, M); returns (rgb (R,3),
    weights (R,M), expected depth (R,) or None).
    """
    colors = dc.as_tensor(colors)
    sigmas = dc.as_tensor(sigmas)
    deltas = np.asarray(deltas, dtype=np.float32)
    m = sigmas.shape[-1]
    optical = sigmas * deltas
    # T_i = exp(-sum_{j<i} sigma_j delta_j)
    trans = dc.exp(dc.neg(optical @ _exclusive_prefix(m)))
    alpha = 1.0 - dc.exp(dc.neg(optical))
    weights = trans * alpha
    rgb = dc.tsum(dc.reshape(weights, (*weights.shape, 1)) * colors, axis=-2)
    depth = None
    if depths is not None:
        depth = dc.tsum(weights * np.asarray(depths, dtype=np.float32), axis=-1)
    return rgb, weights, depth


# ---------------------------------------------------------------------------
# ray rendering


@dataclass(frozen=True)
class SceneBounds:
    lo: np.ndarray
    hi: np.ndarray

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0


@dataclass
class RenderResult:
    rgb: dc.Tensor
    depth: dc.Tensor
    weights: dc.Tensor
    depths: np.ndarray
    rgb_coarse: dc.Tensor | None = None


def _query_along(params, cfg, bounds, origins, dirs, t, stage):
    n, m = t.shape
    pts = origins[:, None, :] + dirs[:, None, :] * t[..., None]
    x = bounds.normalize(pts.reshape(-1, 3))
    d = np.broadcast_to(dirs[:, None, :], (n, m, 3)).reshape(-1, 3)
    rgb, sigma = field_query(params, cfg, x, d, stage)
    return dc.reshape(rgb, (n, m, 3)), dc.reshape(sigma, (n, m))


def render_rays(params, cfg: NerfConfig, origins, dirs, near: float, far: float,
                bounds: SceneBounds, rng: np.random.Generator | None) -> RenderResult:
    """Coarse pass, importance resampling, and the final composite for a ray batch.

    With a shared network the coarse pass only places the fine samples and is
    evaluated without a graph; the two-network variant keeps the coarse render
    differentiable so it can be supervised too.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(origins)
    t_c = stratified_sample(near, far, n, cfg.n_coarse, rng)
    d_c = sample_deltas(t_c, far)
    rgb_coarse = None
    if cfg.two_networks:
        c_rgb, c_sig = _query_along(params, cfg, bounds, origins, dirs, t_c, "coarse")
        rgb_coarse, w_c, _ = composite(c_rgb, c_sig, d_c)
        w_coarse = w_c.data
    else:
        with dc.no_grad():
            c_rgb, c_sig = _query_along(params, cfg, bounds, origins, dirs, t_c, "fine")
            _, w_c, _ = composite(c_rgb, c_sig, d_c)
        w_coarse = w_c.data
    if cfg.n_fine > 0:
        t = hierarchical_sample(t_c, w_coarse, cfg.n_fine, rng, near, far)
    else:
        t = t_c
    deltas = sample_deltas(t, far)
    f_rgb, f_sig = _query_along(params, cfg, bounds, origins, dirs, t, "fine")
    rgb, weights, depth = composite(f_rgb, f_sig, deltas, t)
    return RenderResult(rgb, depth, weights, t, rgb_coarse)


def render_image(params, cfg: NerfConfig, intr: Intrinsics, pose: Pose, near: float, far: float,
                 bounds: SceneBounds, chunk: int = 4096):
    """Deterministic full-image render (bin-midpoint sampling); returns (H,W,3) rgb and (H,W) depth."""
    pix = pixel_grid(intr)
    rays = cast_rays(intr, pose, pix, near, far)
    rgb = np.empty((len(pix), 3), dtype=np.float32)
    depth = np.empty(len(pix), dtype=np.float32)
    with dc.no_grad():
        for s in range(0, len(pix), chunk):
            out = render_rays(params, cfg, rays.origins[s:s + chunk], rays.directions[s:s + chunk],
                              near, far, bounds, None)
            rgb[s:s + chunk] = out.rgb.data
            depth[s:s + chunk] = out.depth.data
    return rgb.reshape(intr.height, intr.width, 3), depth.reshape(intr.height, intr.width)
