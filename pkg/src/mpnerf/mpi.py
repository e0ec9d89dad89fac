"""Multiplane-image branch: encoder pyramid, depth-conditioned decoder, warped rendering.

The decoder follows a fixed layer table (convdown1/2, convup*_extra,
convup5..convup1, conv5..conv1, output4..output1).  All planes of one MPI are
decoded as a single batch; every plane sees the same encoder features and its
own depth embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .geometry import (
    Intrinsics,
    PlaneStack,
    Pose,
    plane_homography,
    relative_pose,
    warp_grid,
)
from .nerf import composite

EMBED_FREQS = 10
EMBED_DIM = 1 + 2 * EMBED_FREQS
ENCODER_CHANNELS = (96, 192, 384, 768)


def depth_embedding(z: float, near: float, far: float) -> np.ndarray:
    """Normalised disparity followed by 10 sin/cos frequency pairs (21 values)."""
    if not near <= z <= far:
        raise ValueError(f"plane depth {z} outside [{near}, {far}]")
    d = (1.0 / z - 1.0 / far) / (1.0 / near - 1.0 / far)
    out = [d]
    for j in range(EMBED_FREQS):
        out += [np.sin(2.0 ** j * np.pi * d), np.cos(2.0 ** j * np.pi * d)]
    return np.asarray(out, dtype=np.float32)


@dataclass(frozen=True)
class MpiConfig:
    n_planes: int = 16
    spacing: str = "depth"
    encoder_width: float = 0.25
    decoder_width: float = 0.25
    freeze_encoder: bool = False
    aux_heads: bool = False

    def encoder_channels(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(c * self.encoder_width))) for c in ENCODER_CHANNELS)

    def decoder_channels(self) -> dict[str, int]:
        base = {
            "convdown1": 512, "convdown2": 256, "convup1_extra": 256,
            "convup5": 256, "conv5": 256, "convup4": 128, "conv4": 128,
            "convup3": 64, "conv3": 64, "convup2": 32, "conv2": 32,
            "convup1": 16, "conv1": 16,
        }
        return {k: max(1, int(round(v * self.decoder_width))) for k, v in base.items()}


def _conv_init(rng, cout, cin, k):
    bound = 1.0 / np.sqrt(cin * k * k)
    w = rng.uniform(-bound, bound, (cout, cin, k, k)).astype(np.float32)
    b = rng.uniform(-bound, bound, (cout,)).astype(np.float32)
    return w, b


def decoder_table(cfg: MpiConfig) -> list[tuple[str, int, int, int]]:
    """(name, kernel, in_channels, out_channels) rows of the decoder."""
    e0, e1, e2, e3 = cfg.encoder_channels()
    c = cfg.decoder_channels()
    E = EMBED_DIM
    return [
        ("convdown1", 1, e3, c["convdown1"]),
        ("convdown2", 3, c["convdown1"], c["convdown2"]),
        ("convup1_extra", 3, c["convdown2"], c["convup1_extra"]),
        ("convup2_extra", 1, c["convup1_extra"], e3),
        ("convup5", 3, e3 + E, c["convup5"]),
        ("conv5", 3, c["convup5"] + e3 + E, c["conv5"]),
        ("convup4", 3, c["conv5"], c["convup4"]),
        ("conv4", 3, c["convup4"] + e2 + E, c["conv4"]),
        ("output4", 3, c["conv4"], 4),
        ("convup3", 3, c["conv4"], c["convup3"]),
        ("conv3", 3, c["convup3"] + e1 + E, c["conv3"]),
        ("output3", 3, c["conv3"], 4),
        ("convup2", 3, c["conv3"], c["convup2"]),
        ("conv2", 3, c["convup2"] + e0 + E, c["conv2"]),
        ("output2", 3, c["conv2"], 4),
        ("convup1", 3, c["conv2"], c["convup1"]),
        ("conv1", 3, c["convup1"], c["conv1"]),
        ("output1", 3, c["conv1"], 4),
    ]


def encoder_table(cfg: MpiConfig) -> list[tuple[str, int, int, int]]:
    e0, e1, e2, e3 = cfg.encoder_channels()
    return [
        ("conv1", 3, 3, e0),
        ("layer1", 3, e0, e1),
        ("layer2", 3, e1, e2),
        ("layer3", 3, e2, e3),
        ("layer4", 3, e3, e3),
    ]


def init_mpi(cfg: MpiConfig, rng: np.random.Generator) -> dict[str, dc.Tensor]:
    params: dict[str, dc.Tensor] = {}
    for prefix, table in (("enc/", encoder_table(cfg)), ("dec/", decoder_table(cfg))):
        for name, k, cin, cout in table:
            w, b = _conv_init(rng, cout, cin, k)
            trainable = not (prefix == "enc/" and cfg.freeze_encoder)
            params[f"{prefix}{name}.w"] = dc.Tensor(w, requires_grad=trainable, name=f"{prefix}{name}.w")
            params[f"{prefix}{name}.b"] = dc.Tensor(b, requires_grad=trainable, name=f"{prefix}{name}.b")
    return params


def trainable(params: dict[str, dc.Tensor]) -> dict[str, dc.Tensor]:
    return {k: v for k, v in params.items() if v.requires_grad}


def _conv(params, name, x, act=True):
    y = dc.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], padding="same")
    return dc.elu(y) if act else y


def required_multiple(h: int, w: int) -> int:
    """Divisibility the pyramid needs: 2**k, where k pools fit before a map reaches 1 pixel."""
    k = 0
    while k < 5 and min(h, w) >> k >= 2:
        k += 1
    return 1 << k


def _pool(x):
    # pyramids on tiny images stop halving once a map is a single pixel
    return dc.maxpool2(x) if min(x.shape[2:]) >= 2 else x


def encode(params, cfg: MpiConfig, image: np.ndarray) -> dict[str, dc.Tensor]:
    """Feature pyramid at strides 2, 4, 8, 16, 32 from an (H, W, 3) image."""
    h, w = image.shape[:2]
    m = required_multiple(h, w)
    if h % m or w % m:
        raise ValueError(f"image size {w}x{h} must be a multiple of {m}")
    x = dc.Tensor(np.asarray(image, dtype=np.float32).transpose(2, 0, 1)[None] - 0.5)
    feats = {}
    x = _pool(_conv(params, "enc/conv1", x))
    feats["conv1"] = x
    for name in ("layer1", "layer2", "layer3", "layer4"):
        x = _conv(params, f"enc/{name}", _pool(x))
        feats[name] = x
    return feats


def _with_embedding(parts, emb: np.ndarray, n: int):
    h, w = parts[0].shape[2:]
    full = []
    for p in parts:
        full.append(p if p.shape[0] == n else dc.broadcast_to(p, (n, *p.shape[1:])))
    full.append(dc.Tensor(np.broadcast_to(emb[:, :, None, None], (n, emb.shape[1], h, w))))
    return dc.concat_channels(full)


def _head(params, name, x):
    out = dc.conv2d(x, params[f"dec/{name}.w"], params[f"dec/{name}.b"], padding="same")
    return dc.sigmoid(out[:, 0:3]), dc.tabs(out[:, 3:4])


def _up_to(x, ref):
    target = ref if isinstance(ref, tuple) else ref.shape[2:]
    return dc.upsample2(x) if x.shape[2] < target[0] else x


def decode(params, cfg: MpiConfig, feats: dict[str, dc.Tensor], embeddings: np.ndarray,
           out_hw: tuple[int, int] | None = None):
    """RGB (N,3,H,W) in [0,1] and raw density (N,1,H,W) >= 0 for N depth embeddings.

    Returns a dict keyed by head name; only ``output1`` is computed unless
    auxiliary heads are enabled.
    """
    emb = np.asarray(embeddings, dtype=np.float32)
    n = emb.shape[0]
    if out_hw is None:
        out_hw = tuple(2 * s for s in feats["conv1"].shape[2:])
    p = params
    x = feats["layer4"]
    pooled = []
    for name in ("convdown1", "convdown2"):
        do_pool = min(x.shape[2:]) >= 2
        if do_pool:
            x = dc.maxpool2(x)
        pooled.append(do_pool)
        x = _conv(p, f"dec/{name}", x)
    for name, was_pooled in zip(("convup1_extra", "convup2_extra"), reversed(pooled)):
        x = _conv(p, f"dec/{name}", x)
        if was_pooled:
            x = dc.upsample2(x)
    x = _up_to(_conv(p, "dec/convup5", _with_embedding([x], emb, n)), feats["layer3"])
    x = _conv(p, "dec/conv5", _with_embedding([x, feats["layer3"]], emb, n))
    x = _up_to(_conv(p, "dec/convup4", x), feats["layer2"])
    x = _conv(p, "dec/conv4", _with_embedding([x, feats["layer2"]], emb, n))
    heads = {}
    if cfg.aux_heads:
        heads["output4"] = _head(p, "output4", x)
    x = _up_to(_conv(p, "dec/convup3", x), feats["layer1"])
    x = _conv(p, "dec/conv3", _with_embedding([x, feats["layer1"]], emb, n))
    if cfg.aux_heads:
        heads["output3"] = _head(p, "output3", x)
    x = _up_to(_conv(p, "dec/convup2", x), feats["conv1"])
    x = _conv(p, "dec/conv2", _with_embedding([x, feats["conv1"]], emb, n))
    if cfg.aux_heads:
        heads["output2"] = _head(p, "output2", x)
    x = _up_to(_conv(p, "dec/convup1", x), out_hw)
    x = _conv(p, "dec/conv1", x)
    heads["output1"] = _head(p, "output1", x)
    return heads


# ---------------------------------------------------------------------------
# MPI container and rendering


@dataclass
class Mpi:
    """N planes of RGB (N,3,H,W) and density (N,1,H,W) in the source frustum."""

    rgb: dc.Tensor
    sigma: dc.Tensor
    planes: PlaneStack
    intrinsics: Intrinsics
    pose: Pose

    def __post_init__(self):
        n = len(self.planes)
        if self.rgb.shape[0] != n or self.sigma.shape[0] != n:
            raise ValueError(f"MPI has {self.rgb.shape[0]} planes but the stack lists {n}")
        if np.any(self.sigma.data < 0):
            raise ValueError("MPI density must be non-negative")

    @property
    def n_planes(self) -> int:
        return len(self.planes)


def generate(params, cfg: MpiConfig, image: np.ndarray, planes: PlaneStack, near: float, far: float,
             intrinsics: Intrinsics, pose: Pose, heads: dict | None = None) -> Mpi:
    """Run the encoder once and decode one RGBA plane per depth.

    Density is the decoder's abs() output divided by the plane spacing, so the
    network predicts per-plane optical thickness.
    """
    feats = encode(params, cfg, image)
    emb = np.stack([depth_embedding(z, near, far) for z in planes.depths])
    out = decode(params, cfg, feats, emb, out_hw=image.shape[:2])
    if heads is not None:
        heads.update(out)
    rgb, raw = out["output1"]
    inv_delta = (1.0 / planes.deltas).astype(np.float32).reshape(-1, 1, 1, 1)
    return Mpi(rgb, raw * inv_delta, planes, intrinsics, pose)


@dataclass
class MpiRender:
    rgb: dc.Tensor
    mask: np.ndarray
    weights: dc.Tensor
    depth: dc.Tensor | None


def _is_identity(src_intr, src_pose, tgt_intr, tgt_pose) -> bool:
    return (src_intr == tgt_intr and np.array_equal(src_pose.R, tgt_pose.R)
            and np.array_equal(src_pose.t, tgt_pose.t))


def plane_warps(planes: PlaneStack, src_intr: Intrinsics, src_pose: Pose, tgt_intr: Intrinsics, tgt_pose: Pose):
    """Per-plane source index coordinates and in-bounds masks, each (N, H_t, W_t)."""
    R, t = relative_pose(src_pose, tgt_pose)
    xs, ys, masks = [], [], []
    for z in planes.depths:
        H = plane_homography(src_intr.K, tgt_intr.K, R, t, z)
        x, y, m = warp_grid(H, (tgt_intr.width, tgt_intr.height), (src_intr.width, src_intr.height))
        xs.append(x)
        ys.append(y)
        masks.append(m)
    return np.stack(xs), np.stack(ys), np.stack(masks)


def warp_mask(planes: PlaneStack, src_intr: Intrinsics, src_pose: Pose, tgt_intr: Intrinsics,
              tgt_pose: Pose) -> np.ndarray:
    """Target pixels whose warped source coordinate is in bounds for every plane."""
    if _is_identity(src_intr, src_pose, tgt_intr, tgt_pose):
        return np.ones((tgt_intr.height, tgt_intr.width), dtype=bool)
    return plane_warps(planes, src_intr, src_pose, tgt_intr, tgt_pose)[2].all(axis=0)


def render_target(mpi: Mpi, intrinsics: Intrinsics, pose: Pose, with_depth: bool = False) -> MpiRender:
    """Inverse-warp every plane into the target view and composite near to far."""
    n = mpi.n_planes
    h, w = intrinsics.height, intrinsics.width
    if _is_identity(mpi.intrinsics, mpi.pose, intrinsics, pose):
        rgba_rgb, rgba_sig = mpi.rgb, mpi.sigma
        mask = np.ones((h, w), dtype=bool)
    else:
        xs, ys, masks = plane_warps(mpi.planes, mpi.intrinsics, mpi.pose, intrinsics, pose)
        rgba = dc.concat_channels([mpi.rgb, mpi.sigma])
        warped = dc.grid_sample(rgba, xs, ys, masks)
        rgba_rgb, rgba_sig = warped[:, 0:3], warped[:, 3:4]
        mask = masks.all(axis=0)
    colors = dc.reshape(dc.transpose(rgba_rgb, (2, 3, 0, 1)), (h * w, n, 3))
    sigmas = dc.reshape(dc.transpose(rgba_sig, (2, 3, 0, 1)), (h * w, n))
    deltas = np.broadcast_to(mpi.planes.deltas.astype(np.float32), (h * w, n))
    depths = np.broadcast_to(mpi.planes.depths.astype(np.float32), (h * w, n)) if with_depth else None
    rgb, weights, depth = composite(colors, sigmas, deltas, depths)
    image = dc.transpose(dc.reshape(rgb, (h, w, 3)), (2, 0, 1))
    if depth is not None:
        depth = dc.reshape(depth, (h, w))
    return MpiRender(image, mask, weights, depth)


def expected_depth(mpi: Mpi, intrinsics: Intrinsics, pose: Pose) -> np.ndarray:
    with dc.no_grad():
        return render_target(mpi, intrinsics, pose, with_depth=True).depth.data
