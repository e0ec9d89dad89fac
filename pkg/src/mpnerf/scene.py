"""Scene manifests, PNG I/O, and a procedural aerial heightfield generator.

Synthetic scenes are heightfields over the square [-E, E]^2: a sum of random
sinusoid octaves, optionally raised by axis-aligned box "buildings".  Surfaces
are Lambertian under a fixed sun, so colours are view-independent and every
ground-truth render is multi-view consistent.  Images are stored as 8-bit RGB
PNG and mapped linearly to [0, 1] on load; there is no gamma handling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import GeometryError, Intrinsics, Pose, cast_rays, look_at, pixel_grid

KINDS = ("mountain", "town", "mixed")
SKY = np.array([0.62, 0.74, 0.88])
ENCODER_MULTIPLE = 32


class SceneError(ValueError):
    pass


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ViewRecord:
    image: str
    intrinsics: Intrinsics
    pose: Pose

    def __eq__(self, other) -> bool:
        return (isinstance(other, ViewRecord) and self.image == other.image
                and self.intrinsics == other.intrinsics and self.pose == other.pose)


@dataclass
class SceneManifest:
    views: list[ViewRecord]
    near: float
    far: float
    width: int
    height: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise SceneError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        for i, v in enumerate(self.views):
            if (v.intrinsics.width, v.intrinsics.height) != (self.width, self.height):
                raise SceneError(
                    f"view {i} intrinsics are {v.intrinsics.width}x{v.intrinsics.height}, "
                    f"manifest says {self.width}x{self.height}"
                )

    def __len__(self) -> int:
        return len(self.views)

    def to_dict(self) -> dict:
        views = [{"image": v.image,
                  "K": [float(x) for x in v.intrinsics.K.reshape(-1)],
                  "c2w": [float(x) for x in v.pose.matrix.reshape(-1)]} for v in self.views]
        out = {"views": views, "near": float(self.near), "far": float(self.far),
               "width": int(self.width), "height": int(self.height)}
        if self.meta:
            out["meta"] = self.meta
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SceneManifest":
        try:
            w, h = int(d["width"]), int(d["height"])
            views = []
            for i, v in enumerate(d["views"]):
                K, c2w = v["K"], v["c2w"]
                if len(K) != 9 or len(c2w) != 16:
                    raise SceneError(f"view {i}: K needs 9 floats and c2w 16 floats")
                try:
                    pose = Pose.from_matrix(c2w)
                except GeometryError as e:
                    raise SceneError(f"view {i}: invalid pose: {e}") from None
                views.append(ViewRecord(str(v["image"]), Intrinsics.from_matrix(K, w, h), pose))
            return cls(views, float(d["near"]), float(d["far"]), w, h, dict(d.get("meta", {})))
        except KeyError as e:
            raise SceneError(f"manifest is missing field {e}") from None

    def __eq__(self, other) -> bool:
        return (isinstance(other, SceneManifest) and self.views == other.views
                and self.near == other.near and self.far == other.far
                and self.width == other.width and self.height == other.height)


@dataclass
class Dataset:
    """A manifest with its decoded images (H, W, 3) in [0, 1] and optional depth maps."""

    manifest: SceneManifest
    images: list[np.ndarray]
    depths: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.images)

    def intrinsics(self, i: int) -> Intrinsics:
        return self.manifest.views[i].intrinsics

    def pose(self, i: int) -> Pose:
        return self.manifest.views[i].pose

    @property
    def near(self) -> float:
        return self.manifest.near

    @property
    def far(self) -> float:
        return self.manifest.far


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray):
    arr = np.asarray(img)
    if arr.ndim == 2:
        Image.fromarray(to_uint8(arr), mode="L").save(path)
    else:
        Image.fromarray(to_uint8(arr), mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_views(scene_dir, dataset: Dataset):
    """Write manifest.json, one PNG per view and (if present) depths.npz."""
    out = Path(scene_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec, img in zip(dataset.manifest.views, dataset.images):
        write_png(out / rec.image, img)
    if dataset.depths is not None:
        np.savez_compressed(out / "depths.npz", depths=np.stack(dataset.depths).astype(np.float32))
    (out / "manifest.json").write_text(json.dumps(dataset.manifest.to_dict(), indent=2) + "\n")


def load_scene(path) -> Dataset:
    """Load a scene directory (or its manifest.json)."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise SceneError(f"manifest not found: {manifest_path}")
    try:
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SceneError(f"{manifest_path}: invalid JSON ({e})") from None
    manifest = SceneManifest.from_dict(data)
    root = manifest_path.parent
    images = []
    for rec in manifest.views:
        p = root / rec.image
        if not p.exists():
            raise SceneError(f"image not found: {p}")
        img = read_png(p)
        if img.shape[:2] != (manifest.height, manifest.width):
            raise SceneError(
                f"{rec.image} is {img.shape[1]}x{img.shape[0]}, manifest says {manifest.width}x{manifest.height}"
            )
        images.append(img)
    depths = None
    if (root / "depths.npz").exists():
        with np.load(root / "depths.npz") as z:
            depths = list(z["depths"])
    return Dataset(manifest, images, depths)


def split_views(n_views: int, protocol) -> tuple[list[int], list[int]]:
    """Train/test ids for '3view', '5view' or a training fraction in (0, 1)."""
    fixed = {"3view": [0, 7, 15], "5view": [0, 7, 10, 15, 20]}
    if isinstance(protocol, str) and protocol in fixed:
        if n_views != 21:
            raise SceneError(f"protocol {protocol} needs 21 views, scene has {n_views}")
        train = fixed[protocol]
    else:
        try:
            f = float(protocol)
        except (TypeError, ValueError):
            raise SceneError(f"unknown protocol {protocol!r}") from None
        if not 0 < f < 1:
            raise SceneError(f"training fraction must lie in (0, 1) so the test set is non-empty, got {f}")
        k = min(n_views - 1, max(2, int(round(f * n_views))))
        train = sorted(set(np.round(np.linspace(0, n_views - 1, k)).astype(int).tolist()))
    test = [i for i in range(n_views) if i not in train]
    return list(train), test


# ---------------------------------------------------------------------------
# procedural heightfield


@dataclass
class HeightfieldScene:
    seed: int
    kind: str
    extent: float
    octaves: np.ndarray        # (n, 5): amplitude, frequency, direction x, direction y, phase
    boxes: np.ndarray          # (m, 5): x0, x1, y0, y1, top height
    box_albedo: np.ndarray     # (m, 3)
    texture: np.ndarray        # (res, res, 3) albedo over [-extent, extent]^2
    sun: np.ndarray

    @property
    def max_height(self) -> float:
        top = float(np.abs(self.octaves[:, 0]).sum())
        if len(self.boxes):
            top = max(top, float(self.boxes[:, 4].max()))
        return top

    def terrain(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        h = np.zeros(np.broadcast(x, y).shape)
        for a, f, dx, dy, ph in self.octaves:
            h += a * np.sin(f * (dx * x + dy * y) + ph)
        return h

    def box_index(self, x, y) -> np.ndarray:
        """Index of the tallest box covering (x, y), or -1."""
        idx = np.full(np.broadcast(x, y).shape, -1)
        best = np.full(idx.shape, -np.inf)
        for k, (x0, x1, y0, y1, top) in enumerate(self.boxes):
            inside = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1) & (top > best)
            idx[inside] = k
            best[inside] = top
        return idx

    def height(self, x, y) -> np.ndarray:
        h = self.terrain(x, y)
        for x0, x1, y0, y1, top in self.boxes:
            inside = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
            h = np.where(inside, np.maximum(h, top), h)
        return h

    def albedo(self, x, y, z=None) -> np.ndarray:
        res = self.texture.shape[0]
        gx = np.clip((x + self.extent) / (2 * self.extent) * (res - 1), 0, res - 1)
        gy = np.clip((y + self.extent) / (2 * self.extent) * (res - 1), 0, res - 1)
        x0 = np.minimum(np.floor(gx).astype(int), res - 2)
        y0 = np.minimum(np.floor(gy).astype(int), res - 2)
        fx, fy = (gx - x0)[..., None], (gy - y0)[..., None]
        t = self.texture
        col = ((1 - fx) * (1 - fy) * t[y0, x0] + fx * (1 - fy) * t[y0, x0 + 1]
               + (1 - fx) * fy * t[y0 + 1, x0] + fx * fy * t[y0 + 1, x0 + 1])
        if len(self.boxes):
            k = self.box_index(x, y)
            on_box = k >= 0
            if z is not None:
                on_box &= np.asarray(z) > self.terrain(x, y) + 1e-6
            col = np.where(on_box[..., None], self.box_albedo[np.maximum(k, 0)] * (0.8 + 0.2 * col), col)
        return col

    def normal(self, x, y, eps: float = 1e-4) -> np.ndarray:
        hx = (self.height(x + eps, y) - self.height(x - eps, y)) / (2 * eps)
        hy = (self.height(x, y + eps) - self.height(x, y - eps)) / (2 * eps)
        # box walls give huge slopes; clamp so the shading stays a plain wall normal
        hx, hy = np.clip(hx, -1e3, 1e3), np.clip(hy, -1e3, 1e3)
        n = np.stack([-hx, -hy, np.ones_like(hx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def shade(self, points: np.ndarray) -> np.ndarray:
        x, y, z = points[..., 0], points[..., 1], points[..., 2]
        lam = np.clip(self.normal(x, y) @ self.sun, 0.0, 1.0)
        return self.albedo(x, y, z) * (0.35 + 0.65 * lam)[..., None]


def _smooth_texture(rng, res: int, n_waves: int = 12) -> np.ndarray:
    u = np.linspace(-1, 1, res)
    X, Y = np.meshgrid(u, u)
    out = np.empty((res, res, 3))
    base = rng.uniform(0.3, 0.6, 3)
    for c in range(3):
        acc = np.zeros((res, res))
        for _ in range(n_waves):
            f = rng.uniform(2.0, 14.0)
            th = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(0.3, 1.0) / np.sqrt(f) * np.sin(f * (np.cos(th) * X + np.sin(th) * Y) + rng.uniform(0, 2 * np.pi))
        out[..., c] = base[c] + 0.18 * acc / np.sqrt(n_waves) * 3
    return np.clip(out, 0.05, 0.95)


def heightfield(seed: int, kind: str = "mixed", extent: float = 4.0, res: int = 128) -> HeightfieldScene:
    if kind not in KINDS:
        raise SceneError(f"unknown scene kind {kind!r}; choose from {', '.join(KINDS)}")
    rng = np.random.default_rng(seed)
    amp = {"mountain": 0.28, "town": 0.05, "mixed": 0.16}[kind]
    octaves = []
    freq = 1.2
    for _ in range(5):
        th = rng.uniform(0, 2 * np.pi)
        octaves.append([amp, freq, np.cos(th), np.sin(th), rng.uniform(0, 2 * np.pi)])
        amp *= 0.5
        freq *= 2.0
    octaves = np.array(octaves)
    boxes, box_albedo = np.zeros((0, 5)), np.zeros((0, 3))
    if kind in ("town", "mixed"):
        n = 14 if kind == "town" else 8
        span = 1.3 if kind == "town" else 1.1
        rows = []
        for _ in range(n):
            cx, cy = rng.uniform(-span, span, 2)
            if kind == "mixed":
                cx = abs(cx)  # buildings on one half, hills on the other
            w, d = rng.uniform(0.15, 0.4, 2)
            rows.append([cx - w / 2, cx + w / 2, cy - d / 2, cy + d / 2, rng.uniform(0.15, 0.45)])
        boxes = np.array(rows)
        box_albedo = rng.uniform(0.25, 0.95, (n, 3))
    texture = _smooth_texture(rng, res)
    sun = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), 1.0])
    return HeightfieldScene(seed, kind, extent, octaves, boxes, box_albedo, texture, sun / np.linalg.norm(sun))


def _slab_interval(o, d, extent, zlo, zhi):
    """Ray parameter interval inside the box [-E,E]^2 x [zlo, zhi]."""
    lo = np.array([-extent, -extent, zlo])
    hi = np.array([extent, extent, zhi])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.max(np.minimum(t1, t2), axis=-1)
    tmax = np.min(np.maximum(t1, t2), axis=-1)
    return np.maximum(tmin, 0.0), tmax


def intersect(scene: HeightfieldScene, origins: np.ndarray, dirs: np.ndarray, step: float = 0.02,
              iters: int = 40) -> tuple[np.ndarray, np.ndarray]:
    """Ray march + bisection.  Returns (t, hit) with t the distance to the surface."""
    zlo = -np.abs(scene.octaves[:, 0]).sum() - 1e-3
    t0, t1 = _slab_interval(origins, dirs, scene.extent, zlo, scene.max_height + 1e-3)
    n = len(origins)
    t_hit = np.full(n, np.inf)
    hit = np.zeros(n, dtype=bool)
    active = t0 < t1

    def above(t, idx):
        p = origins[idx] + dirs[idx] * t[:, None]
        return p[:, 2] - scene.height(p[:, 0], p[:, 1])

    t = t0.copy()
    while active.any():
        idx = np.flatnonzero(active)
        t_next = np.minimum(t[idx] + step, t1[idx])
        f = above(t_next, idx)
        crossed = f <= 0
        done = ~crossed & (t_next >= t1[idx])
        # bisection between the last point above and the first below
        if crossed.any():
            ci = idx[crossed]
            a, b = t[ci].copy(), t_next[crossed].copy()
            for _ in range(iters):
                m = 0.5 * (a + b)
                below = above(m, ci) <= 0
                b = np.where(below, m, b)
                a = np.where(below, a, m)
            t_hit[ci] = b
            hit[ci] = True
            active[ci] = False
        active[idx[done]] = False
        t[idx] = t_next
    return t_hit, hit


def render_gt(scene: HeightfieldScene, intr: Intrinsics, pose: Pose, far: float | None = None):
    """Ground-truth (H, W, 3) image and (H, W) distance-along-ray depth.

    Sky pixels get a constant colour and depth ``far`` (inf when not given).
    """
    rays = cast_rays(intr, pose, pixel_grid(intr))
    t, hit = intersect(scene, rays.origins, rays.directions)
    img = np.broadcast_to(SKY, (len(t), 3)).copy()
    if hit.any():
        pts = rays.origins[hit] + rays.directions[hit] * t[hit, None]
        img[hit] = scene.shade(pts)
    depth = np.where(hit, t, np.inf if far is None else far)
    return img.reshape(intr.height, intr.width, 3), depth.reshape(intr.height, intr.width)


def arc_poses(n_views: int = 21, radius: float = 3.2, azimuth_span: float = 60.0,
              elevation: float = 55.0, swing: float = 8.0, target=(0.0, 0.0, 0.0)) -> list[Pose]:
    """Cameras sweeping an azimuth arc while the elevation swings up and down."""
    poses = []
    for k in range(n_views):
        s = k / max(1, n_views - 1)
        az = np.radians(-azimuth_span / 2 + azimuth_span * s) - np.pi / 2
        el = np.radians(elevation + swing * np.sin(2 * np.pi * k / 7.0))
        eye = np.array(target) + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at(eye, target))
    return poses


def make_scene(seed: int = 0, kind: str = "mixed", size: int = 64, n_views: int = 21,
               fov_deg: float = 48.0) -> tuple[HeightfieldScene, Dataset]:
    """Procedural scene plus its rendered views, near/far from depth bounds with 10% margin."""
    if size < 16 or size % ENCODER_MULTIPLE:
        raise SceneError(f"image size must be >= 16 and a multiple of {ENCODER_MULTIPLE}, got {size}")
    scene = heightfield(seed, kind)
    intr = Intrinsics.from_fov(size, size, fov_deg)
    poses = arc_poses(n_views)
    images, depths = [], []
    for pose in poses:
        img, dep = render_gt(scene, intr, pose)
        images.append(img.astype(np.float32))
        depths.append(dep)
    finite = np.concatenate([d[np.isfinite(d)] for d in depths])
    if finite.size == 0:
        raise SceneError("no view sees the terrain")
    near, far = 0.9 * float(finite.min()), 1.1 * float(finite.max())
    depths = [np.where(np.isfinite(d), d, far).astype(np.float32) for d in depths]
    views = [ViewRecord(f"view_{i:03d}.png", intr, p) for i, p in enumerate(poses)]
    manifest = SceneManifest(views, near, far, size, size, {"seed": seed, "kind": kind})
    return scene, Dataset(manifest, images, depths)
