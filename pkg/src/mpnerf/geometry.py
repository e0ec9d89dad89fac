"""Pinhole cameras, ray casting, plane stacks and per-plane homographies.

Camera frames follow the OpenCV convention: +x right, +y down, +z forward.
Pixel (u, v) covers the continuous square [u, u+1) x [v, v+1); its centre sits
at (u + 0.5, v + 0.5).  "Index" coordinates drop the half-pixel offset so that
pixel centres land on integers, which is what bilinear gathers use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation, Slerp


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "Intrinsics":
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)

    @classmethod
    def from_matrix(cls, K, width: int, height: int) -> "Intrinsics":
        K = np.asarray(K, dtype=np.float64).reshape(3, 3)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), int(width), int(height))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform: x_world = R @ x_cam + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise GeometryError("pose contains non-finite values")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-5):
            raise GeometryError("rotation is not orthonormal (R^T R != I)")
        det = np.linalg.det(R)
        if abs(det - 1.0) > 1e-5:
            raise GeometryError(f"rotation determinant is {det:.6f}, expected +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, c2w) -> "Pose":
        M = np.asarray(c2w, dtype=np.float64).reshape(4, 4)
        return cls(M[:3, :3], M[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    @property
    def forward(self) -> np.ndarray:
        return self.R[:, 2].copy()

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def __eq__(self, other) -> bool:
        return isinstance(other, Pose) and np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise GeometryError("look_at: forward axis parallel to up vector")
    right /= n
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), eye)


def relative_pose(source: Pose, target: Pose) -> tuple[np.ndarray, np.ndarray]:
    """(R_s2t, t_s2t) with x_target_cam = R_s2t @ x_source_cam + t_s2t."""
    R = target.R.T @ source.R
    t = target.R.T @ (source.t - target.t)
    return R, t


def interpolate_pose(a: Pose, b: Pose, alpha: float) -> Pose:
    """Slerp rotations, lerp translations."""
    if alpha == 0.0:
        return Pose(a.R.copy(), a.t.copy())
    if alpha == 1.0:
        return Pose(b.R.copy(), b.t.copy())
    rots = Rotation.from_matrix(np.stack([a.R, b.R]))
    R = Slerp([0.0, 1.0], rots)([alpha]).as_matrix()[0]
    return Pose(_orthonormalize(R), (1 - alpha) * a.t + alpha * b.t)


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


# ---------------------------------------------------------------------------
# rays


@dataclass(frozen=True)
class Rays:
    """A batch of rays: origins (n,3), unit directions (n,3), shared bounds."""

    origins: np.ndarray
    directions: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise GeometryError(f"need 0 < near < far, got near={self.near}, far={self.far}")

    def __len__(self) -> int:
        return len(self.origins)


def pixel_grid(intr: Intrinsics) -> np.ndarray:
    """All (u, v) integer pixel coordinates in row-major order, shape (H*W, 2)."""
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    return np.stack([u.reshape(-1), v.reshape(-1)], axis=1)


def camera_directions(intr: Intrinsics, pixels: np.ndarray) -> np.ndarray:
    """Unnormalized camera-frame directions (z = 1) through pixel centres."""
    pixels = np.asarray(pixels)
    x = (pixels[:, 0] + 0.5 - intr.cx) / intr.fx
    y = (pixels[:, 1] + 0.5 - intr.cy) / intr.fy
    return np.stack([x, y, np.ones_like(x, dtype=np.float64)], axis=1)


def cast_rays(intr: Intrinsics, pose: Pose, pixels, near: float = 1e-3, far: float = 1e3) -> Rays:
    pixels = np.asarray(pixels).reshape(-1, 2)
    u, v = pixels[:, 0], pixels[:, 1]
    bad = (u < 0) | (u >= intr.width) | (v < 0) | (v >= intr.height)
    if np.any(bad):
        first = pixels[np.argmax(bad)]
        raise GeometryError(
            f"pixel ({first[0]}, {first[1]}) outside {intr.width}x{intr.height} image"
        )
    d = camera_directions(intr, pixels) @ pose.R.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(pose.t, d.shape).copy()
    return Rays(o, d, near, far)


def project(intr: Intrinsics, pose: Pose, points) -> tuple[np.ndarray, np.ndarray]:
    """World points -> (continuous pixel coords (n,2), camera depth (n,))."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = (pts - pose.t) @ pose.R
    z = cam[:, 2]
    uv = np.stack([intr.fx * cam[:, 0] / z + intr.cx, intr.fy * cam[:, 1] / z + intr.cy], axis=1)
    return uv, z


# ---------------------------------------------------------------------------
# planes and homographies


@dataclass(frozen=True)
class PlaneStack:
    depths: np.ndarray
    deltas: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=np.float64)
        dl = np.asarray(self.deltas, dtype=np.float64)
        if d.ndim != 1 or d.shape != dl.shape:
            raise GeometryError("depths and deltas must be equal-length vectors")
        if np.any(np.diff(d) <= 0):
            raise GeometryError("plane depths must be strictly increasing")
        if np.any(dl <= 0):
            raise GeometryError("plane deltas must be positive")
        object.__setattr__(self, "depths", d)
        object.__setattr__(self, "deltas", dl)

    def __len__(self) -> int:
        return len(self.depths)


def plane_depths(near: float, far: float, n: int, mode: str = "depth") -> PlaneStack:
    if n < 2:
        raise GeometryError(f"need at least 2 planes, got {n}")
    if not 0 < near < far:
        raise GeometryError(f"need 0 < near < far, got near={near}, far={far}")
    if mode == "depth":
        z = near + np.arange(n) * (far - near) / (n - 1)
    elif mode == "disparity":
        z = 1.0 / np.linspace(1.0 / near, 1.0 / far, n)
    else:
        raise GeometryError(f"unknown plane spacing mode {mode!r}")
    z[0], z[-1] = near, far
    deltas = np.empty(n)
    deltas[:-1] = np.diff(z)
    deltas[-1] = deltas[-2]
    return PlaneStack(z, deltas)


def plane_homography(K_s, K_t, R_s2t, t_s2t, z_k: float) -> np.ndarray:
    """Inverse warp for the fronto-parallel source plane at depth ``z_k``.

    Maps homogeneous continuous target pixel coordinates to source pixel
    coordinates; normalised so that H[2, 2] == 1.
    """
    if not z_k > 0:
        raise GeometryError(f"plane depth must be positive, got z_k={z_k}")
    K_s = np.asarray(K_s, dtype=np.float64)
    K_t = np.asarray(K_t, dtype=np.float64)
    R = np.asarray(R_s2t, dtype=np.float64)
    t = np.asarray(t_s2t, dtype=np.float64).reshape(3)
    n = np.array([0.0, 0.0, 1.0])
    A = R + np.outer(t, n) / z_k
    # det(A) = 1 + (R^T t)_z / z_k; zero when the target centre lies on the plane
    if abs(np.linalg.det(A)) < 1e-9:
        raise GeometryError(f"degenerate homography for plane z_k={z_k}: target camera lies on the plane")
    H_fwd = K_t @ A @ np.linalg.inv(K_s)
    H = np.linalg.inv(H_fwd)
    if abs(H[2, 2]) < 1e-12:
        raise GeometryError(f"homography for plane z_k={z_k} cannot be normalised")
    return H / H[2, 2]


def apply_homography(H: np.ndarray, uv: np.ndarray) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    hom = np.concatenate([uv, np.ones((*uv.shape[:-1], 1))], axis=-1) @ H.T
    return hom[..., :2] / hom[..., 2:3]


def warp_grid(H: np.ndarray, target_size: tuple[int, int], source_size: tuple[int, int]):
    """Source index coordinates for every target pixel, plus the in-bounds mask.

    Sizes are (width, height).  Returns (xs, ys, mask), each (H_t, W_t).
    Target points with non-positive homogeneous depth are masked out.
    """
    wt, ht = target_size
    ws, hs = source_size
    v, u = np.mgrid[0:ht, 0:wt]
    hom = np.stack([u + 0.5, v + 0.5, np.ones_like(u, dtype=np.float64)], axis=-1) @ H.T
    w = hom[..., 2]
    front = w > 1e-12
    w_safe = np.where(front, w, 1.0)
    xs = hom[..., 0] / w_safe - 0.5
    ys = hom[..., 1] / w_safe - 0.5
    mask = front & (xs >= 0) & (xs <= ws - 1) & (ys >= 0) & (ys <= hs - 1)
    return xs, ys, mask
