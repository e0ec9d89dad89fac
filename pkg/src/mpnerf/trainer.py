"""Joint training of the radiance field (theta1) and the MPI generator (theta2).

One step:
  1. draw an ordered source/target pair of training views and an unseen pose;
  2. MPI branch: generate from the source, render at the target, masked
     L1 + SSIM loss, Adam on theta2;
  3. render the same MPI at the unseen pose (no graph) -> pseudo-label + mask;
  4. NeRF branch: rays from the source view against ground truth, plus rays at
     mask-valid unseen pixels against the pseudo-label; Adam on theta1.

All randomness comes from one generator, drawn in a fixed order every step
whether or not guidance is active, so runs with lam = 0 and runs without the
MPI branch consume identical random streams.
"""

from __future__ import annotations

import contextlib
import dataclasses
import io
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import diffcore as dc
from . import losses, metrics, mpi
from .geometry import Intrinsics, Pose, PlaneStack, cast_rays, interpolate_pose, plane_depths, pixel_grid
from .nerf import NerfConfig, PosEncConfig, SceneBounds, init_field, render_image, render_rays
from .scene import Dataset

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    steps: int | None = None
    rays: int = 1024
    lr: float = 5e-4
    lam: float = 1.0
    n_planes: int = 16
    plane_spacing: str = "depth"
    n_coarse: int = 64
    n_fine: int = 32
    nerf_depth: int = 8
    nerf_width: int = 256
    nerf_skip: int | None = 5
    l_pos: int = 10
    l_dir: int = 4
    encoder_width: float = 0.25
    decoder_width: float = 0.25
    freeze_encoder: bool = False
    jitter: float = 0.05
    seed: int = 0
    eval_every: int = 0
    mpi_enabled: bool = True
    mpi_pretrain_steps: int = 0
    perceptual: bool = False

    def __post_init__(self):
        for name in ("epochs", "rays", "n_planes", "n_coarse", "nerf_depth", "nerf_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.steps is not None and self.steps < 1:
            raise ValueError(f"steps must be positive, got {self.steps}")
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.n_fine < 0 or self.eval_every < 0 or self.mpi_pretrain_steps < 0:
            raise ValueError("n_fine, eval_every and mpi_pretrain_steps must be non-negative")
        if self.lam > 0 and not self.mpi_enabled:
            raise ValueError("guidance (lam > 0) needs the MPI branch")

    def total_steps(self, n_train_views: int, pixels_per_view: int) -> int:
        """Explicit ``steps`` or epochs x views x (pixels / rays)."""
        if self.steps is not None:
            return self.steps
        per_epoch = n_train_views * max(1, pixels_per_view // self.rays)
        return self.epochs * per_epoch

    def nerf_config(self) -> NerfConfig:
        skip = self.nerf_skip if self.nerf_skip is not None and self.nerf_skip < self.nerf_depth else None
        return NerfConfig(depth=self.nerf_depth, width=self.nerf_width, skip=skip,
                          encoding=PosEncConfig(self.l_pos, self.l_dir), n_coarse=self.n_coarse, n_fine=self.n_fine)

    def mpi_config(self) -> mpi.MpiConfig:
        return mpi.MpiConfig(n_planes=self.n_planes, spacing=self.plane_spacing, encoder_width=self.encoder_width,
                             decoder_width=self.decoder_width, freeze_encoder=self.freeze_encoder)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(sorted(unknown))}")
        return cls(**d)


def desk_preset(**overrides) -> TrainConfig:
    """Reduced network and batch sizes that make 2,000-step runs feasible on one CPU core."""
    base = dict(rays=256, n_planes=8, n_coarse=32, n_fine=16, nerf_depth=4, nerf_width=64, nerf_skip=2,
                l_pos=6, l_dir=2, encoder_width=0.125, decoder_width=0.125, steps=2000)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# scene wrapper and state


@dataclass
class TrainScene:
    data: Dataset
    train_ids: list[int]
    test_ids: list[int]
    bounds: SceneBounds
    planes: PlaneStack

    @property
    def intrinsics(self) -> Intrinsics:
        return self.data.intrinsics(self.train_ids[0])

    @property
    def near(self) -> float:
        return self.data.near

    @property
    def far(self) -> float:
        return self.data.far


def frustum_bounds(data: Dataset) -> SceneBounds:
    """Axis-aligned box around every camera centre and its frustum corners at ``far``."""
    pts = []
    for i in range(len(data)):
        intr, pose = data.intrinsics(i), data.pose(i)
        corners = [[0, 0], [intr.width - 1, 0], [0, intr.height - 1], [intr.width - 1, intr.height - 1]]
        rays = cast_rays(intr, pose, corners)
        pts.append(pose.t[None])
        pts.append(rays.origins + rays.directions * data.far)
    pts = np.concatenate(pts)
    return SceneBounds(pts.min(axis=0), pts.max(axis=0))


def make_train_scene(data: Dataset, train_ids, test_ids, cfg: TrainConfig) -> TrainScene:
    if len(train_ids) < 2:
        raise ValueError(f"need at least 2 training views, got {len(train_ids)}")
    if cfg.n_planes == 1:
        planes = PlaneStack(np.array([0.5 * (data.near + data.far)]), np.array([data.far - data.near]))
    else:
        planes = plane_depths(data.near, data.far, cfg.n_planes, cfg.plane_spacing)
    return TrainScene(data, list(train_ids), list(test_ids), frustum_bounds(data), planes)


@dataclass
class TrainState:
    nerf: dict[str, dc.Tensor]
    mpi: dict[str, dc.Tensor] | None
    adam1: dc.AdamMoments
    adam2: dc.AdamMoments
    step: int
    rng: np.random.Generator
    config: TrainConfig
    total_steps: int
    best: dict = field(default_factory=dict)
    # caller bookkeeping (scene path, split) carried through checkpoints
    meta: dict = field(default_factory=dict)


def init_state(cfg: TrainConfig, scene: TrainScene) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    nerf_params = init_field(cfg.nerf_config(), rng)
    # the MPI weights come from their own stream so removing the branch leaves theta1 untouched
    mpi_params = mpi.init_mpi(cfg.mpi_config(), np.random.default_rng([cfg.seed, 1])) if cfg.mpi_enabled else None
    intr = scene.intrinsics
    total = cfg.total_steps(len(scene.train_ids), intr.width * intr.height)
    if cfg.rays > intr.width * intr.height:
        raise ValueError(f"ray batch {cfg.rays} exceeds the {intr.width * intr.height} pixels of a view")
    return TrainState(nerf_params, mpi_params, dc.AdamMoments(), dc.AdamMoments(), 0, rng, cfg, total)


# ---------------------------------------------------------------------------
# sampling


def sample_pair(train_ids, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform ordered pair of distinct views."""
    n = len(train_ids)
    if n < 2:
        raise ValueError(f"need at least 2 training views, got {n}")
    i = int(rng.integers(n))
    j = int(rng.integers(n - 1))
    if j >= i:
        j += 1
    return train_ids[i], train_ids[j]


def sample_unseen_pose(poses: list[Pose], rng: np.random.Generator, jitter: float = 0.05,
                       max_rot_deg: float = 5.0) -> Pose:
    """Interpolate a random pair of poses at alpha in [0.2, 0.8] and jitter the result."""
    if len(poses) < 2:
        raise ValueError("need at least 2 poses")
    i, j = sample_pair(list(range(len(poses))), rng)
    alpha = rng.uniform(0.2, 0.8)
    axis = rng.standard_normal(3)
    angle = np.radians(max_rot_deg) * rng.random()
    offset = rng.standard_normal(3)
    radius = rng.random() ** (1.0 / 3.0)
    base = interpolate_pose(poses[i], poses[j], alpha)
    axis /= max(np.linalg.norm(axis), 1e-12)
    offset /= max(np.linalg.norm(offset), 1e-12)
    R = Rotation.from_rotvec(axis * angle).as_matrix() @ base.R
    baseline = np.linalg.norm(poses[i].t - poses[j].t)
    t = base.t + offset * radius * jitter * baseline
    return Pose(R, t)


# ---------------------------------------------------------------------------
# the step


LOG_FIELDS = ("step", "lr", "loss_g1", "loss_g2", "nerf_mse", "guidance", "mpi_l1", "mpi_ssim", "n_valid")


@dataclass
class StepReport:
    step: int
    lr: float
    loss_g1: float
    loss_g2: float
    nerf_mse: float
    guidance: float
    mpi_l1: float
    mpi_ssim: float
    n_valid: int
    theta2_guidance_grad: float
    pair: tuple[int, int] = (0, 0)
    unseen_pixels: np.ndarray | None = None
    unseen_mask: np.ndarray | None = None
    unseen_pose: Pose | None = None

    def row(self) -> dict:
        return {k: getattr(self, k) for k in LOG_FIELDS}


def _finite(value: float, term: str, step: int):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {term} loss ({value}) at step {step}")


@contextlib.contextmanager
def _term(name: str, step: int):
    try:
        yield
    except dc.NonFiniteError as e:
        raise TrainingError(f"non-finite value in the {name} term at step {step}: {e}") from e


def _image_chw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1))


def mpi_step(state: TrainState, scene: TrainScene, src: int, tgt: int, lr: float):
    """Update theta2 on one pair; returns (loss, parts, the source MPI regenerated with the updated theta2)."""
    cfg = state.config
    data = scene.data
    intr = scene.intrinsics

    def generate():
        return mpi.generate(state.mpi, cfg.mpi_config(), data.images[src], scene.planes, scene.near, scene.far,
                            intr, data.pose(src))

    m = generate()
    out = mpi.render_target(m, data.intrinsics(tgt), data.pose(tgt))
    extractor = losses.random_conv_features() if cfg.perceptual else None
    if out.mask.any():
        loss, parts = losses.mpi_total(out.rgb, _image_chw(data.images[tgt]), out.mask, extractor=extractor)
        _finite(loss.item(), "MPI", state.step)
        train = mpi.trainable(state.mpi)
        gm = dc.backward(loss)
        state.adam2 = dc.adam_step(train, {k: gm.of(p) for k, p in train.items()}, state.adam2, lr)
    else:
        logger.warning("step %d: target view %d shares no pixels with source %d; MPI update skipped",
                       state.step, tgt, src)
        loss, parts = dc.Tensor(np.float32(0.0)), {"l1": 0.0, "ssim": 0.0}
    with dc.no_grad():
        snapshot = generate()
    return loss, parts, snapshot


def train_step(state: TrainState, scene: TrainScene) -> StepReport:
    cfg = state.config
    rng = state.rng
    data = scene.data
    intr = scene.intrinsics
    hw = intr.width * intr.height
    lr = dc.cosine_lr(state.step, state.total_steps, cfg.lr)

    # random draws, always in this order
    src, tgt = sample_pair(scene.train_ids, rng)
    unseen = sample_unseen_pose([data.pose(i) for i in scene.train_ids], rng, cfg.jitter)
    src_pix = rng.choice(hw, cfg.rays, replace=False)
    src_seed = int(rng.integers(2 ** 63))
    mask = mpi.warp_mask(scene.planes, intr, data.pose(src), intr, unseen).reshape(-1)
    valid = np.flatnonzero(mask)
    unseen_pix = rng.choice(valid, min(cfg.rays, len(valid)), replace=False) if len(valid) else valid
    unseen_seed = int(rng.integers(2 ** 63))

    # MPI branch
    loss_g2, mpi_parts, snapshot = 0.0, {"l1": 0.0, "ssim": 0.0}, None
    if cfg.mpi_enabled:
        with _term("MPI", state.step):
            l2, mpi_parts, snapshot = mpi_step(state, scene, src, tgt, lr)
        loss_g2 = l2.item()

    # NeRF branch
    ncfg = cfg.nerf_config()
    rays = cast_rays(intr, data.pose(src), pixel_grid(intr)[src_pix])
    gt = data.images[src].reshape(-1, 3)[src_pix]
    with _term("NeRF MSE", state.step):
        res = render_rays(state.nerf, ncfg, rays.origins, rays.directions, scene.near, scene.far, scene.bounds,
                          np.random.default_rng(src_seed))
        parts = {"nerf_mse": losses.nerf_mse(res.rgb, gt)}
    guidance_value, t2_grad = 0.0, 0.0
    if snapshot is not None and len(unseen_pix):
        with _term("guidance", state.step):
            with dc.no_grad():
                label = mpi.render_target(snapshot, intr, unseen).rgb.data
            labels = label.reshape(3, -1).T[unseen_pix]
            urays = cast_rays(intr, unseen, pixel_grid(intr)[unseen_pix])
            ures = render_rays(state.nerf, ncfg, urays.origins, urays.directions, scene.near, scene.far,
                               scene.bounds, np.random.default_rng(unseen_seed))
            guide = losses.guidance_loss(ures.rgb, labels, mask[unseen_pix])
        if guide is not None:
            parts["guidance"] = guide
            guidance_value = guide.item()
            t2_grad = guidance_grad_wrt_theta2(guide, state.mpi)
            if t2_grad != 0.0:
                raise TrainingError(f"guidance loss reached the MPI weights at step {state.step}")
    elif cfg.mpi_enabled:
        logger.warning("step %d: unseen pose has no mask-valid pixels; guidance skipped", state.step)
    loss_g1, _ = losses.joint_objectives(parts, cfg.lam)
    _finite(parts["nerf_mse"].item(), "NeRF MSE", state.step)
    _finite(guidance_value, "guidance", state.step)
    with _term("NeRF objective", state.step):
        gm = dc.backward(loss_g1)
    state.adam1 = dc.adam_step(state.nerf, {k: gm.of(p) for k, p in state.nerf.items()}, state.adam1, lr)

    state.step += 1
    return StepReport(state.step, lr, loss_g1.item(), loss_g2, parts["nerf_mse"].item(), guidance_value,
                      mpi_parts["l1"], mpi_parts["ssim"], int(len(valid)), t2_grad, (src, tgt),
                      unseen_pix, mask, unseen)


def guidance_grad_wrt_theta2(guide: dc.Tensor, theta2: dict[str, dc.Tensor] | None) -> float:
    """max |d guide / d theta2|; exactly 0 when no MPI weight is reachable from the loss."""
    if not theta2:
        return 0.0
    reach = dc.reachable_leaves(guide)
    hit = [p for p in theta2.values() if p.node_id in reach]
    if not hit:
        return 0.0
    gm = dc.backward(guide)
    return float(max(np.max(np.abs(gm.of(p))) for p in hit))


def pretrain_mpi(state: TrainState, scene: TrainScene, steps: int):
    """MPI-only warm-up for the two-stage variant; uses its own RNG stream."""
    rng = np.random.default_rng([state.config.seed, 2])
    for k in range(steps):
        src, tgt = sample_pair(scene.train_ids, rng)
        mpi_step(state, scene, src, tgt, dc.cosine_lr(k, steps, state.config.lr))


# ---------------------------------------------------------------------------
# evaluation


def render_view(state: TrainState, scene: TrainScene, pose: Pose, intr: Intrinsics | None = None):
    intr = intr or scene.intrinsics
    return render_image(state.nerf, state.config.nerf_config(), intr, pose, scene.near, scene.far, scene.bounds)


def evaluate(state: TrainState, scene: TrainScene, views=None) -> metrics.EvalReport:
    """NeRF-only renders of the held-out views scored against ground truth."""
    views = scene.test_ids if views is None else views
    report = metrics.EvalReport(meta={"step": state.step, "seed": state.config.seed})
    for v in views:
        rgb, _ = render_view(state, scene, scene.data.pose(v), scene.data.intrinsics(v))
        gt = scene.data.images[v]
        report.add(v, metrics.psnr(np.clip(rgb, 0, 1), gt), metrics.ssim(np.clip(rgb, 0, 1), gt))
    return report


def nearest_train_view(scene: TrainScene, pose: Pose) -> int:
    """Training view whose camera centre is closest to ``pose``."""
    d = [np.linalg.norm(scene.data.pose(i).t - pose.t) for i in scene.train_ids]
    return scene.train_ids[int(np.argmin(d))]


def render_mpi_view(state: TrainState, scene: TrainScene, pose: Pose, intr: Intrinsics | None = None,
                    source: int | None = None) -> mpi.MpiRender:
    """MPI branch render at ``pose`` from one training view (nearest by default)."""
    if state.mpi is None:
        raise ValueError("this run has no MPI branch")
    intr = intr or scene.intrinsics
    src = nearest_train_view(scene, pose) if source is None else source
    with dc.no_grad():
        m = mpi.generate(state.mpi, state.config.mpi_config(), scene.data.images[src], scene.planes,
                         scene.near, scene.far, scene.data.intrinsics(src), scene.data.pose(src))
        return mpi.render_target(m, intr, pose, with_depth=True)


def evaluate_mpi(state: TrainState, scene: TrainScene, views=None) -> metrics.EvalReport:
    """MPI branch alone on held-out views; pixels outside the warp mask count as rendered (black)."""
    views = scene.test_ids if views is None else views
    report = metrics.EvalReport(meta={"step": state.step, "seed": state.config.seed, "branch": "mpi"})
    for v in views:
        out = render_mpi_view(state, scene, scene.data.pose(v), scene.data.intrinsics(v))
        rgb = np.clip(out.rgb.data.transpose(1, 2, 0), 0, 1)
        gt = scene.data.images[v]
        report.add(v, metrics.psnr(rgb, gt), metrics.ssim(rgb, gt))
    return report


def train(state: TrainState, scene: TrainScene, steps: int | None = None, on_step=None, on_eval=None):
    """Run ``steps`` steps (default: until total_steps); returns the step reports."""
    cfg = state.config
    if state.step == 0 and cfg.mpi_pretrain_steps and state.mpi is not None:
        pretrain_mpi(state, scene, cfg.mpi_pretrain_steps)
    end = state.total_steps if steps is None else min(state.total_steps, state.step + steps)
    reports = []
    while state.step < end:
        r = train_step(state, scene)
        reports.append(r)
        if on_step is not None:
            on_step(r)
        if cfg.eval_every and state.step % cfg.eval_every == 0 and scene.test_ids:
            ev = evaluate(state, scene)
            if ev.mean_psnr > state.best.get("psnr", -np.inf):
                state.best = {"psnr": ev.mean_psnr, "ssim": ev.mean_ssim, "step": state.step}
            if on_eval is not None:
                on_eval(state.step, ev)
    return reports


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MPNF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


def _tensors(state: TrainState) -> dict[str, np.ndarray]:
    out = {}
    for prefix, params in (("nerf/", state.nerf), ("mpi/", state.mpi or {})):
        for k, p in params.items():
            out[prefix + k] = p.data
    for prefix, mom in (("adam1", state.adam1), ("adam2", state.adam2)):
        for k, v in mom.m.items():
            out[f"{prefix}.m/{k}"] = v
        for k, v in mom.v.items():
            out[f"{prefix}.v/{k}"] = v
    return out


def checkpoint_bytes(state: TrainState) -> bytes:
    blob = json.dumps({
        "rng": state.rng.bit_generator.state,
        "config": state.config.to_dict(),
        "total_steps": state.total_steps,
        "adam_t": [state.adam1.t, state.adam2.t],
        "best": state.best,
        "meta": state.meta,
        "frozen": sorted(k for k, p in (state.mpi or {}).items() if not p.requires_grad),
    }, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, state.step))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    tensors = _tensors(state)
    buf.write(struct.pack("<Q", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", 0, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def checkpoint_save(state: TrainState, path):
    Path(path).write_bytes(checkpoint_bytes(state))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(path) -> TrainState:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 8 + 4:
        raise CheckpointError(f"{path}: checkpoint is truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(4)
    version, step = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: CRC mismatch (corrupted or truncated file)")
    (blob_len,) = r.unpack("<Q")
    meta = json.loads(r.take(blob_len).decode("utf-8"))
    (count,) = r.unpack("<Q")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for '{name}'")
        shape = r.unpack(f"<{rank}Q")
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")

    cfg = TrainConfig.from_dict(meta["config"])
    frozen = set(meta.get("frozen", []))
    nerf_p, mpi_p = {}, {}
    a1, a2 = dc.AdamMoments(t=meta["adam_t"][0]), dc.AdamMoments(t=meta["adam_t"][1])
    for name, arr in tensors.items():
        head, _, key = name.partition("/")
        if head == "nerf":
            nerf_p[key] = dc.Tensor(arr, requires_grad=True, name=key)
        elif head == "mpi":
            mpi_p[key] = dc.Tensor(arr, requires_grad=key not in frozen, name=key)
        else:
            mom = a1 if head.startswith("adam1") else a2
            (mom.m if head.endswith(".m") else mom.v)[key] = arr
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(nerf_p, mpi_p if cfg.mpi_enabled else None, a1, a2, step, rng, cfg,
                      meta["total_steps"], meta.get("best", {}), meta.get("meta", {}))
