"""Command-line entry point: synth, train, render, eval and compare.

Exit codes: 0 on success, 2 for invalid flags or missing inputs (nothing is
written), 1 when a command fails at run time.  Every command writes its
artifacts under --out together with run_manifest.json, which records the
full configuration and seed; it holds no timestamps, so reruns produce
identical manifests.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import diffcore as dc
from . import scene as sc
from . import trainer as tr
from .geometry import GeometryError, Pose

PRESETS = ("desk", "paper")
RUN_MANIFEST = "run_manifest.json"
LOSS_LOG = "losses.csv"
EVAL_LOG = "eval.csv"
FINAL_CKPT = "final.mpnf"


class UsageError(Exception):
    """Invalid flags or missing inputs; reported with exit code 2."""


# ---------------------------------------------------------------------------
# helpers


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _threads(value) -> int:
    if value is None:
        value = os.environ.get("MPNERF_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"thread count must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"thread count must be >= 1, got {n}")
    return n


def _scene_dir(path) -> Path:
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise UsageError(f"scene directory not found or has no manifest.json: {p}")
    return p


def _existing_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out_dir(path, scene=None) -> Path:
    out = Path(path)
    if scene is not None and out.resolve() == Path(scene).resolve():
        raise UsageError("--out must differ from the input scene directory")
    return out


def _protocol(value: str):
    if value in ("3view", "5view"):
        return value
    try:
        f = float(value)
    except ValueError:
        raise UsageError(f"protocol must be 3view, 5view or a fraction in (0, 1), got {value!r}") from None
    if not 0 < f < 1:
        raise UsageError(f"training fraction must lie in (0, 1), got {f}")
    return f


def _write_manifest(out: Path, command: str, args: argparse.Namespace, **extra):
    record = {"command": command, "version": _version(),
              "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"}}
    record.update(extra)
    (out / RUN_MANIFEST).write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _depth_image(depth: np.ndarray, near: float, far: float) -> np.ndarray:
    """Near is bright, far is dark."""
    return np.clip((far - depth) / (far - near), 0.0, 1.0)


def _parse_pose(text: str) -> Pose:
    try:
        vals = [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"--pose must be 12 or 16 numbers, got {text!r}") from None
    if len(vals) not in (12, 16):
        raise UsageError(f"--pose must be 12 or 16 numbers (row-major camera-to-world), got {len(vals)}")
    m = np.eye(4)
    m[: len(vals) // 4] = np.reshape(vals, (-1, 4))
    try:
        return Pose.from_matrix(m)
    except GeometryError as e:
        raise UsageError(f"--pose: {e}") from None


# ---------------------------------------------------------------------------
# configuration


def _base_config(args) -> dict:
    base = tr.desk_preset().to_dict() if args.preset == "desk" else tr.TrainConfig().to_dict()
    if args.config:
        path = _existing_file(args.config, "config file")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{path}: expected a JSON object")
        unknown = set(loaded) - set(base)
        if unknown:
            raise UsageError(f"{path}: unknown config fields: {', '.join(sorted(unknown))}")
        base.update(loaded)
    return base


def _train_config(args, lam=None, seed=None, mpi_enabled=None) -> tr.TrainConfig:
    cfg = _base_config(args)
    if args.epochs is not None:
        if args.epochs < 1:
            raise UsageError(f"--epochs must be >= 1, got {args.epochs}")
        cfg["epochs"], cfg["steps"] = args.epochs, None
    if args.steps is not None:
        if args.steps < 1:
            raise UsageError(f"--steps must be >= 1, got {args.steps}")
        cfg["steps"] = args.steps
    flags = {"rays": args.rays, "lr": args.lr, "n_planes": args.planes, "eval_every": args.eval_every,
             "mpi_pretrain_steps": args.pretrain_steps}
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if args.perceptual:
        cfg["perceptual"] = True
    if lam is not None:
        cfg["lam"] = lam
    if seed is not None:
        cfg["seed"] = seed
    if mpi_enabled is not None:
        cfg["mpi_enabled"] = mpi_enabled
    try:
        return tr.TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def _add_training_flags(p: argparse.ArgumentParser):
    p.add_argument("--preset", choices=PRESETS, default="desk",
                   help="base configuration: reduced desk-scale sizes or the full-size defaults")
    p.add_argument("--config", help="JSON file of training settings; flags override it")
    length = p.add_mutually_exclusive_group()
    length.add_argument("--epochs", type=int, help="training length in passes over the training pixels")
    length.add_argument("--steps", type=int, help="training length in steps")
    p.add_argument("--rays", type=int, help="rays per step")
    p.add_argument("--lr", type=float, help="initial learning rate for both branches")
    p.add_argument("--planes", type=int, help="number of MPI planes")
    p.add_argument("--eval-every", type=int, help="evaluate held-out views every N steps (0 = off)")
    p.add_argument("--pretrain-steps", type=int, help="MPI-only warm-up steps before joint training")
    p.add_argument("--perceptual", action="store_true", help="add the random-feature perceptual term")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.size < 16 or args.size % sc.ENCODER_MULTIPLE:
        raise UsageError(f"--size must be >= 16 and a multiple of {sc.ENCODER_MULTIPLE}, got {args.size}")
    if args.views < 2:
        raise UsageError(f"--views must be >= 2, got {args.views}")
    out = Path(args.out)
    _, data = sc.make_scene(args.seed, args.kind, size=args.size, n_views=args.views)
    sc.save_views(out, data)
    _write_manifest(out, "synth", args)
    print(f"wrote {len(data)} views ({args.size}x{args.size}) to {out}")
    return 0


def _open_scene(scene_dir, protocol, cfg) -> tr.TrainScene:
    data = sc.load_scene(scene_dir)
    train_ids, test_ids = sc.split_views(len(data), protocol)
    return tr.make_train_scene(data, train_ids, test_ids, cfg)


def _run_training(cfg: tr.TrainConfig, scene: tr.TrainScene, out: Path, meta: dict, ckpt_every: int = 0,
                  quiet: bool = False) -> tr.TrainState:
    state = tr.init_state(cfg, scene)
    state.meta = dict(meta)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / LOSS_LOG, "w", newline="") as lf, open(out / EVAL_LOG, "w", newline="") as ef:
        loss_w = csv.DictWriter(lf, fieldnames=tr.LOG_FIELDS)
        loss_w.writeheader()
        ef_w = csv.writer(ef)
        ef_w.writerow(["step", "mean_psnr", "mean_ssim"])

        def on_step(r: tr.StepReport):
            loss_w.writerow(r.row())
            if ckpt_every and r.step % ckpt_every == 0:
                tr.checkpoint_save(state, out / f"ckpt_{r.step:06d}.mpnf")

        def on_eval(step, ev):
            ef_w.writerow([step, f"{ev.mean_psnr:.6f}", f"{ev.mean_ssim:.6f}"])
            ef.flush()
            if not quiet:
                print(f"step {step}: held-out PSNR {ev.mean_psnr:.3f} dB, SSIM {ev.mean_ssim:.4f}")

        tr.train(state, scene, on_step=on_step, on_eval=on_eval)
    tr.checkpoint_save(state, out / FINAL_CKPT)
    return state


def cmd_train(args) -> int:
    scene_dir = _scene_dir(args.scene)
    protocol = _protocol(args.protocol)
    out = _out_dir(args.out, scene_dir)
    if args.lam < 0:
        raise UsageError(f"--lambda must be >= 0, got {args.lam}")
    if args.no_mpi and args.lam > 0:
        raise UsageError("--no-mpi requires --lambda 0")
    if args.ckpt_every < 0:
        raise UsageError(f"--ckpt-every must be >= 0, got {args.ckpt_every}")
    cfg = _train_config(args, lam=args.lam, seed=args.seed, mpi_enabled=not args.no_mpi)

    scene = _open_scene(scene_dir, protocol, cfg)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "train", args, config=cfg.to_dict(), train_ids=scene.train_ids, test_ids=scene.test_ids)
    meta = {"scene": str(scene_dir.resolve()), "protocol": protocol}
    state = _run_training(cfg, scene, out, meta, args.ckpt_every)
    report = tr.evaluate(state, scene)
    report.write_csv(out / "eval_final.csv")
    print(f"trained {state.step} steps; held-out PSNR {report.mean_psnr:.3f} dB, SSIM {report.mean_ssim:.4f}")
    return 0


def _scene_for_checkpoint(state: tr.TrainState, scene_arg, protocol_arg) -> tr.TrainScene:
    scene_dir = scene_arg or state.meta.get("scene")
    if scene_dir is None:
        raise UsageError("checkpoint does not record its scene; pass --scene")
    scene_dir = _scene_dir(scene_dir)
    protocol = _protocol(str(protocol_arg)) if protocol_arg else state.meta.get("protocol", "3view")
    return _open_scene(scene_dir, protocol, state.config)


def cmd_render(args) -> int:
    ckpt = _existing_file(args.ckpt, "checkpoint")
    pose = _parse_pose(args.pose) if args.pose is not None else None
    out = _out_dir(args.out, args.scene)
    state = tr.checkpoint_load(ckpt)
    scene = _scene_for_checkpoint(state, args.scene, args.protocol)
    if args.view_id is not None:
        if not 0 <= args.view_id < len(scene.data):
            raise UsageError(f"--view-id must lie in [0, {len(scene.data) - 1}], got {args.view_id}")
        pose = scene.data.pose(args.view_id)
    if args.mpi_source is not None and args.mpi_source not in scene.train_ids:
        raise UsageError(f"--mpi-source must be a training view {scene.train_ids}, got {args.mpi_source}")

    out.mkdir(parents=True, exist_ok=True)
    rgb, depth = tr.render_view(state, scene, pose)
    sc.write_png(out / "nerf.png", rgb)
    sc.write_png(out / "nerf_depth.png", _depth_image(depth, scene.near, scene.far))
    written = ["nerf.png", "nerf_depth.png"]
    if state.mpi is not None and not args.no_mpi:
        m = tr.render_mpi_view(state, scene, pose, source=args.mpi_source)
        sc.write_png(out / "mpi.png", m.rgb.data.transpose(1, 2, 0))
        sc.write_png(out / "mpi_depth.png", _depth_image(m.depth.data, scene.near, scene.far))
        sc.write_png(out / "mpi_mask.png", m.mask.astype(np.float32))
        written += ["mpi.png", "mpi_depth.png", "mpi_mask.png"]
    _write_manifest(out, "render", args, config=state.config.to_dict(), step=state.step,
                    pose=pose.matrix.ravel().tolist())
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = _existing_file(args.ckpt, "checkpoint")
    _scene_dir(args.scene)
    protocol = _protocol(args.protocol)
    out = _out_dir(args.out, args.scene)
    state = tr.checkpoint_load(ckpt)
    scene = _open_scene(args.scene, protocol, state.config)
    report = tr.evaluate(state, scene)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / EVAL_LOG)
    _write_manifest(out, "eval", args, config=state.config.to_dict(), step=state.step, test_ids=scene.test_ids)
    print(f"{len(report.views)} views: PSNR {report.mean_psnr:.3f} dB, SSIM {report.mean_ssim:.4f}")
    return 0


COMPARE_ROWS = (
    ("nerf_unguided", "NeRF branch w/o guidance"),
    ("mpi", "MPI branch"),
    ("nerf_guided", "NeRF branch w/ guidance"),
)


def cmd_compare(args) -> int:
    scene_dir = _scene_dir(args.scene)
    protocol = _protocol(args.protocol)
    out = _out_dir(args.out, scene_dir)
    if args.seeds < 1:
        raise UsageError(f"--seeds must be >= 1, got {args.seeds}")
    if args.lam <= 0:
        raise UsageError(f"--lambda must be > 0 for the guided variant, got {args.lam}")
    seeds = list(range(args.seeds))
    guided = [_train_config(args, lam=args.lam, seed=s, mpi_enabled=True) for s in seeds]
    # the unguided baseline drops the MPI branch; with lam = 0 it has no effect on theta1
    baseline = [_train_config(args, lam=0.0, seed=s, mpi_enabled=args.baseline == "zero") for s in seeds]

    scene = _open_scene(scene_dir, protocol, guided[0])
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "compare", args, seeds=seeds, guided=guided[0].to_dict(), baseline=baseline[0].to_dict())
    meta = {"scene": str(scene_dir.resolve()), "protocol": protocol}
    rows = []
    for s, g_cfg, b_cfg in zip(seeds, guided, baseline):
        for variant, cfg in (("nerf_unguided", b_cfg), ("nerf_guided", g_cfg)):
            state = _run_training(cfg, scene, out / f"seed{s}_{variant}", meta, quiet=True)
            ev = tr.evaluate(state, scene)
            rows.append((s, variant, ev.mean_psnr, ev.mean_ssim))
            print(f"seed {s} {variant}: PSNR {ev.mean_psnr:.3f} dB, SSIM {ev.mean_ssim:.4f}")
            if variant == "nerf_guided":
                ev = tr.evaluate_mpi(state, scene)
                rows.append((s, "mpi", ev.mean_psnr, ev.mean_ssim))

    with open(out / "compare_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "variant", "psnr", "ssim"])
        for s, v, p, q in rows:
            w.writerow([s, v, f"{p:.6f}", f"{q:.6f}"])
    table = []
    for key, label in COMPARE_ROWS:
        ps = [p for _, v, p, _ in rows if v == key]
        qs = [q for _, v, _, q in rows if v == key]
        table.append((label, float(np.mean(ps)), float(np.mean(qs))))
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "psnr", "ssim"])
        for label, p, q in table:
            w.writerow([label, f"{p:.6f}", f"{q:.6f}"])
    print(f"\n{'method':<28}{'PSNR':>8}{'SSIM':>8}")
    for label, p, q in table:
        print(f"{label:<28}{p:>8.2f}{q:>8.3f}")
    gain = table[2][1] - table[0][1]
    print(f"guidance gain: {gain:+.2f} dB over {len(seeds)} seed(s)")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpnerf", description="Multiplane-prior guided NeRF on sparse aerial views")
    parser.add_argument("--threads", help="BLAS threads (default: $MPNERF_THREADS or 1; 1 is fully deterministic)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a procedural aerial scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=sc.KINDS, default="mixed")
    p.add_argument("--size", type=int, default=64, help="image side in pixels (multiple of 32)")
    p.add_argument("--views", type=int, default=21)
    p.add_argument("--out", required=True, help="scene directory to write")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one run and write checkpoints and logs")
    p.add_argument("--scene", required=True)
    p.add_argument("--protocol", default="3view", help="3view, 5view or a training fraction")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="guidance weight")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-mpi", action="store_true", help="drop the MPI branch entirely (needs --lambda 0)")
    p.add_argument("--ckpt-every", type=int, default=0, help="also checkpoint every N steps")
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a view from a checkpoint")
    p.add_argument("--ckpt", required=True)
    where = p.add_mutually_exclusive_group(required=True)
    where.add_argument("--view-id", type=int, help="pose of this scene view")
    where.add_argument("--pose", help="camera-to-world matrix, 12 or 16 row-major numbers (use --pose=... if it starts with -)")
    p.add_argument("--scene", help="scene directory (default: the one recorded in the checkpoint)")
    p.add_argument("--protocol", help="split used to pick the MPI source view (default: from the checkpoint)")
    p.add_argument("--mpi-source", type=int, help="training view the MPI is generated from (default: nearest)")
    p.add_argument("--no-mpi", action="store_true", help="skip the MPI pseudo-label output")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="score a checkpoint on held-out views")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--protocol", default="3view")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="guided vs unguided runs over several seeds")
    p.add_argument("--scene", required=True)
    p.add_argument("--protocol", default="3view")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, run as 0..k-1")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="guidance weight of the guided runs")
    p.add_argument("--baseline", choices=("removed", "zero"), default="removed",
                   help="unguided runs drop the MPI branch, or keep it with zero weight")
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_compare)
    return parser


RUNTIME_ERRORS = (sc.SceneError, tr.CheckpointError, tr.TrainingError, dc.ShapeError, FloatingPointError,
                  ValueError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads(args.threads)
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"mpnerf {args.command}: error: {e}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as e:
        print(f"mpnerf {args.command}: {type(e).__module__}.{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
