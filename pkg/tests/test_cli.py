import csv
import hashlib
import json

import numpy as np
import pytest

from mpnerf import cli
from mpnerf import scene as sc

TINY = dict(rays=32, n_planes=2, n_coarse=8, n_fine=4, nerf_depth=2, nerf_width=16, nerf_skip=None,
            l_pos=2, l_dir=1, encoder_width=1 / 48, decoder_width=1 / 64, steps=6)


def tree_digest(path):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(path.iterdir())}


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert cli.main(["synth", "--seed", "1", "--size", "32", "--views", "5", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def train_args(scene_dir, config_file, out, *extra):
    return ["train", "--scene", str(scene_dir), "--protocol", "0.5", "--config", str(config_file),
            "--out", str(out), *extra]


@pytest.fixture(scope="module")
def trained(scene_dir, config_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    before = tree_digest(scene_dir)
    assert cli.main(train_args(scene_dir, config_file, out, "--eval-every", "3")) == 0
    assert tree_digest(scene_dir) == before
    return out


class TestSynth:
    def test_same_seed_identical_manifests(self, scene_dir, tmp_path):
        assert cli.main(["synth", "--seed", "1", "--size", "32", "--views", "5", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "manifest.json").read_bytes() == (scene_dir / "manifest.json").read_bytes()
        assert (tmp_path / "view_003.png").read_bytes() == (scene_dir / "view_003.png").read_bytes()

    def test_loadable(self, scene_dir):
        data = sc.load_scene(scene_dir)
        assert len(data) == 5 and data.images[0].shape == (32, 32, 3)
        assert json.loads((scene_dir / cli.RUN_MANIFEST).read_text())["args"]["seed"] == 1

    def test_bad_size_is_usage_error(self, tmp_path, capsys):
        assert cli.main(["synth", "--size", "48", "--out", str(tmp_path / "s")]) == 2
        assert "multiple of 32" in capsys.readouterr().err
        assert not (tmp_path / "s").exists()


class TestTrainGuards:
    @pytest.mark.parametrize("extra, message", [
        (["--epochs", "0"], "epochs"),
        (["--steps", "0"], "steps"),
        (["--lambda", "-1"], "lambda"),
        (["--no-mpi"], "no-mpi"),
    ])
    def test_rejected_before_work(self, scene_dir, config_file, tmp_path, capsys, extra, message):
        out = tmp_path / "run"
        assert cli.main(train_args(scene_dir, config_file, out, *extra)) == 2
        assert message in capsys.readouterr().err
        assert not out.exists()

    def test_epochs_and_steps_exclusive(self, scene_dir, config_file, tmp_path):
        with pytest.raises(SystemExit) as e:
            cli.main(train_args(scene_dir, config_file, tmp_path, "--epochs", "1", "--steps", "2"))
        assert e.value.code == 2

    def test_missing_scene(self, config_file, tmp_path, capsys):
        assert cli.main(train_args(tmp_path / "nope", config_file, tmp_path / "run")) == 2
        assert "manifest.json" in capsys.readouterr().err

    def test_out_equal_to_scene(self, scene_dir, config_file):
        assert cli.main(train_args(scene_dir, config_file, scene_dir)) == 2

    def test_unknown_config_field(self, scene_dir, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"rayz": 3}))
        assert cli.main(train_args(scene_dir, bad, tmp_path / "run")) == 2
        assert "rayz" in capsys.readouterr().err

    def test_bad_thread_env(self, scene_dir, config_file, tmp_path, monkeypatch):
        monkeypatch.setenv("MPNERF_THREADS", "0")
        assert cli.main(train_args(scene_dir, config_file, tmp_path / "run")) == 2


class TestTrain:
    def test_artifacts(self, trained):
        for name in (cli.RUN_MANIFEST, cli.LOSS_LOG, cli.EVAL_LOG, cli.FINAL_CKPT, "eval_final.csv"):
            assert (trained / name).is_file(), name
        manifest = json.loads((trained / cli.RUN_MANIFEST).read_text())
        assert manifest["config"]["seed"] == 0 and manifest["config"]["steps"] == 6
        assert manifest["config"]["nerf_width"] == 16

    def test_loss_log_rows(self, trained):
        with open(trained / cli.LOSS_LOG) as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["step"]) for r in rows] == list(range(1, 7))
        assert all(np.isfinite(float(r["loss_g1"])) for r in rows)

    def test_periodic_eval(self, trained):
        with open(trained / cli.EVAL_LOG) as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["step"]) for r in rows] == [3, 6]

    def test_reproducible(self, trained, scene_dir, config_file, tmp_path):
        assert cli.main(train_args(scene_dir, config_file, tmp_path, "--eval-every", "3")) == 0
        for name in (cli.FINAL_CKPT, cli.LOSS_LOG, cli.EVAL_LOG):
            assert (tmp_path / name).read_bytes() == (trained / name).read_bytes(), name

    def test_flag_overrides_config(self, scene_dir, config_file, tmp_path):
        assert cli.main(train_args(scene_dir, config_file, tmp_path, "--steps", "2", "--ckpt-every", "1")) == 0
        with open(tmp_path / cli.LOSS_LOG) as fh:
            assert len(list(csv.DictReader(fh))) == 2
        assert (tmp_path / "ckpt_000001.mpnf").is_file()

    def test_no_mpi_baseline(self, scene_dir, config_file, tmp_path):
        assert cli.main(train_args(scene_dir, config_file, tmp_path, "--lambda", "0", "--no-mpi")) == 0
        assert json.loads((tmp_path / cli.RUN_MANIFEST).read_text())["config"]["mpi_enabled"] is False


class TestRender:
    def test_view_outputs(self, trained, tmp_path):
        ckpt = trained / cli.FINAL_CKPT
        assert cli.main(["render", "--ckpt", str(ckpt), "--view-id", "2", "--out", str(tmp_path)]) == 0
        for name in ("nerf.png", "nerf_depth.png", "mpi.png", "mpi_depth.png", "mpi_mask.png"):
            assert sc.read_png(tmp_path / name).shape == (32, 32, 3), name

    def test_pose_matches_view(self, trained, scene_dir, tmp_path):
        ckpt = trained / cli.FINAL_CKPT
        pose = sc.load_scene(scene_dir).pose(2).matrix
        text = ",".join(repr(float(x)) for x in pose.ravel())
        assert cli.main(["render", "--ckpt", str(ckpt), "--view-id", "2", "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["render", "--ckpt", str(ckpt), "--pose", text, "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "nerf.png").read_bytes() == (tmp_path / "b" / "nerf.png").read_bytes()

    def test_reflection_pose_rejected(self, trained, tmp_path, capsys):
        m = np.eye(4)
        m[0, 0] = -1
        text = ",".join(str(x) for x in m.ravel())
        code = cli.main(["render", "--ckpt", str(trained / cli.FINAL_CKPT), f"--pose={text}", "--out", str(tmp_path)])
        assert code == 2
        assert "determinant" in capsys.readouterr().err

    def test_needs_view_or_pose(self, trained, tmp_path):
        with pytest.raises(SystemExit) as e:
            cli.main(["render", "--ckpt", str(trained / cli.FINAL_CKPT), "--out", str(tmp_path)])
        assert e.value.code == 2

    def test_view_out_of_range(self, trained, tmp_path):
        args = ["render", "--ckpt", str(trained / cli.FINAL_CKPT), "--view-id", "9", "--out", str(tmp_path)]
        assert cli.main(args) == 2


class TestEval:
    def test_matches_training_report(self, trained, scene_dir, tmp_path):
        args = ["eval", "--ckpt", str(trained / cli.FINAL_CKPT), "--scene", str(scene_dir), "--protocol", "0.5",
                "--out", str(tmp_path)]
        assert cli.main(args) == 0
        assert (tmp_path / cli.EVAL_LOG).read_text() == (trained / "eval_final.csv").read_text()

    def test_corrupt_checkpoint_runtime_error(self, trained, scene_dir, tmp_path, capsys):
        bad = tmp_path / "bad.mpnf"
        raw = bytearray((trained / cli.FINAL_CKPT).read_bytes())
        raw[100] ^= 0xFF
        bad.write_bytes(bytes(raw))
        args = ["eval", "--ckpt", str(bad), "--scene", str(scene_dir), "--protocol", "0.5", "--out", str(tmp_path)]
        assert cli.main(args) == 1
        assert "CheckpointError" in capsys.readouterr().err

    def test_missing_checkpoint(self, scene_dir, tmp_path):
        args = ["eval", "--ckpt", str(tmp_path / "x"), "--scene", str(scene_dir), "--out", str(tmp_path)]
        assert cli.main(args) == 2


class TestCompare:
    def test_table(self, scene_dir, config_file, tmp_path, capsys):
        args = ["compare", "--scene", str(scene_dir), "--protocol", "0.5", "--seeds", "1", "--config",
                str(config_file), "--steps", "3", "--out", str(tmp_path)]
        assert cli.main(args) == 0
        with open(tmp_path / "compare.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["method"] for r in rows] == [label for _, label in cli.COMPARE_ROWS]
        assert all(np.isfinite(float(r["psnr"])) for r in rows)
        assert "guidance gain" in capsys.readouterr().out
        assert (tmp_path / "seed0_nerf_guided" / cli.FINAL_CKPT).is_file()

    def test_rejects_zero_seeds(self, scene_dir, tmp_path):
        args = ["compare", "--scene", str(scene_dir), "--seeds", "0", "--out", str(tmp_path)]
        assert cli.main(args) == 2
