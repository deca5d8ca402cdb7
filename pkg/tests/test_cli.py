"""End-to-end command-line tests driving the real subcommands."""

import json

import numpy as np
import pytest

from featurefield import scene_io
from featurefield.cli import main


class TestMakeSynthetic:
    def test_generates_loadable_scene(self, tmp_path, capsys):
        out = tmp_path / "scene"
        code = main(["make-synthetic", "--out", str(out), "--seed", "2",
                     "--frames", "4", "--width", "32", "--height", "24",
                     "--feature-dim", "4", "--cloud-points", "300"])
        assert code == 0
        scene = scene_io.load_scene(out)
        assert len(scene.frames) == 4
        assert scene.feature_dim == 4
        assert "wrote scene" in capsys.readouterr().out


class TestTrainRenderSegment:
    @pytest.fixture(scope="class")
    def workspace(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("cliws")
        scene = root / "scene"
        run = root / "run"
        assert main(["make-synthetic", "--out", str(scene), "--seed", "3",
                     "--frames", "4", "--width", "32", "--height", "24",
                     "--feature-dim", "4", "--cloud-points", "300"]) == 0
        assert main(["train", "--scene", str(scene), "--out", str(run),
                     "--iterations", "40", "--batch-size", "96",
                     "--samples-per-ray", "8", "--hash-levels", "4",
                     "--table-size-log2", "12", "--hidden-width", "16",
                     "--learning-rate", "0.01", "--log-every", "20"]) == 0
        return root

    def test_train_outputs(self, workspace):
        assert (workspace / "run" / "checkpoint.ffld").exists()
        metrics = (workspace / "run" / "metrics.txt").read_text().splitlines()
        assert metrics[0].startswith("#")
        assert len(metrics) == 41

    def test_render_command(self, workspace, tmp_path):
        pose_file = workspace / "scene" / "frames" / "00000.pose.txt"
        code = main(["render", "--checkpoint", str(workspace / "run" / "checkpoint.ffld"),
                     "--pose", str(pose_file), "--out-dir", str(tmp_path),
                     "--stem", "view", "--width", "24", "--height", "18",
                     "--samples", "8"])
        assert code == 0
        assert (tmp_path / "view.color.png").exists()
        assert (tmp_path / "view.depth.png").exists()

    def test_segment_command(self, workspace, tmp_path):
        pose_file = workspace / "scene" / "frames" / "00001.pose.txt"
        out = tmp_path / "seg.png"
        code = main(["segment",
                     "--checkpoint", str(workspace / "run" / "checkpoint.ffld"),
                     "--embeddings", str(workspace / "scene" / "embeddings.txt"),
                     "--prompts", "box,sphere,wall",
                     "--pose", str(pose_file), "--out", str(out),
                     "--width", "24", "--height", "18", "--samples", "8"])
        assert code == 0
        seg = scene_io.load_index_png(out)
        assert seg.shape == (18, 24)
        labels = (tmp_path / "seg.png.labels.txt").read_text().split()
        assert labels == ["box", "sphere", "wall", "<background>"]

    def test_benchmark_command(self, workspace, tmp_path, capsys):
        report = tmp_path / "bench.json"
        code = main(["benchmark",
                     "--checkpoint", str(workspace / "run" / "checkpoint.ffld"),
                     "--embeddings", str(workspace / "scene" / "embeddings.txt"),
                     "--points", "2000", "--rays", "64", "--samples", "256",
                     "--repeats", "1", "--json-out", str(report)])
        assert code == 0
        data = json.loads(report.read_text())
        assert data["samples_per_ray"] == 256
        assert data["point_queries"]["lookups_per_second"] > 0
        assert data["ray_queries"]["pixels_per_second"] > 0
        out = capsys.readouterr().out
        assert "lookups/s" in out and "px/s" in out


class TestEval:
    def test_identical_dirs_miou_one(self, tmp_path, capsys):
        a = tmp_path / "a"
        a.mkdir()
        rng = np.random.default_rng(0)
        for i in range(3):
            arr = rng.integers(0, 3, (10, 12))
            scene_io.write_index_png(a / f"{i:05d}.png", arr, ["wall", "box", "sphere"])
        code = main(["eval", "--pred-dir", str(a), "--ref-dir", str(a)])
        assert code == 0
        out = capsys.readouterr().out
        assert "mIoU" in out
        assert "1.0000" in out

    def test_mismatched_dirs_less_than_one(self, tmp_path, capsys):
        a = tmp_path / "a"
        b = tmp_path / "b"
        a.mkdir(), b.mkdir()
        arr = np.zeros((6, 6), dtype=np.int32)
        scene_io.write_index_png(a / "00000.png", arr, ["x", "y"])
        arr2 = arr.copy()
        arr2[:3] = 1
        scene_io.write_index_png(b / "00000.png", arr2, ["x", "y"])
        code = main(["eval", "--pred-dir", str(a), "--ref-dir", str(b),
                     "--json-out", str(tmp_path / "m.json")])
        assert code == 0
        data = json.loads((tmp_path / "m.json").read_text())
        assert data["miou"] < 1.0

    def test_missing_reference(self, tmp_path, capsys):
        a = tmp_path / "a"
        b = tmp_path / "b"
        a.mkdir(), b.mkdir()
        scene_io.write_index_png(a / "00000.png", np.zeros((2, 2), np.int32), ["x"])
        assert main(["eval", "--pred-dir", str(a), "--ref-dir", str(b)]) == 1


class TestErrors:
    def test_missing_scene_is_clean_error(self, tmp_path, capsys):
        code = main(["train", "--scene", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "out")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_pose_argument(self, tiny_checkpoint, tmp_path, capsys):
        code = main(["render", "--checkpoint", str(tiny_checkpoint),
                     "--pose", "1,2,3", "--out-dir", str(tmp_path)])
        assert code == 1
        assert "16" in capsys.readouterr().err

    def test_unknown_command_exits_nonzero(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
