import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from splatstream.cli import main
from splatstream.io_utils import load_f32, sha256_file

from conftest import dynamic_scene_spec, static_scene_spec

RUN_ARGS = [
    "--set", "lod.delta=0.7", "--set", "lod.d_max=7.0", "--set", "lod.d_min=1.75",
    "--set", "train.init_epochs=8", "--set", "train.stream_epochs=2",
    "--set", "train.grad_window_stream=1", "--set", "train.views=[0,1,2]",
]


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory, runner):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps(dynamic_scene_spec(frames=3, views=4, size=24,
                                                  velocity=0.12)))
    out = root / "scene"
    res = runner.invoke(main, ["gen", str(spec), str(out)])
    assert res.exit_code == 0, res.output
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, runner, scene_dir):
    out = tmp_path_factory.mktemp("run") / "r1"
    res = runner.invoke(main, ["train", str(scene_dir), str(out), *RUN_ARGS])
    assert res.exit_code == 0, res.output
    return out


class TestGen:
    def test_writes_expected_layout(self, scene_dir):
        assert (scene_dir / "manifest.json").exists()
        assert (scene_dir / "cameras.json").exists()
        assert (scene_dir / "points.npy").exists()
        for t in range(3):
            for v in range(4):
                assert (scene_dir / "frames" / f"frame_{t:04d}" / f"view_{v:02d}.png").exists()
                assert (scene_dir / "frames" / f"frame_{t:04d}" / f"view_{v:02d}.f32").exists()
                assert (scene_dir / "masks" / f"frame_{t:04d}" / f"view_{v:02d}.png").exists()

    def test_missing_spec_exits_2(self, runner, tmp_path):
        res = runner.invoke(main, ["gen", str(tmp_path / "nope.json"),
                                   str(tmp_path / "out")])
        assert res.exit_code == 2
        assert "spec not found" in res.output

    def test_same_seed_identical_manifest_hash(self, runner, tmp_path):
        spec = tmp_path / "s.json"
        spec.write_text(json.dumps(static_scene_spec(frames=2, views=2, size=16)))
        h = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            res = runner.invoke(main, ["gen", str(spec), str(out)])
            assert res.exit_code == 0
            h.append(json.loads((out / "manifest.json").read_text())["hash"])
        assert h[0] == h[1]

    def test_empty_spec_exits_2(self, runner, tmp_path):
        spec = tmp_path / "empty.json"
        spec.write_text(json.dumps({"seed": 0, "frames": 1, "image_size": 16,
                                    "cameras": {"count": 2}, "elements": []}))
        res = runner.invoke(main, ["gen", str(spec), str(tmp_path / "out")])
        assert res.exit_code == 2


class TestTrain:
    def test_writes_artifacts(self, run_dir):
        assert (run_dir / "checkpoint.slod").exists()
        assert (run_dir / "report.csv").exists()
        assert (run_dir / "loss_trace.csv").exists()
        assert (run_dir / "effective_config.json").exists()
        assert (run_dir / "stream" / "manifest.txt").exists()
        assert (run_dir / "figures" / "loss_curve.png").exists()

    def test_report_rows_equal_frames(self, run_dir):
        lines = (run_dir / "report.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,frame,loss,psnr,dyn_count,bytes"
        assert len(lines) - 1 == 3  # T frames

    def test_bytes_column_matches_payload_formula(self, run_dir):
        rows = (run_dir / "report.csv").read_text().strip().splitlines()[1:]
        for row in rows:
            epoch, frame, loss, psnr, dyn, nbytes = row.split(",")
            if int(frame) >= 1:
                assert int(nbytes) == 24 + 68 * int(dyn)
                f = run_dir / "stream" / f"frame_{int(frame):04d}.slrf"
                assert f.stat().st_size == int(nbytes)

    def test_unknown_config_key_exits_2(self, runner, scene_dir, tmp_path):
        res = runner.invoke(main, ["train", str(scene_dir), str(tmp_path / "x"),
                                   "--set", "bogus.key=1"])
        assert res.exit_code == 2

    def test_missing_scene_exits_2(self, runner, tmp_path):
        res = runner.invoke(main, ["train", str(tmp_path / "missing"),
                                   str(tmp_path / "x")])
        assert res.exit_code == 2


class TestRenderCmd:
    def test_playback_matches_archived_render(self, runner, scene_dir, run_dir,
                                              tmp_path):
        cams = json.loads((scene_dir / "cameras.json").read_text())
        cam_file = tmp_path / "cam0.json"
        cam_file.write_text(json.dumps(cams[0]))
        out_png = tmp_path / "play.png"
        for t in (0, 2):
            res = runner.invoke(main, [
                "render", str(run_dir / "checkpoint.slod"),
                str(run_dir / "stream"), str(cam_file), str(t),
                "--out", str(out_png),
            ])
            assert res.exit_code == 0, res.output
            got = load_f32(out_png.with_suffix(".f32"), 24, 24)
            want = load_f32(run_dir / "renders" / f"frame_{t:04d}" / "view_00.f32",
                            24, 24)
            assert np.array_equal(got, want), f"frame {t} playback mismatch"

    def test_stream_gap_detected(self, runner, scene_dir, run_dir, tmp_path):
        import shutil

        cams = json.loads((scene_dir / "cameras.json").read_text())
        cam_file = tmp_path / "cam.json"
        cam_file.write_text(json.dumps(cams[0]))
        gap_dir = tmp_path / "gap_stream"
        shutil.copytree(run_dir / "stream", gap_dir)
        (gap_dir / "frame_0001.slrf").unlink()
        res = runner.invoke(main, [
            "render", str(run_dir / "checkpoint.slod"), str(gap_dir),
            str(cam_file), "2", "--out", str(tmp_path / "x.png"),
        ])
        assert res.exit_code == 1
        assert "stream gap at frame 1" in res.output


class TestEvalCmd:
    def test_metrics_and_storage(self, runner, scene_dir, run_dir):
        res = runner.invoke(main, ["eval", str(scene_dir), str(run_dir)])
        assert res.exit_code == 0, res.output
        lines = (run_dir / "metrics.csv").read_text().strip().splitlines()
        # T frames x 1 held-out view (view 3)
        assert len(lines) - 1 == 3
        storage = (run_dir / "storage.csv").read_text().strip().splitlines()[1:]
        total = sum(int(r.split(",")[1]) for r in storage)
        disk = sum(f.stat().st_size
                   for f in (run_dir / "stream").glob("*.slrf"))
        assert total == disk
        assert (run_dir / "figures" / "eval_psnr.png").exists()

    def test_missing_run_dir_exits_2(self, runner, scene_dir, tmp_path):
        res = runner.invoke(main, ["eval", str(scene_dir),
                                   str(tmp_path / "missing")])
        assert res.exit_code == 2


class TestInspect:
    def test_headers_and_totals(self, runner, run_dir):
        res = runner.invoke(main, ["inspect", str(run_dir / "stream")])
        assert res.exit_code == 0, res.output
        assert "total: 2 frames" in res.output
        for line in res.output.splitlines()[:-1]:
            assert "bytes=" in line and "dyn=" in line
