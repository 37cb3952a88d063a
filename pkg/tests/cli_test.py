import csv
import json

import numpy as np
import pytest

from sglv.cli import cli
from sglv.io import read_pfm, read_sidecar
from sglv.schemas import run_manifest_schema
from sglv.volume import load_volume


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_scenegen_writes_a_sequence(sequence_dir, config):
    for name in ["scene.json", "poses.json", "probes.json", "sidecar.json"]:
        assert (sequence_dir / name).exists()
    for index in range(config.N_FRAMES):
        assert (sequence_dir / "frames" / f"rgb_{index:03d}.pfm").exists()
        assert (sequence_dir / "frames" / f"depth_{index:03d}.pfm").exists()
    assert not (sequence_dir / "frames" / f"rgb_{config.N_FRAMES:03d}.pfm").exists()

    rgb = read_pfm(sequence_dir / "frames" / "rgb_000.pfm")
    assert rgb.shape == (config.FRAME_HEIGHT, config.FRAME_WIDTH, 3)

    probes = json.loads((sequence_dir / "probes.json").read_text())
    assert probes["height"] == config.ENV_HEIGHT
    assert len(probes["probes"]) == config.N_PROBES
    gt = read_pfm(sequence_dir / probes["probes"][0]["file"])
    assert gt.shape == (config.ENV_HEIGHT, 2 * config.ENV_HEIGHT, 3)

    sidecar = read_sidecar(sequence_dir / "sidecar.json")
    assert sidecar["command"] == "scenegen"
    assert sidecar["seed"] == 3


def test_gradcheck(runner):
    result = runner.invoke(cli, ["gradcheck"])
    assert result.exit_code == 0, result.output
    assert "max relative error" in result.output

    result = runner.invoke(cli, ["gradcheck", "--tolerance", "1e-300"])
    assert result.exit_code == 3
    assert "gradient check failed" in result.output


def test_render_sphere(runner, sequence_dir, tmp_path):
    result = runner.invoke(
        cli,
        [
            "render-sphere",
            "--env",
            str(sequence_dir / "probes" / "gt_000.pfm"),
            "--out",
            str(tmp_path),
            "--size",
            "8",
            "--spp",
            "4",
            "--reference-spp",
            "32",
        ],
    )
    assert result.exit_code == 0, result.output
    rows = _read_csv(tmp_path / "report.csv")
    assert [row["mode"] for row in rows] == ["importance", "uniform"]
    assert all(float(row["mse"]) >= 0.0 for row in rows)
    assert read_pfm(tmp_path / "sphere_uniform.pfm").shape == (8, 8, 3)


def test_fit_single(runner, sequence_dir, tmp_path, config):
    result = runner.invoke(
        cli, ["fit-single", "--frames", str(sequence_dir), "--out", str(tmp_path), "--iters", "2"]
    )
    assert result.exit_code == 0, result.output
    assert "log-L2 vs ground truth" in result.output

    trace = _read_csv(tmp_path / "trace.csv")
    assert [int(row["iteration"]) for row in trace] == [0, 1, 2]
    sglv = load_volume(tmp_path / "volume.sglv")
    assert sglv.config.counts == tuple(config.FIT_VOLUME_COUNTS)
    assert read_pfm(tmp_path / "env.pfm").shape == (config.ENV_HEIGHT, 2 * config.ENV_HEIGHT, 3)
    assert "env.pfm" in read_sidecar(tmp_path / "sidecar.json")["outputs"]


def test_fit_single_without_blending(runner, sequence_dir, tmp_path):
    result = runner.invoke(
        cli,
        [
            "fit-single",
            "--frames",
            str(sequence_dir),
            "--out",
            str(tmp_path),
            "--iters",
            "1",
            "--no-blend",
        ],
    )
    assert result.exit_code == 0, result.output
    assert (tmp_path / "volume_map.pfm").exists()
    assert not (tmp_path / "env.pfm").exists()


def _video(runner, sequence_dir, out, *extra):
    return runner.invoke(
        cli,
        ["video", "--frames", str(sequence_dir), "--out", str(out), "--iters", "1", *extra],
    )


def test_video_resume_matches_a_full_run(runner, sequence_dir, tmp_path, config):
    full = tmp_path / "full"
    result = _video(runner, sequence_dir, full)
    assert result.exit_code == 0, result.output
    rows = _read_csv(full / "metrics.csv")
    assert [int(row["frame"]) for row in rows] == list(range(config.N_FRAMES))
    coverage = [float(row["coverage"]) for row in rows]
    assert coverage == sorted(coverage)
    manifest = read_sidecar(full / "manifest.json", run_manifest_schema)
    assert manifest["command"] == "video"
    assert [frame["frame"] for frame in manifest["frames"]] == list(range(config.N_FRAMES))
    assert manifest["frames"][0]["smoothness"] is None

    state = tmp_path / "state.pt"
    first = tmp_path / "first"
    result = _video(runner, sequence_dir, first, "--stop-after", "2", "--state", str(state))
    assert result.exit_code == 0, result.output
    assert sorted(p.name for p in first.glob("env_*.pfm")) == ["env_000.pfm", "env_001.pfm"]

    rest = tmp_path / "rest"
    result = _video(runner, sequence_dir, rest, "--resume", str(state))
    assert result.exit_code == 0, result.output
    assert [int(row["frame"]) for row in _read_csv(rest / "metrics.csv")] == list(
        range(2, config.N_FRAMES)
    )
    for index in range(config.N_FRAMES):
        resumed = (first if index < 2 else rest) / f"env_{index:03d}.pfm"
        assert np.allclose(read_pfm(resumed), read_pfm(full / f"env_{index:03d}.pfm"), atol=1e-6)


def test_video_with_nothing_left_to_do(runner, sequence_dir, tmp_path):
    state = tmp_path / "state.pt"
    result = _video(runner, sequence_dir, tmp_path / "once", "--count", "1", "--state", str(state))
    assert result.exit_code == 0, result.output

    result = _video(
        runner, sequence_dir, tmp_path / "again", "--count", "1", "--resume", str(state)
    )
    assert result.exit_code == 2
    assert "nothing to do" in result.output


def test_probe_outside_the_volume(runner, sequence_dir, tmp_path):
    result = runner.invoke(
        cli,
        [
            "fit-single",
            "--frames",
            str(sequence_dir),
            "--out",
            str(tmp_path),
            "--probe",
            "100,100,100",
        ],
    )
    assert result.exit_code == 2
    assert "error:" in result.output


def test_malformed_inputs(runner, tmp_path):
    result = runner.invoke(cli, ["video", "--frames", str(tmp_path), "--out", str(tmp_path / "out")])
    assert result.exit_code == 2

    (tmp_path / "scene.json").write_text('{"size": [1.0, 2.0]}')
    result = runner.invoke(
        cli, ["scenegen", "--out", str(tmp_path / "seq"), "--scene", str(tmp_path / "scene.json")]
    )
    assert result.exit_code == 2

    result = runner.invoke(
        cli, ["fit-single", "--frames", str(tmp_path), "--out", "x", "--probe", "1,2"]
    )
    assert result.exit_code == 2


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _command_args(command, sequence_dir):
    if command == "scenegen":
        return ["scenegen", "--seed", "5"]
    if command == "fit-single":
        return ["fit-single", "--frames", str(sequence_dir), "--iters", "2"]
    if command == "video":
        return ["video", "--frames", str(sequence_dir), "--iters", "1", "--count", "2"]
    return [
        "render-sphere",
        "--env",
        str(sequence_dir / "probes" / "gt_000.pfm"),
        "--size",
        "8",
        "--spp",
        "4",
        "--reference-spp",
        "16",
    ]


@pytest.mark.parametrize("command", ["scenegen", "fit-single", "video", "render-sphere"])
def test_outputs_are_bitwise_reproducible(runner, sequence_dir, tmp_path, command):
    outputs = []
    for name, threads in [("first", "1"), ("again", "1"), ("threaded", "4")]:
        out = tmp_path / name
        args = ["--threads", threads, *_command_args(command, sequence_dir), "--out", str(out)]
        result = runner.invoke(cli, args)
        assert result.exit_code == 0, result.output
        outputs.append(_files(out))
    assert outputs[0]
    assert outputs[1] == outputs[0]
    assert outputs[2] == outputs[0]


def test_height_and_poses_overrides(runner, sequence_dir, tmp_path, config):
    poses = tmp_path / "poses.json"
    document = json.loads((sequence_dir / "poses.json").read_text())
    poses.write_text(json.dumps(document))
    height = config.ENV_HEIGHT // 2

    out = tmp_path / "single"
    result = runner.invoke(
        cli,
        [
            "fit-single",
            "--frames",
            str(sequence_dir),
            "--poses",
            str(poses),
            "--height",
            str(height),
            "--iters",
            "1",
            "--out",
            str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    assert read_pfm(out / "env.pfm").shape == (height, 2 * height, 3)
    sidecar = read_sidecar(out / "sidecar.json")
    assert sidecar["options"]["height"] == height
    assert sidecar["inputs"]["poses"] == str(poses)

    out = tmp_path / "video"
    result = _video(runner, sequence_dir, out, "--count", "2", "--height", str(height), "--poses", str(poses))
    assert result.exit_code == 0, result.output
    assert read_pfm(out / "env_001.pfm").shape == (height, 2 * height, 3)

    document["frames"] = document["frames"][:1]
    poses.write_text(json.dumps(document))
    result = _video(runner, sequence_dir, tmp_path / "short", "--poses", str(poses))
    assert result.exit_code == 2


def test_render_mirror_sphere(runner, sequence_dir, tmp_path):
    result = runner.invoke(
        cli,
        [
            "render-sphere",
            "--env",
            str(sequence_dir / "probes" / "gt_000.pfm"),
            "--out",
            str(tmp_path),
            "--mode",
            "mirror",
            "--size",
            "8",
        ],
    )
    assert result.exit_code == 0, result.output
    assert read_pfm(tmp_path / "sphere_mirror.pfm").shape == (8, 8, 3)
    assert not (tmp_path / "report.csv").exists()
    assert read_sidecar(tmp_path / "sidecar.json")["outputs"] == ["sphere_mirror.pfm"]
