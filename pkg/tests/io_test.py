import json

import numpy as np
import pytest
import torch

from sglv.core import EquirectMap
from sglv.errors import ContractError, InputError
from sglv.io import (
    load_state,
    read_depth,
    read_envmap,
    read_json,
    read_pfm,
    read_sidecar,
    save_state,
    write_map,
    write_pfm,
    write_sidecar,
    write_table,
)
from sglv.schemas import scene_schema
from sglv.temporal import TemporalState, VideoState


def test_pfm_round_trip(tmp_path):
    color = np.random.default_rng(0).random((3, 5, 3)).astype(np.float32) * 40.0
    write_pfm(tmp_path / "color.pfm", color)
    assert np.array_equal(read_pfm(tmp_path / "color.pfm"), color)

    gray = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_pfm(tmp_path / "gray.pfm", gray)
    assert np.array_equal(read_pfm(tmp_path / "gray.pfm"), gray)


def test_pfm_rows_are_stored_bottom_up(tmp_path):
    data = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    write_pfm(tmp_path / "rows.pfm", data)
    payload = (tmp_path / "rows.pfm").read_bytes()
    assert payload.startswith(b"Pf\n2 2\n-1.0\n")
    assert np.frombuffer(payload[-16:], dtype="<f4").tolist() == [3.0, 4.0, 1.0, 2.0]


def test_read_big_endian_pfm(tmp_path):
    data = np.array([[0.5, 1.5]], dtype=">f4")
    (tmp_path / "big.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + data.tobytes())
    assert read_pfm(tmp_path / "big.pfm").tolist() == [[0.5, 1.5]]


def test_malformed_pfm(tmp_path):
    (tmp_path / "bad.pfm").write_bytes(b"P6\n2 2\n255\n")
    with pytest.raises(InputError):
        read_pfm(tmp_path / "bad.pfm")

    (tmp_path / "short.pfm").write_bytes(b"PF\n4 4\n-1.0\n" + b"\x00" * 8)
    with pytest.raises(InputError):
        read_pfm(tmp_path / "short.pfm")

    with pytest.raises(InputError):
        read_pfm(tmp_path / "missing.pfm")


def test_write_pfm_rejects_two_channels(tmp_path):
    with pytest.raises(ContractError):
        write_pfm(tmp_path / "two.pfm", np.zeros((2, 2, 2)))


def test_envmap_with_preview(tmp_path):
    env = EquirectMap(torch.rand(4, 8, 3) * 3.0)
    write_map(tmp_path / "env.pfm", env)
    assert (tmp_path / "env.png").exists()
    assert torch.equal(read_envmap(tmp_path / "env.pfm").data, env.data)

    preview = read_envmap(tmp_path / "env.png")
    assert preview.kind == "ldr"
    assert preview.data.max() <= 1.0


def test_read_depth_needs_one_channel(tmp_path):
    write_pfm(tmp_path / "depth.pfm", np.ones((2, 3, 3), dtype=np.float32))
    with pytest.raises(InputError):
        read_depth(tmp_path / "depth.pfm")


def test_read_json_reports_schema_errors(tmp_path):
    (tmp_path / "scene.json").write_text(json.dumps({"size": [1.0, 2.0]}))
    with pytest.raises(InputError):
        read_json(tmp_path / "scene.json", scene_schema)

    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(InputError):
        read_json(tmp_path / "broken.json", scene_schema)


def test_sidecar(tmp_path):
    write_sidecar(tmp_path / "sidecar.json", "fit-single", 7, {"iters": 3}, {"frames": tmp_path}, ["env.pfm"])
    sidecar = read_sidecar(tmp_path / "sidecar.json")
    assert sidecar["command"] == "fit-single"
    assert sidecar["seed"] == 7
    assert sidecar["options"] == {"iters": 3}
    assert sidecar["inputs"] == {"frames": str(tmp_path)}
    assert sidecar["outputs"] == ["env.pfm"]


def test_write_table_needs_rows(tmp_path):
    with pytest.raises(ContractError):
        write_table(tmp_path / "table.csv", [])
    write_table(tmp_path / "table.csv", [{"mode": "uniform", "mse": 0.5}])
    assert (tmp_path / "table.csv").read_text().splitlines() == ["mode,mse", "uniform,0.5"]


def test_state_round_trip(small_grid, tmp_path):
    temporal = TemporalState.initial(4)
    temporal = TemporalState(
        EquirectMap.full(4, 0.25), temporal.depth, EquirectMap.full(4, 0.5, 1, "mask"), index=3
    )
    state = VideoState(temporal, small_grid, [EquirectMap.full(4, 1.5)])
    save_state(tmp_path / "state.pt", state)

    loaded = load_state(tmp_path / "state.pt")
    assert loaded.index == 3
    assert torch.equal(loaded.temporal.previous.data, temporal.previous.data)
    assert torch.isinf(loaded.temporal.depth.data).all()
    assert torch.equal(loaded.temporal.weight.data, temporal.weight.data)
    assert loaded.volume.config.same_grid(small_grid.config)
    assert torch.equal(loaded.volume.stacked(), small_grid.stacked())
    assert len(loaded.predictions) == 1


def test_state_without_volume(tmp_path):
    save_state(tmp_path / "state.pt", VideoState(TemporalState.initial(2)))
    loaded = load_state(tmp_path / "state.pt")
    assert loaded.volume is None
    assert loaded.predictions is None

    (tmp_path / "junk.pt").write_bytes(b"not a state")
    with pytest.raises(InputError):
        load_state(tmp_path / "junk.pt")
