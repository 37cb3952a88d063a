import os

import pytest
import torch
from click.testing import CliRunner

os.environ["SGLV_CONFIG_TYPE"] = "sglv.config.TestingConfig"

from sglv import load_config  # noqa: E402
from sglv.cli import cli  # noqa: E402
from sglv.core import Camera, DepthMap, HdrImage  # noqa: E402
from sglv.scenegen import default_box_scene, occluder_scene  # noqa: E402
from sglv.volume import SglvGrid, VolumeConfig  # noqa: E402


@pytest.fixture(scope="session")
def config():
    return load_config()


@pytest.fixture
def camera():
    """8x6 pinhole at the origin looking down -z."""
    return Camera.look_along((0.0, 0.0, 0.0), (0.0, 0.0, -1.0), 8, 6, 60.0)


@pytest.fixture
def wall_frame(camera):
    """A fronto-parallel wall two units in front of ``camera``."""
    image = HdrImage(torch.full((camera.height, camera.width, 3), 0.5))
    depth = DepthMap(torch.full((camera.height, camera.width), 2.0))
    return camera, image, depth


@pytest.fixture
def small_grid():
    config = VolumeConfig((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), (4, 4, 4))
    generator = torch.Generator().manual_seed(7)
    shape = config.shape
    s = torch.randn(*shape, 3, generator=generator, dtype=torch.float64)
    return SglvGrid(
        config,
        c=torch.rand(*shape, 3, generator=generator, dtype=torch.float64),
        alpha=0.1 + 0.8 * torch.rand(shape, generator=generator, dtype=torch.float64),
        w=torch.rand(*shape, 3, generator=generator, dtype=torch.float64),
        lam=4.0 * torch.rand(shape, generator=generator, dtype=torch.float64),
        s=s / s.norm(dim=-1, keepdim=True),
    )


@pytest.fixture(scope="module")
def box_scene():
    return default_box_scene()


@pytest.fixture(scope="module")
def shadow_scene():
    return occluder_scene()


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def sequence_dir(runner, tmp_path_factory):
    out = tmp_path_factory.mktemp("sequence")
    result = runner.invoke(cli, ["scenegen", "--out", str(out), "--seed", "3"])
    assert result.exit_code == 0, result.output

    yield out
