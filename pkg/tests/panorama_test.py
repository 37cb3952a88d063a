import numpy as np
import pytest
import torch

from sglv.core import Camera, DepthMap, HdrImage, equirect_directions, project
from sglv.errors import ShapeMismatchError
from sglv.panorama import (
    Bvh,
    PanoBundle,
    PartialMesh,
    build_partial_mesh,
    cast_rays,
    intersect_triangles,
    render_partial_pano,
)


def test_flat_wall_keeps_every_triangle(wall_frame):
    camera, image, depth = wall_frame
    mesh = build_partial_mesh(camera, depth, image)
    assert mesh.n_triangles == (camera.width - 1) * (camera.height - 1) * 2
    assert np.allclose(mesh.vertices[:, 2], -2.0)


def test_depth_step_drops_bridging_triangles(wall_frame):
    camera, image, _ = wall_frame
    data = torch.full((camera.height, camera.width), 2.0)
    data[:, : camera.width // 2] = 1.0
    mesh = build_partial_mesh(camera, DepthMap(data), image)
    assert mesh.n_triangles == (camera.width - 2) * (camera.height - 1) * 2


def test_invalid_depth_gives_empty_mesh(wall_frame):
    camera, image, _ = wall_frame
    mesh = build_partial_mesh(camera, DepthMap(torch.zeros(camera.height, camera.width)), image)
    assert mesh.is_empty

    bundle = render_partial_pano(mesh, (0.0, 0.0, 0.0), 4)
    assert not bundle.mask.data.any()
    assert not bundle.color.data.any()
    assert torch.isinf(bundle.depth.data).all()


def test_image_and_depth_sizes_must_match(wall_frame):
    camera, _, depth = wall_frame
    with pytest.raises(ShapeMismatchError):
        build_partial_mesh(camera, depth, HdrImage(torch.zeros(3, 3, 3)))


def test_wall_panorama_from_the_camera(wall_frame):
    camera, image, depth = wall_frame
    bundle = render_partial_pano(build_partial_mesh(camera, depth, image), camera.position, 16)
    hit = bundle.mask.data[..., 0] > 0
    assert hit.any()

    dirs = equirect_directions(16, torch.float64)[hit]
    distance = bundle.depth.data[..., 0][hit].double()
    assert torch.allclose((distance.unsqueeze(-1) * dirs)[:, 2], torch.full_like(distance, -2.0), atol=1e-5)
    assert torch.allclose(bundle.color.data[hit], torch.full((int(hit.sum()), 3), 0.5))

    # every hit direction falls inside the image
    pixel = project(camera, dirs).pixel
    assert (pixel[:, 0] >= -1e-6).all() and (pixel[:, 0] <= camera.width - 1 + 1e-6).all()
    assert (pixel[:, 1] >= -1e-6).all() and (pixel[:, 1] <= camera.height - 1 + 1e-6).all()


def test_probe_behind_the_wall_sees_nothing_beyond_it(wall_frame):
    camera, image, depth = wall_frame
    bundle = render_partial_pano(build_partial_mesh(camera, depth, image), (0.0, 0.0, -3.0), 16)
    away = equirect_directions(16)[..., 2] < 0
    assert not bundle.mask.data[..., 0][away].any()


def test_bvh_matches_brute_force():
    rng = np.random.default_rng(4)
    vertices = rng.uniform(-1.0, 1.0, size=(90, 3))
    triangles = rng.permutation(90).reshape(30, 3)
    mesh = PartialMesh(vertices, np.zeros((90, 3)), triangles, Bvh.build(vertices[triangles]))
    origin = np.array([0.0, 0.0, -3.0])
    dirs = rng.normal(size=(200, 3)) + np.array([0.0, 0.0, 3.0])
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)

    t, tri, _ = cast_rays(mesh, origin, dirs)

    corners = vertices[triangles]
    expected = np.full(len(dirs), np.inf)
    for v0, v1, v2 in corners:
        hit, _, _ = intersect_triangles(origin, dirs, v0, v1, v2)
        expected = np.minimum(expected, hit)
    assert np.isfinite(expected).any()
    assert np.allclose(t, expected)
    assert ((tri >= 0) == np.isfinite(expected)).all()


def test_empty_bundle():
    bundle = PanoBundle.empty(4)
    assert bundle.height == 4
    assert torch.isinf(bundle.depth.data).all()


def _rectangle_solid_angle(x1, x2, y1, y2, distance):
    def corner(x, y):
        return np.arctan(x * y / (distance * np.sqrt(x * x + y * y + distance * distance)))

    return corner(x2, y2) - corner(x1, y2) - corner(x2, y1) + corner(x1, y1)


def _masked_solid_angle(bundle):
    height = bundle.height
    edges = np.cos(np.pi * np.arange(height + 1) / height)
    row_area = (edges[:-1] - edges[1:]) * np.pi / height
    return float((bundle.mask.data[..., 0].numpy() * row_area[:, None]).sum())


@pytest.fixture(scope="module")
def wide_wall():
    camera = Camera.look_along((0.0, 0.0, 0.0), (0.0, 0.0, -1.0), 40, 30, 90.0)
    image = HdrImage(torch.full((30, 40, 3), 0.5))
    mesh = build_partial_mesh(camera, DepthMap(torch.full((30, 40), 2.0)), image)
    return mesh


def test_mask_covers_the_wall_solid_angle(wide_wall):
    x1, y1, _ = wide_wall.vertices.min(axis=0)
    x2, y2, _ = wide_wall.vertices.max(axis=0)
    for z in (0.0, -1.0):
        bundle = render_partial_pano(wide_wall, (0.0, 0.0, z), 120)
        expected = _rectangle_solid_angle(x1, x2, y1, y2, 2.0 + z)
        assert _masked_solid_angle(bundle) == pytest.approx(expected, rel=0.02)


def test_masked_fraction_grows_toward_the_wall(wide_wall):
    fractions = [
        float(render_partial_pano(wide_wall, (0.0, 0.0, z), 60).mask.data.mean())
        for z in (0.0, -0.5, -1.0, -1.5, -1.8)
    ]
    assert all(a < b for a, b in zip(fractions, fractions[1:]))
