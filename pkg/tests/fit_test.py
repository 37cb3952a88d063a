import math

import pytest
import torch

from sglv.cli import random_target, random_volume
from sglv.config import Config
from sglv.core import Camera, EquirectMap, equirect_directions
from sglv.errors import ContractError, ShapeMismatchError
from sglv.fit import (
    FitOptions,
    LossWeights,
    decode,
    encode,
    fit_sglv,
    grad_check,
    loss_log_l2,
    loss_render,
    loss_smooth,
    loss_terms,
    total_loss,
)
from sglv.raytrace import RenderSettings, render_envmap
from sglv.scenegen import gen_trajectory, render_gt_envmap, render_scene_view, sample_probe_positions
from sglv.shading import MicrofacetBrdf, SphereRenderSpec, prepare_sphere
from sglv.volume import SglvGrid, build_initial_volume, clear_near_surface, make_volume_config


@pytest.fixture(scope="module")
def sampler():
    return prepare_sphere(MicrofacetBrdf(), SphereRenderSpec(size=8, spp=8))


def _random_map(seed, height=4, scale=1.0):
    generator = torch.Generator().manual_seed(seed)
    return EquirectMap(scale * torch.rand(height, 2 * height, 3, generator=generator))


def test_log_l2_examples():
    env = _random_map(0)
    assert float(loss_log_l2(env, env)) == 0.0

    pred = EquirectMap(torch.full((1, 2, 1), math.e - 1, dtype=torch.float64))
    gt = EquirectMap(torch.zeros(1, 2, 1, dtype=torch.float64))
    assert float(loss_log_l2(pred, gt)) == pytest.approx(1.0)


def test_log_l2_contracts():
    with pytest.raises(ContractError):
        loss_log_l2(-torch.ones(2, 4, 3), torch.zeros(2, 4, 3))
    with pytest.raises(ShapeMismatchError):
        loss_log_l2(_random_map(0, 4), _random_map(0, 2))


def test_log_l2_grows_with_overshoot():
    gt = EquirectMap.full(4, 0.3)
    pred = EquirectMap.full(4, 0.5)
    doubled = EquirectMap.full(4, 1.0)
    assert float(loss_log_l2(doubled, gt)) > float(loss_log_l2(pred, gt))


def test_smooth_is_log_l2():
    curr, prev = _random_map(1, scale=3.0), _random_map(2, scale=3.0)
    assert float(loss_smooth(curr, curr)) == 0.0
    assert float(loss_smooth(curr, prev)) == float(loss_log_l2(curr, prev))
    expected = ((torch.log1p(curr.data) - torch.log1p(prev.data)) ** 2).mean()
    assert float(loss_smooth(curr, prev)) == pytest.approx(float(expected))


def test_render_loss(sampler):
    env = _random_map(3, scale=4.0)
    assert float(loss_render(env, env, sampler=sampler)) == 0.0

    # a diffuse-only sphere shows albedo times the constant radiance, so both saturate
    diffuse = prepare_sphere(
        MicrofacetBrdf(specular=0.0), SphereRenderSpec(size=8, spp=8, specular_weight=0.0)
    )
    bright, brighter = EquirectMap.full(4, 8.0), EquirectMap.full(4, 10.0)
    assert float(loss_render(bright, brighter, sampler=diffuse)) == 0.0

    dim = EquirectMap.full(4, 0.1)
    assert float(loss_render(dim, bright, sampler=sampler)) > 0.0


def test_total_loss_is_a_weighted_sum(sampler):
    preds = [_random_map(4), _random_map(5)]
    gts = [_random_map(6), _random_map(7)]
    previous = [_random_map(8), _random_map(9)]
    weights = LossWeights(0.3, 0.01)

    terms = loss_terms(preds, gts, weights, "video", previous, sampler)
    log_l2 = (loss_log_l2(preds[0], gts[0]) + loss_log_l2(preds[1], gts[1])) / 2
    render = (
        loss_render(preds[0], gts[0], sampler=sampler) + loss_render(preds[1], gts[1], sampler=sampler)
    ) / 2
    smooth = (loss_smooth(preds[0], previous[0]) + loss_smooth(preds[1], previous[1])) / 2
    assert float(terms.log_l2) == pytest.approx(float(log_l2))
    assert float(terms.render) == pytest.approx(float(render))
    assert float(terms.total) == pytest.approx(float(log_l2 + 0.3 * render + 0.01 * smooth))

    single = total_loss(preds, gts, weights, "single", sampler=sampler)
    assert float(single) == pytest.approx(float(log_l2 + 0.3 * render))

    bare = total_loss(preds, gts, LossWeights(0.0, 0.0))
    assert float(bare) == pytest.approx(float(log_l2))


def test_total_loss_of_identical_lists_is_zero(sampler):
    maps = [_random_map(10), _random_map(11)]
    assert float(total_loss(maps, maps, LossWeights(), "video", maps, sampler)) == 0.0


def test_total_loss_contracts():
    with pytest.raises(ContractError):
        total_loss([_random_map(0)], [], LossWeights(0.0, 0.0))
    with pytest.raises(ContractError):
        total_loss([_random_map(0)], [_random_map(1)], LossWeights(0.0, 0.0), mode="batch")


@pytest.fixture
def wall_volume(wall_frame):
    camera, image, depth = wall_frame
    config = make_volume_config(depth.max_depth(), camera, counts=(6, 5, 6))
    return build_initial_volume(config, camera, image, depth)


def _fit_options(**overrides):
    options = dict(iterations=2, step_size=0.05, sphere_size=4, spp=2, weights=LossWeights(0.3, 0.0))
    return FitOptions(**{**options, **overrides})


def test_fit_fixed_point(wall_volume):
    opts = _fit_options()
    start = clear_near_surface(SglvGrid.from_initial(wall_volume), wall_volume.empty)
    settings = RenderSettings.for_config(wall_volume.config, opts.max_samples)
    position = (0.0, 0.0, -1.0)
    target = render_envmap(start, position, 4, settings)

    result = fit_sglv(wall_volume, [(position, target)], opts)
    assert result.initial_loss == 0.0
    assert result.best_loss == 0.0
    assert result.best_iteration == -1
    for name, grid in start.grids().items():
        assert torch.equal(getattr(result.sglv, name), grid)


def test_fit_keeps_grid_constraints(wall_volume):
    opts = _fit_options(iterations=3)
    targets = [((0.0, 0.0, -1.0), EquirectMap.full(4, 0.5)), ((0.3, 0.1, -0.8), EquirectMap.full(4, 2.0))]
    result = fit_sglv(wall_volume, targets, opts)

    result.sglv.validate()
    assert len(result.trace) == opts.iterations + 1
    assert [row.iteration for row in result.trace] == list(range(opts.iterations + 1))
    assert result.best_loss <= result.initial_loss
    assert result.best_loss <= min(row.total for row in result.trace)
    assert len(result.predictions) == 2


def test_fit_rejects_targets_outside_the_volume(wall_volume):
    with pytest.raises(ContractError):
        fit_sglv(wall_volume, [((0.0, 0.0, 50.0), EquirectMap.full(4, 0.5))], _fit_options())
    with pytest.raises(ContractError):
        fit_sglv(wall_volume, [], _fit_options())


def test_fit_options_contracts():
    with pytest.raises(ContractError):
        FitOptions(iterations=0)
    with pytest.raises(ContractError):
        LossWeights(-1.0, 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_on_random_volumes(seed):
    sglv = random_volume(4, seed=seed)
    target = random_target(4, seed=seed + 100)
    error = grad_check(sglv, [((0.1, -0.2, 0.05), target)], Config.GRADCHECK_EPS)
    assert error < Config.GRADCHECK_TOLERANCE


def test_encoding_reproduces_the_start(wall_volume, small_grid):
    start = clear_near_surface(SglvGrid.from_initial(wall_volume), wall_volume.empty)
    decoded = decode(start.config, encode(start), wall_volume.empty)
    for name, grid in start.grids().items():
        assert torch.allclose(getattr(decoded, name), grid, atol=1e-5), name

    # unobserved voxels keep their zero opacity instead of picking up haze
    unseen = start.alpha == 0
    assert unseen.any()
    assert float(decoded.alpha[unseen].max()) < 1e-5

    keep_all = torch.zeros(small_grid.config.shape, dtype=small_grid.dtype)
    decoded = decode(small_grid.config, encode(small_grid), keep_all)
    for name, grid in small_grid.grids().items():
        assert torch.allclose(getattr(decoded, name), grid, atol=1e-5), name


def test_first_iterate_matches_the_start(wall_volume):
    targets = [((0.0, 0.0, -1.0), EquirectMap.full(4, 0.5)), ((0.3, 0.1, -0.8), EquirectMap.full(4, 2.0))]
    result = fit_sglv(wall_volume, targets, _fit_options(iterations=1))
    assert result.trace[0].total == pytest.approx(result.initial_loss, rel=1e-4, abs=1e-7)


@pytest.fixture(scope="module")
def box_fit_problem(box_scene):
    camera = gen_trajectory(box_scene, 1, seed=0, width=64, height=48)[0]
    image, depth = render_scene_view(box_scene, camera)
    config = make_volume_config(depth.max_depth(), camera, counts=Config.FIT_VOLUME_COUNTS)
    init = build_initial_volume(config, camera, image, depth)
    positions = sample_probe_positions(camera, depth.max_depth(), 3, seed=0, depth=depth)
    targets = [(p, render_gt_envmap(box_scene, p, 60, camera.rotation)) for p in positions]
    return init, targets


def test_fit_halves_the_log_l2_on_the_box_scene(box_fit_problem):
    init, targets = box_fit_problem
    assert init.config.counts == (21, 15, 16)
    opts = FitOptions(
        iterations=500, step_size=0.1, weights=LossWeights(0.0, 0.0), sphere_size=4, spp=2, log_every=100
    )
    result = fit_sglv(init, targets, opts)
    assert result.best_loss <= 0.5 * result.initial_loss
    assert result.best_iteration >= 0


def test_fit_is_deterministic_per_seed(box_fit_problem):
    init, targets = box_fit_problem
    opts = _fit_options(iterations=3, sphere_size=8, spp=4, seed=11)
    first = fit_sglv(init, targets[:1], opts)
    second = fit_sglv(init, targets[:1], opts)
    assert first.trace == second.trace
    for name, grid in first.sglv.grids().items():
        assert torch.equal(getattr(second.sglv, name), grid)


def _cone_mean(env, config, toward, degrees=20.0):
    dirs = config.to_world_dir(equirect_directions(env.height, torch.float64))
    toward = torch.as_tensor(toward, dtype=torch.float64)
    inside = dirs @ (toward / toward.norm()) >= math.cos(math.radians(degrees))
    return float(env.data[inside].mean())


def test_fitted_volume_keeps_the_occluder_shadow(shadow_scene):
    # the camera sits beside the lit position, so its view of the panel is observed
    camera = Camera.look_along((2.0, 1.2, 0.3), (0.0, 0.5, 0.866), 64, 48, 90.0)
    image, depth = render_scene_view(shadow_scene, camera)
    config = make_volume_config(depth.max_depth(), camera, counts=Config.FIT_VOLUME_COUNTS)
    init = build_initial_volume(config, camera, image, depth)
    panel = torch.tensor([2.0, 3.0, 2.0], dtype=torch.float64)
    shadowed = torch.tensor([2.0, 1.3, 2.0], dtype=torch.float64)
    lit = torch.tensor([2.0, 1.3, 0.6], dtype=torch.float64)
    targets = [(p, render_gt_envmap(shadow_scene, p, 32, camera.rotation)) for p in (shadowed, lit)]

    # the ground truth itself shows the shadow under the slab
    gt_shadowed = _cone_mean(targets[0][1], config, panel - shadowed)
    gt_lit = _cone_mean(targets[1][1], config, panel - lit)
    assert gt_shadowed <= 0.7 * gt_lit

    result = fit_sglv(init, targets, _fit_options(iterations=10, weights=LossWeights(0.0, 0.0)))
    settings = RenderSettings.for_config(config)
    under = render_envmap(result.sglv, shadowed, 32, settings)
    beside = render_envmap(result.sglv, lit, 32, settings)
    assert _cone_mean(under, config, panel - shadowed) <= 0.7 * _cone_mean(beside, config, panel - lit)
