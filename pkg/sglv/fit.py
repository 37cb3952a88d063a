"""Lighting losses, gradient-based SGLV fitting and finite-difference gradient checks."""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F

from sglv.config import Config
from sglv.core import EquirectMap
from sglv.errors import ContractError
from sglv.raytrace import (
    RenderSettings,
    envmap_loss_gradients,
    log_l2_error,
    render_envmap_tensor,
)
from sglv.shading import MicrofacetBrdf, SphereRenderSpec, prepare_sphere
from sglv.volume import SglvGrid, clear_near_surface

logger = logging.getLogger(__name__)

ALPHA_CLIP = 1e-6
SOFTPLUS_FLOOR = 1e-6
ADAM_EPS = 1e-15
LOSS_MODES = ("single", "video")


@dataclass(frozen=True)
class LossWeights:
    render: float = Config.LOSS_EPS_R
    smooth: float = Config.LOSS_EPS_SM

    def __post_init__(self):
        if self.render < 0 or self.smooth < 0:
            raise ContractError("loss weights must be nonnegative")


@dataclass(frozen=True)
class FitOptions:
    iterations: int = Config.FIT_ITERATIONS
    step_size: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    sphere_size: int = Config.FIT_SPHERE_SIZE
    spp: int = Config.FIT_SPP
    max_samples: int = Config.MAX_SAMPLES
    seed: int = Config.SEED
    log_every: int = Config.FIT_LOG_EVERY

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractError(f"iteration budget must be at least 1, got {self.iterations}")
        if not self.step_size > 0:
            raise ContractError(f"step size must be positive, got {self.step_size}")

    def sphere_spec(self):
        return SphereRenderSpec(size=self.sphere_size, spp=self.spp, seed=self.seed)


class LossTerms(NamedTuple):
    log_l2: torch.Tensor
    render: torch.Tensor
    smooth: torch.Tensor
    total: torch.Tensor


class TraceRow(NamedTuple):
    iteration: int
    log_l2: float
    render: float
    total: float


@dataclass(frozen=True, eq=False)
class FitResult:
    sglv: SglvGrid
    trace: list
    initial_loss: float
    best_loss: float
    best_iteration: int
    predictions: list


def _check_hdr(env, name):
    if torch.is_tensor(env):
        env = EquirectMap(env, "hdr")
    if (env.data.detach() < 0).any():
        raise ContractError(f"{name} must be nonnegative")
    return env


def loss_log_l2(pred, gt):
    """Mean squared difference of ``log(1 + L)`` over pixels and channels."""
    pred = _check_hdr(pred, "prediction")
    gt = _check_hdr(gt, "ground truth")
    pred.check_same_shape(gt)
    return log_l2_error(pred.data, gt.data.to(pred.data.dtype))


def loss_smooth(curr, prev):
    return loss_log_l2(curr, prev)


def loss_render(pred, gt, brdf=None, spec=None, sampler=None):
    """Squared difference of glossy-sphere renders clamped at 1.

    Both spheres share one set of sample directions, so equal maps give an
    exactly zero loss.
    """
    pred = _check_hdr(pred, "prediction")
    gt = _check_hdr(gt, "ground truth")
    pred.check_same_shape(gt)
    if sampler is None:
        sampler = prepare_sphere(brdf or MicrofacetBrdf(), spec or SphereRenderSpec())
    rendered = sampler.shade(pred).clamp(max=1.0)
    reference = sampler.shade(gt.detach()).clamp(max=1.0).to(rendered.dtype)
    return ((rendered - reference) ** 2).mean()


def loss_terms(preds, gts, weights=None, mode="single", previous=None, sampler=None):
    weights = weights or LossWeights()
    if mode not in LOSS_MODES:
        raise ContractError(f"unknown loss mode {mode!r}")
    if len(preds) != len(gts):
        raise ContractError(f"got {len(preds)} predictions for {len(gts)} targets")
    if not preds:
        raise ContractError("need at least one prediction")
    video = mode == "video" and previous is not None
    if video and len(previous) != len(preds):
        raise ContractError(f"got {len(previous)} previous maps for {len(preds)} predictions")
    if weights.render > 0 and sampler is None:
        sampler = prepare_sphere(
            MicrofacetBrdf(), SphereRenderSpec(size=Config.FIT_SPHERE_SIZE, spp=Config.FIT_SPP)
        )

    log_l2 = torch.stack([loss_log_l2(p, g) for p, g in zip(preds, gts)]).mean()
    zero = torch.zeros((), dtype=log_l2.dtype)
    render = zero
    if weights.render > 0:
        render = torch.stack(
            [loss_render(p, g, sampler=sampler) for p, g in zip(preds, gts)]
        ).mean()
    smooth = zero
    if video and weights.smooth > 0:
        smooth = torch.stack([loss_smooth(p, q) for p, q in zip(preds, previous)]).mean()
    total = log_l2 + weights.render * render + weights.smooth * smooth
    return LossTerms(log_l2, render, smooth, total)


def total_loss(preds, gts, weights=None, mode="single", previous=None, sampler=None):
    """``L_L2 + ε_R L_R``, plus ``ε_sm L_sm`` against ``previous`` in video mode."""
    return loss_terms(preds, gts, weights, mode, previous, sampler).total


def _inverse_softplus(x):
    return x + torch.log(-torch.expm1(-x))


def encode(sglv):
    """Unconstrained parameters whose decoding reproduces ``sglv``.

    Values are floored at ``SOFTPLUS_FLOOR`` and ``ALPHA_CLIP`` away from the
    saturated ends, which moves a grid by at most the floor itself.
    """
    alpha = sglv.alpha.clamp(ALPHA_CLIP, 1 - ALPHA_CLIP)
    return {
        "c": _inverse_softplus(sglv.c.clamp_min(SOFTPLUS_FLOOR)),
        "alpha": torch.logit(alpha),
        "w": _inverse_softplus(sglv.w.clamp_min(SOFTPLUS_FLOOR)),
        "lam": _inverse_softplus(sglv.lam.clamp_min(SOFTPLUS_FLOOR)),
        "s": sglv.s.clone(),
    }


def decode(config, params, empty):
    grid = SglvGrid(
        config,
        c=F.softplus(params["c"]),
        alpha=torch.sigmoid(params["alpha"]),
        w=F.softplus(params["w"]),
        lam=F.softplus(params["lam"]),
        s=params["s"] / params["s"].norm(dim=-1, keepdim=True).clamp_min(1e-12),
    )
    return clear_near_surface(grid, empty)


def _check_targets(config, targets):
    if not targets:
        raise ContractError("fitting needs at least one target")
    for position, _ in targets:
        if not bool(config.contains(torch.as_tensor(position, dtype=torch.float64))):
            raise ContractError(f"target position {list(position)} lies outside the volume")


def fit_sglv(init, targets, opts=None, previous=None, mode="single"):
    """Fit an SGLV to ``targets``, a list of (world position, HDR map) pairs.

    Starts from the initial colors and opacities with an empty lobe and
    returns the iterate with the lowest total loss; the unmodified start
    counts as the first iterate.
    """
    opts = opts or FitOptions()
    _check_targets(init.config, targets)
    settings = RenderSettings.for_config(init.config, opts.max_samples)
    sampler = prepare_sphere(MicrofacetBrdf(), opts.sphere_spec())
    gts = [env for _, env in targets]

    def evaluate(grid):
        preds = [
            EquirectMap(render_envmap_tensor(grid, position, env.height, settings), "hdr")
            for position, env in targets
        ]
        return preds, loss_terms(preds, gts, opts.weights, mode, previous, sampler)

    start = clear_near_surface(SglvGrid.from_initial(init), init.empty)
    with torch.no_grad():
        preds, terms = evaluate(start)
    best_grid, best_preds = start, preds
    initial_loss = best_loss = float(terms.total)
    best_iteration = -1

    params = {k: v.detach().clone().requires_grad_(True) for k, v in encode(start).items()}
    optimizer = torch.optim.Adam(params.values(), lr=opts.step_size, eps=ADAM_EPS)
    trace = []
    for iteration in range(opts.iterations + 1):
        grid = decode(init.config, params, init.empty)
        preds, terms = evaluate(grid)
        total = float(terms.total)
        trace.append(TraceRow(iteration, float(terms.log_l2), float(terms.render), total))
        if total < best_loss:
            best_loss, best_iteration = total, iteration
            best_grid = grid.detach()
            best_preds = [p.detach() for p in preds]
        if iteration % max(opts.log_every, 1) == 0:
            logger.info("fit iteration %d: loss %.6f (best %.6f)", iteration, total, best_loss)
        if iteration == opts.iterations:
            break
        optimizer.zero_grad()
        terms.total.backward()
        optimizer.step()

    logger.info(
        "fit finished: loss %.6f -> %.6f at iteration %d", initial_loss, best_loss, best_iteration
    )
    return FitResult(
        sglv=best_grid,
        trace=trace,
        initial_loss=initial_loss,
        best_loss=best_loss,
        best_iteration=best_iteration,
        predictions=best_preds,
    )


def _mean_log_l2(sglv, targets, settings):
    losses = [
        log_l2_error(
            render_envmap_tensor(sglv, position, env.height, settings, early_out=False),
            env.data.to(sglv.dtype),
        )
        for position, env in targets
    ]
    return torch.stack(losses).mean()


def grad_check(sglv, targets, eps=Config.GRADCHECK_EPS, max_samples=Config.MAX_SAMPLES):
    """Largest relative error between autograd and central-difference gradients.

    Runs in float64 over every parameter of every grid against the mean
    log-L2 loss of ``targets``. Opacities within ``eps`` of 0 or 1 are
    skipped; the relative error denominator is floored at 1e-6.
    """
    sglv = sglv.to(torch.float64)
    settings = RenderSettings.for_config(sglv.config, max_samples)
    analytic = [
        envmap_loss_gradients(sglv, position, env, settings) for position, env in targets
    ]
    grids = sglv.grids()
    worst = 0.0
    checked = 0
    with torch.no_grad():
        for name, grid in grids.items():
            gradient = torch.stack([getattr(g, name) for g in analytic]).mean(dim=0)
            flat = grid.reshape(-1)
            for index in range(flat.numel()):
                value = float(flat[index])
                if name == "alpha" and (value < eps or value > 1 - eps):
                    continue
                probes = []
                for delta in (eps, -eps):
                    perturbed = flat.clone()
                    perturbed[index] = value + delta
                    shifted = sglv.replace(**{name: perturbed.reshape(grid.shape)})
                    probes.append(float(_mean_log_l2(shifted, targets, settings)))
                numeric = (probes[0] - probes[1]) / (2 * eps)
                exact = float(gradient.reshape(-1)[index])
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-6)
                worst = max(worst, error)
                checked += 1
    logger.info("gradient check: %d entries, max relative error %.3e", checked, worst)
    return worst
