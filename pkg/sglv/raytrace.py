"""Differentiable volume ray tracing through an SGLV grid.

Rays start at the probe and march outward in uniform steps; every SGLV
parameter is composited front to back with the same opacity weights, then the
accumulated lobe is evaluated along the ray direction.
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import torch

from sglv.config import Config
from sglv.core import EquirectMap, equirect_directions
from sglv.errors import ContractError, ShapeMismatchError
from sglv.volume import trilinear

logger = logging.getLogger(__name__)

TRANSMITTANCE_CUTOFF = 1e-4


@dataclass(frozen=True)
class RenderSettings:
    samples: int
    step: float
    early_out: bool = True
    use_lobe: bool = True
    chunk: int = 4096

    def __post_init__(self):
        if self.samples < 2:
            raise ContractError(f"need at least 2 samples per ray, got {self.samples}")
        if not self.step > 0:
            raise ContractError(f"step length must be positive, got {self.step}")

    @property
    def max_length(self):
        return self.samples * self.step

    @classmethod
    def for_config(cls, config, max_samples=Config.MAX_SAMPLES, **options):
        """Half-voxel steps across the volume diagonal, stretched if that exceeds ``max_samples``."""
        step = min(config.voxel_size) / 2
        length = config.diagonal
        samples = math.ceil(length / step)
        if samples > max_samples:
            samples = max_samples
            step = length / samples
        return cls(samples=max(samples, 2), step=step, **options)


class RayAccum(NamedTuple):
    c: torch.Tensor
    w: torch.Tensor
    lam: torch.Tensor
    s: torch.Tensor


def composite(alpha, values, early_out=False):
    """Front-to-back compositing of ``values`` (R, S, C) with opacities ``alpha`` (R, S)."""
    survival = torch.cumprod(1 - alpha, dim=-1)
    transmittance = torch.cat([torch.ones_like(alpha[..., :1]), survival[..., :-1]], dim=-1)
    weights = alpha * transmittance
    if early_out:
        weights = torch.where(
            transmittance < TRANSMITTANCE_CUTOFF, torch.zeros_like(weights), weights
        )
    return (weights.unsqueeze(-1) * values).sum(dim=-2)


def _check_unit(dirs):
    if ((dirs.norm(dim=-1) - 1).abs() > 1e-5).any():
        raise ContractError("ray directions must be unit vectors")


def _accumulate(stacked, config, origins, dirs, settings, early_out):
    t = torch.arange(settings.samples, dtype=stacked.dtype) * settings.step
    points = origins.unsqueeze(-2) + t.unsqueeze(-1) * dirs.unsqueeze(-2)
    samples = trilinear(stacked, config, points)
    alpha = samples[..., 3]
    values = torch.cat([samples[..., :3], samples[..., 4:]], dim=-1)
    acc = composite(alpha, values, early_out)
    return RayAccum(c=acc[..., :3], w=acc[..., 3:6], lam=acc[..., 6], s=acc[..., 7:10])


def accumulate_ray(sglv, origin, dirs, settings):
    """Composited (c, w, λ, s) along rays from volume-frame ``origin`` toward ``dirs`` (..., 3)."""
    dirs = torch.as_tensor(dirs, dtype=sglv.dtype)
    _check_unit(dirs)
    origin = torch.as_tensor(origin, dtype=sglv.dtype).expand_as(dirs)
    return _accumulate(sglv.stacked(), sglv.config, origin, dirs, settings, settings.early_out)


def eval_radiance(accum, dirs):
    """Radiance ``c + w * exp(λ (l·s - 1))`` with the accumulated axis left unnormalized."""
    cosine = (dirs * accum.s).sum(dim=-1)
    lobe = torch.exp(accum.lam * (cosine - 1)).unsqueeze(-1)
    return accum.c + accum.w * lobe


def render_radiance(sglv, origin, dirs, settings, early_out=None):
    """Radiance for volume-frame rays, chunked; differentiable in the grid."""
    early_out = settings.early_out if early_out is None else early_out
    stacked = sglv.stacked()
    flat_dirs = dirs.reshape(-1, 3).to(sglv.dtype)
    origin = torch.as_tensor(origin, dtype=sglv.dtype)
    chunks = []
    for start in range(0, flat_dirs.shape[0], settings.chunk):
        chunk_dirs = flat_dirs[start : start + settings.chunk]
        accum = _accumulate(
            stacked, sglv.config, origin.expand_as(chunk_dirs), chunk_dirs, settings, early_out
        )
        chunks.append(eval_radiance(accum, chunk_dirs) if settings.use_lobe else accum.c)
    return torch.cat(chunks).reshape(*dirs.shape[:-1], 3)


def render_envmap_tensor(sglv, position, height, settings, early_out=None):
    origin = sglv.config.to_volume_point(position)
    dirs = equirect_directions(height, sglv.dtype)
    return render_radiance(sglv, origin, dirs, settings, early_out)


def render_envmap(sglv, position, height, settings):
    """HDR environment map at world ``position``, directions in the volume frame."""
    return EquirectMap(render_envmap_tensor(sglv, position, height, settings), "hdr")


def log_l2_error(pred, gt):
    return ((torch.log1p(pred) - torch.log1p(gt)) ** 2).mean()


def l2_error(pred, gt):
    return ((pred - gt) ** 2).mean()


LOSSES = {"log_l2": log_l2_error, "l2": l2_error}


def envmap_loss_gradients(sglv, position, target, settings, loss="log_l2"):
    """Exact gradients of an env-map loss with respect to every voxel parameter.

    Early termination is disabled so the gradients match the full compositing sum.
    Returns an ``SglvGrid`` whose grids hold the gradients.
    """
    if loss not in LOSSES:
        raise ContractError(f"unknown loss {loss!r}, expected one of {sorted(LOSSES)}")
    if target.channels != 3:
        raise ShapeMismatchError(f"target must be an RGB map, got {target.channels} channels")
    grids = {k: v.detach().clone().requires_grad_(True) for k, v in sglv.grids().items()}
    leaf = sglv.replace(**grids)
    pred = render_envmap_tensor(leaf, position, target.height, settings, early_out=False)
    value = LOSSES[loss](pred, target.data.to(pred.dtype))
    gradients = torch.autograd.grad(value, list(grids.values()), allow_unused=True)
    return sglv.replace(
        **{
            name: torch.zeros_like(grid) if grad is None else grad
            for (name, grid), grad in zip(grids.items(), gradients)
        }
    )
