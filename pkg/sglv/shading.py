"""Monte-Carlo glossy sphere rendering from an environment map.

The BRDF is GGX with height-correlated Smith masking and Schlick Fresnel on
top of a Lambertian base. Directions live in the environment map's frame; the
sphere faces the viewer along +z.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from sglv.config import Config
from sglv.core import HdrImage, sample_envmap
from sglv.errors import ContractError

logger = logging.getLogger(__name__)

F0 = 0.04
SAMPLING_MODES = ("importance", "uniform")
VIEW = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class MicrofacetBrdf:
    albedo: tuple = Config.ALBEDO
    roughness: float = Config.ROUGHNESS
    specular: float = 1.0

    def __post_init__(self):
        if not all(0.0 <= a <= 1.0 for a in self.albedo):
            raise ContractError(f"albedo must lie in [0, 1], got {self.albedo}")
        if not 0.0 < self.roughness <= 1.0:
            raise ContractError(f"roughness must lie in (0, 1], got {self.roughness}")

    @property
    def alpha(self):
        return self.roughness**2


@dataclass(frozen=True)
class SphereRenderSpec:
    size: int = Config.SPHERE_SIZE
    spp: int = Config.EVAL_SPP
    mode: str = "importance"
    seed: int = Config.SEED
    specular_weight: float = 0.5
    block: int = 256

    def __post_init__(self):
        if self.spp < 1:
            raise ContractError(f"need at least one sample per pixel, got {self.spp}")
        if self.mode not in SAMPLING_MODES:
            raise ContractError(f"unknown sampling mode {self.mode!r}")
        if not 0.0 <= self.specular_weight <= 1.0:
            raise ContractError("specular weight must lie in [0, 1]")


def _dot(a, b):
    return (a * b).sum(dim=-1)


def _normalize(v):
    return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def ggx_distribution(n_dot_h, alpha):
    a2 = alpha * alpha
    denominator = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0
    return a2 / (math.pi * denominator * denominator)


def smith_visibility(n_dot_l, n_dot_v, alpha):
    """Height-correlated Smith term folded with the 1 / (4 n·l n·v) normalization."""
    a2 = alpha * alpha
    lambda_v = n_dot_l * torch.sqrt(n_dot_v * n_dot_v * (1.0 - a2) + a2)
    lambda_l = n_dot_v * torch.sqrt(n_dot_l * n_dot_l * (1.0 - a2) + a2)
    return 0.5 / (lambda_v + lambda_l).clamp_min(1e-12)


def eval_brdf(brdf, n, v, l):
    """BRDF value f(l, v) per channel; zero below the horizon or for degenerate vectors."""
    n_dot_l = _dot(n, l)
    n_dot_v = _dot(n, v)
    half = l + v
    degenerate = half.norm(dim=-1) < 1e-9
    h = _normalize(half)
    n_dot_h = _dot(n, h).clamp(0.0, 1.0)
    v_dot_h = _dot(v, h).clamp(0.0, 1.0)
    alpha = brdf.alpha
    fresnel = F0 + (1.0 - F0) * (1.0 - v_dot_h) ** 5
    specular = (
        brdf.specular
        * ggx_distribution(n_dot_h, alpha)
        * smith_visibility(n_dot_l.clamp_min(0.0), n_dot_v.clamp_min(0.0), alpha)
        * fresnel
    )
    albedo = torch.tensor(brdf.albedo, dtype=n.dtype)
    value = albedo / math.pi + specular.unsqueeze(-1)
    above = (n_dot_l > 0) & (n_dot_v > 0) & ~degenerate
    return torch.where(above.unsqueeze(-1), value, torch.zeros_like(value))


def _tangent_frame(n):
    helper = torch.where(
        (n[..., 2].abs() < 0.999).unsqueeze(-1),
        torch.tensor([0.0, 0.0, 1.0], dtype=n.dtype).expand_as(n),
        torch.tensor([1.0, 0.0, 0.0], dtype=n.dtype).expand_as(n),
    )
    tangent = _normalize(torch.linalg.cross(helper, n))
    bitangent = torch.linalg.cross(n, tangent)
    return tangent, bitangent


def _to_world(local, n):
    tangent, bitangent = _tangent_frame(n)
    return (
        local[..., :1] * tangent + local[..., 1:2] * bitangent + local[..., 2:3] * n
    )


def brdf_pdf(brdf, n, v, l, specular_weight=0.5):
    """Solid-angle density of the diffuse/GGX sampling mixture."""
    n_dot_l = _dot(n, l).clamp_min(0.0)
    h = _normalize(l + v)
    n_dot_h = _dot(n, h).clamp(0.0, 1.0)
    v_dot_h = _dot(v, h).clamp_min(1e-12)
    diffuse = n_dot_l / math.pi
    specular = ggx_distribution(n_dot_h, brdf.alpha) * n_dot_h / (4.0 * v_dot_h)
    return (1.0 - specular_weight) * diffuse + specular_weight * specular


def _directions_from_uniforms(brdf, n, v, uniforms, specular_weight):
    u1, u2, choice = uniforms[..., 0], uniforms[..., 1], uniforms[..., 2]
    phi = 2.0 * math.pi * u2
    # cosine-weighted hemisphere
    radius = torch.sqrt(u1)
    diffuse = torch.stack(
        [radius * torch.cos(phi), radius * torch.sin(phi), torch.sqrt((1.0 - u1).clamp_min(0.0))],
        dim=-1,
    )
    # GGX half vector, reflected about v
    a2 = brdf.alpha**2
    cos_h = torch.sqrt((1.0 - u1) / (1.0 + (a2 - 1.0) * u1))
    sin_h = torch.sqrt((1.0 - cos_h * cos_h).clamp_min(0.0))
    half = _to_world(
        torch.stack([sin_h * torch.cos(phi), sin_h * torch.sin(phi), cos_h], dim=-1), n
    )
    reflected = 2.0 * _dot(v, half).unsqueeze(-1) * half - v
    use_specular = (choice < specular_weight).unsqueeze(-1)
    return _normalize(torch.where(use_specular, reflected, _to_world(diffuse, n)))


def sample_brdf(brdf, n, v, rng, specular_weight=0.5):
    """Draw one direction per (n, v) pair from the sampling mixture.

    Returns the direction and its exact mixture density.
    """
    uniforms = torch.from_numpy(rng.random((*n.shape[:-1], 3))).to(n.dtype)
    l = _directions_from_uniforms(brdf, n, v, uniforms, specular_weight)
    pdf = brdf_pdf(brdf, n, v, l, specular_weight).clamp_min(1e-12)
    return l, pdf


def _uniform_theta_phi(n, uniforms):
    theta = 0.5 * math.pi * uniforms[..., 0]
    phi = 2.0 * math.pi * uniforms[..., 1]
    local = torch.stack(
        [torch.sin(theta) * torch.cos(phi), torch.sin(theta) * torch.sin(phi), torch.cos(theta)],
        dim=-1,
    )
    pdf = 1.0 / (math.pi * math.pi * torch.sin(theta).clamp_min(1e-12))
    return _to_world(local, n), pdf


def sphere_normals(size, dtype=torch.float64):
    """Normals of an orthographic unit sphere and the mask of covered pixels."""
    centers = (torch.arange(size, dtype=dtype) + 0.5) / size * 2.0 - 1.0
    y, x = torch.meshgrid(-centers, centers, indexing="ij")
    r2 = x * x + y * y
    inside = r2 < 1.0
    z = torch.sqrt((1.0 - r2).clamp_min(0.0))
    return torch.stack([x, y, z], dim=-1), inside


def _pixel_uniforms(seed, pixel_ids, spp):
    return np.stack(
        [np.random.default_rng([seed, int(pid)]).random((spp, 3)) for pid in pixel_ids]
    )


@dataclass(frozen=True, eq=False)
class SphereSampler:
    """Per-pixel sample directions and estimator weights f·cos/pdf for a fixed seed."""

    size: int
    pixel_ids: torch.Tensor
    directions: torch.Tensor
    weights: torch.Tensor

    def shade(self, env):
        if env.kind != "hdr" or env.channels != 3:
            raise ContractError("sphere rendering needs an HDR RGB environment map")
        radiance = sample_envmap(env, self.directions.to(env.data.dtype))
        pixels = (self.weights.to(env.data.dtype) * radiance).mean(dim=1)
        image = torch.zeros(self.size * self.size, 3, dtype=env.data.dtype)
        image = image.index_copy(0, self.pixel_ids, pixels)
        return image.reshape(self.size, self.size, 3)


def _sample_block(brdf, spec, normals, pixel_ids):
    n = normals.unsqueeze(1).expand(-1, spec.spp, 3)
    v = torch.tensor(VIEW, dtype=n.dtype).expand_as(n)
    uniforms = torch.from_numpy(_pixel_uniforms(spec.seed, pixel_ids.tolist(), spec.spp))
    if spec.mode == "importance":
        l = _directions_from_uniforms(brdf, n, v, uniforms, spec.specular_weight)
        pdf = brdf_pdf(brdf, n, v, l, spec.specular_weight)
    else:
        l, pdf = _uniform_theta_phi(n, uniforms)
    cosine = _dot(n, l).clamp_min(0.0).unsqueeze(-1)
    weights = eval_brdf(brdf, n, v, l) * cosine / pdf.clamp_min(1e-12).unsqueeze(-1)
    return l, weights


def prepare_sphere(brdf, spec):
    normals, inside = sphere_normals(spec.size)
    pixel_ids = torch.nonzero(inside.reshape(-1)).squeeze(-1)
    dirs, weights = _sample_block(brdf, spec, normals.reshape(-1, 3)[pixel_ids], pixel_ids)
    return SphereSampler(spec.size, pixel_ids, dirs, weights)


def render_sphere(env, brdf, spec):
    """Glossy sphere facing the viewer, lit by ``env``.

    Each pixel draws from its own RNG stream seeded by (seed, pixel index), so
    the image does not depend on how pixels are grouped into blocks.
    """
    if env.kind != "hdr" or env.channels != 3:
        raise ContractError("sphere rendering needs an HDR RGB environment map")
    normals, inside = sphere_normals(spec.size)
    normals = normals.reshape(-1, 3)
    pixel_ids = torch.nonzero(inside.reshape(-1)).squeeze(-1)
    image = torch.zeros(spec.size * spec.size, 3, dtype=env.data.dtype)
    for start in range(0, pixel_ids.numel(), spec.block):
        ids = pixel_ids[start : start + spec.block]
        dirs, weights = _sample_block(brdf, spec, normals[ids], ids)
        radiance = sample_envmap(env, dirs.to(env.data.dtype))
        image[ids] = (weights.to(env.data.dtype) * radiance).mean(dim=1)
    logger.debug("rendered %s sphere at %d spp", spec.mode, spec.spp)
    return HdrImage(image.reshape(spec.size, spec.size, 3))


def render_mirror_sphere(env, size):
    """Perfect-mirror sphere: each pixel shows the reflected environment direction."""
    normals, inside = sphere_normals(size)
    view = torch.tensor(VIEW, dtype=normals.dtype)
    reflected = 2.0 * _dot(normals, view).unsqueeze(-1) * normals - view
    image = sample_envmap(env, reflected.to(env.data.dtype))
    image = torch.where(inside.unsqueeze(-1), image, torch.zeros_like(image))
    return HdrImage(image.detach())
