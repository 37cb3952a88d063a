"""Volume geometry, RGBeα initialization from RGBD, and the SGLV grid type.

Grids are stored z-major as ``(nz, ny, nx[, C])`` in the volume frame, whose
origin and axes are the anchor camera's position and right/up/backward axes.
Voxel ``(k, j, i)`` is centered at ``lo + (index + 0.5) * voxel_size``.
"""

import logging
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from sglv.config import Config
from sglv.core import bilinear_sample, bilinear_valid, project
from sglv.errors import ContractError, InputError, ShapeMismatchError

logger = logging.getLogger(__name__)

DEFAULT_AXIS = (0.0, 0.0, 1.0)
CHANNELS = {"c": 3, "alpha": 1, "w": 3, "lam": 1, "s": 3}


@dataclass(frozen=True, eq=False)
class VolumeConfig:
    lo: tuple
    hi: tuple
    counts: tuple
    origin: torch.Tensor = None
    rotation: torch.Tensor = None

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        object.__setattr__(self, "counts", tuple(int(v) for v in self.counts))
        origin = torch.zeros(3) if self.origin is None else self.origin
        rotation = torch.eye(3) if self.rotation is None else self.rotation
        object.__setattr__(self, "origin", torch.as_tensor(origin, dtype=torch.float64).reshape(3))
        object.__setattr__(
            self, "rotation", torch.as_tensor(rotation, dtype=torch.float64).reshape(3, 3)
        )
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ContractError(f"volume range must satisfy hi > lo, got {self.lo} .. {self.hi}")
        if any(n < 1 for n in self.counts):
            raise ContractError(f"voxel counts must be positive, got {self.counts}")

    @property
    def shape(self):
        nx, ny, nz = self.counts
        return nz, ny, nx

    @property
    def voxel_size(self):
        return tuple((h - l) / n for l, h, n in zip(self.lo, self.hi, self.counts))

    @property
    def diagonal(self):
        return float(torch.tensor([h - l for l, h in zip(self.lo, self.hi)]).norm())

    def same_grid(self, other):
        return (
            self.lo == other.lo
            and self.hi == other.hi
            and self.counts == other.counts
            and torch.equal(self.origin, other.origin)
            and torch.equal(self.rotation, other.rotation)
        )

    def centers(self, dtype=torch.float64):
        axes = [
            torch.tensor(l, dtype=torch.float64) + (torch.arange(n, dtype=torch.float64) + 0.5) * v
            for l, n, v in zip(self.lo, self.counts, self.voxel_size)
        ]
        z, y, x = torch.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return torch.stack([x, y, z], dim=-1).to(dtype)

    def to_volume_point(self, points):
        points = torch.as_tensor(points)
        dtype = points.dtype if points.is_floating_point() else torch.float64
        return (points.to(dtype) - self.origin.to(dtype)) @ self.rotation.to(dtype)

    def to_world_point(self, points):
        return points @ self.rotation.to(points.dtype).T + self.origin.to(points.dtype)

    def to_world_dir(self, dirs):
        return dirs @ self.rotation.to(dirs.dtype).T

    def contains(self, world_points):
        local = self.to_volume_point(world_points)
        lo = torch.tensor(self.lo, dtype=local.dtype)
        hi = torch.tensor(self.hi, dtype=local.dtype)
        return ((local >= lo) & (local <= hi)).all(dim=-1)


def make_volume_config(depth_max, anchor, counts=Config.VOLUME_COUNTS, coefficients=Config.VOLUME_RANGE):
    """Volume sized from the first frame's maximum depth, fixed to ``anchor``."""
    if not depth_max > 0:
        raise ContractError(f"depth_max must be positive, got {depth_max}")
    lo = tuple(a * depth_max for a, _ in coefficients)
    hi = tuple(b * depth_max for _, b in coefficients)
    config = VolumeConfig(lo, hi, counts, anchor.position, anchor.rotation)
    logger.info("volume %s over %s .. %s (D_max=%.3f)", counts, lo, hi, depth_max)
    return config


@dataclass(frozen=True, eq=False)
class InitialVolume:
    config: VolumeConfig
    color: torch.Tensor
    alpha: torch.Tensor
    empty: torch.Tensor


@dataclass(frozen=True, eq=False)
class SglvGrid:
    config: VolumeConfig
    c: torch.Tensor
    alpha: torch.Tensor
    w: torch.Tensor
    lam: torch.Tensor
    s: torch.Tensor

    def __post_init__(self):
        shape = self.config.shape
        for name, channels in CHANNELS.items():
            grid = getattr(self, name)
            expected = shape if channels == 1 else (*shape, channels)
            if tuple(grid.shape) != expected:
                raise ShapeMismatchError(
                    f"grid {name} has shape {tuple(grid.shape)}, expected {expected}"
                )

    @property
    def dtype(self):
        return self.alpha.dtype

    @classmethod
    def empty(cls, config, dtype=torch.float32):
        shape = config.shape
        return cls(
            config,
            c=torch.zeros(*shape, 3, dtype=dtype),
            alpha=torch.zeros(shape, dtype=dtype),
            w=torch.zeros(*shape, 3, dtype=dtype),
            lam=torch.ones(shape, dtype=dtype),
            s=torch.tensor(DEFAULT_AXIS, dtype=dtype).expand(*shape, 3).clone(),
        )

    @classmethod
    def from_initial(cls, init):
        """Lobe-free grid carrying the initial color and opacity."""
        grid = cls.empty(init.config, init.alpha.dtype)
        return grid.replace(c=init.color.clone(), alpha=init.alpha.clone())

    @classmethod
    def from_stacked(cls, config, stacked):
        c, alpha, w, lam, s = torch.split(stacked, [3, 1, 3, 1, 3], dim=-1)
        return cls(config, c, alpha[..., 0], w, lam[..., 0], s)

    def stacked(self):
        return torch.cat(
            [self.c, self.alpha.unsqueeze(-1), self.w, self.lam.unsqueeze(-1), self.s], dim=-1
        )

    def grids(self):
        return {name: getattr(self, name) for name in CHANNELS}

    def replace(self, **grids):
        return SglvGrid(self.config, **{**self.grids(), **grids})

    def detach(self):
        return SglvGrid(self.config, **{k: v.detach() for k, v in self.grids().items()})

    def to(self, dtype):
        return SglvGrid(self.config, **{k: v.to(dtype) for k, v in self.grids().items()})

    def validate(self, atol=1e-5):
        if (self.alpha < 0).any() or (self.alpha > 1).any():
            raise ContractError("alpha must lie in [0, 1]")
        if (self.c < 0).any() or (self.w < 0).any() or (self.lam < 0).any():
            raise ContractError("c, w and lambda must be nonnegative")
        if ((self.s.norm(dim=-1) - 1).abs() > atol).any():
            raise ContractError("lobe axes must be unit vectors")
        return self


def alpha_profile(offset):
    """Initial opacity for a voxel ``offset`` voxel lengths in front of the surface."""
    front = 4.0 * (-offset + 1.0)
    behind = 4.0 * (offset + 5.0)
    return torch.where(offset > 0, front, behind).clamp(0.0, 1.0)


def empty_profile(offset):
    return torch.where(offset > 3.0, -torch.ones_like(offset), torch.zeros_like(offset))


def _surface_offsets(config, camera, depth):
    """Per-voxel surface offset in voxel lengths, the projected pixel, and frustum coverage."""
    points = config.to_world_point(config.centers())
    proj = project(camera, points)
    u, v = proj.pixel[..., 0], proj.pixel[..., 1]
    inside = (
        proj.in_front
        & (u >= 0)
        & (u <= camera.width - 1)
        & (v >= 0)
        & (v <= camera.height - 1)
    )
    inside = inside & bilinear_valid(depth, proj.pixel)
    surface = bilinear_sample(depth.data.to(torch.float64), proj.pixel)
    offset = (surface - torch.nan_to_num(proj.depth)) / config.voxel_size[2]
    return offset, proj.pixel, inside


def init_alpha(config, camera, depth, dtype=torch.float32):
    offset, _, inside = _surface_offsets(config, camera, depth)
    alpha = torch.where(inside, alpha_profile(offset), torch.zeros_like(offset))
    return alpha.to(dtype)


def init_color(alpha, camera, image, config):
    points = config.to_world_point(config.centers())
    pixel = project(camera, points).pixel
    sampled = bilinear_sample(image.data.to(torch.float64), pixel).to(alpha.dtype)
    return alpha.unsqueeze(-1) * sampled


def init_empty_channel(config, camera, depth, dtype=torch.float32):
    offset, _, inside = _surface_offsets(config, camera, depth)
    empty = torch.where(inside, empty_profile(offset), torch.zeros_like(offset))
    return empty.to(dtype)


def build_initial_volume(config, camera, image, depth, dtype=torch.float32):
    offset, pixel, inside = _surface_offsets(config, camera, depth)
    zeros = torch.zeros_like(offset)
    alpha = torch.where(inside, alpha_profile(offset), zeros).to(dtype)
    empty = torch.where(inside, empty_profile(offset), zeros).to(dtype)
    color = alpha.unsqueeze(-1) * bilinear_sample(image.data.to(torch.float64), pixel).to(dtype)
    logger.debug(
        "initial volume: %d occupied voxels, %d cleared", int((alpha > 0).sum()), int((empty < 0).sum())
    )
    return InitialVolume(config, color, alpha, empty)


def clear_near_surface(sglv, empty):
    """Zero every grid where the depth map proves the space empty."""
    if tuple(empty.shape) != sglv.config.shape:
        raise ShapeMismatchError(
            f"empty channel has shape {tuple(empty.shape)}, expected {sglv.config.shape}"
        )
    keep = (1 + empty).to(sglv.dtype)
    default = torch.tensor(DEFAULT_AXIS, dtype=sglv.dtype)
    return sglv.replace(
        c=sglv.c * keep.unsqueeze(-1),
        alpha=sglv.alpha * keep,
        w=sglv.w * keep.unsqueeze(-1),
        lam=sglv.lam * keep,
        s=torch.where(keep.unsqueeze(-1) > 0, sglv.s, default),
    )


def _normalize_axes(s):
    norm = s.norm(dim=-1, keepdim=True)
    default = torch.tensor(DEFAULT_AXIS, dtype=s.dtype)
    return torch.where(norm > 1e-12, s / norm.clamp_min(1e-12), default)


def merge_volumes(current, previous, update):
    """Voxelwise ``current * (1 - u) + u * previous``."""
    if not current.config.same_grid(previous.config):
        raise ShapeMismatchError("cannot merge volumes built on different grids")
    update = torch.as_tensor(update, dtype=current.dtype)
    if update.dim() and tuple(update.shape) != current.config.shape:
        raise ShapeMismatchError(f"update volume has shape {tuple(update.shape)}")
    if (update < 0).any() or (update > 1).any():
        raise ContractError("update weights must lie in [0, 1]")
    scalar_u = update
    vector_u = update.unsqueeze(-1) if update.dim() else update

    def mix(a, b, u):
        return a * (1 - u) + u * b

    return current.replace(
        c=mix(current.c, previous.c, vector_u),
        alpha=mix(current.alpha, previous.alpha, scalar_u),
        w=mix(current.w, previous.w, vector_u),
        lam=mix(current.lam, previous.lam, scalar_u),
        s=_normalize_axes(mix(current.s, previous.s, vector_u)),
    )


def trilinear(grid, config, points):
    """Trilinear interpolation at volume-frame ``points`` (..., 3); zero outside the volume."""
    squeeze = grid.dim() == 3
    values = grid.unsqueeze(-1) if squeeze else grid
    channels = values.shape[-1]
    points = torch.as_tensor(points, dtype=values.dtype)
    lo = torch.tensor(config.lo, dtype=values.dtype)
    hi = torch.tensor(config.hi, dtype=values.dtype)
    normalized = 2 * (points - lo) / (hi - lo) - 1
    sampled = F.grid_sample(
        values.permute(3, 0, 1, 2).unsqueeze(0),
        normalized.reshape(1, -1, 1, 1, 3),
        mode="bilinear",
        padding_mode="zeros",
        align_corners=False,
    )
    sampled = sampled.reshape(channels, -1).T.reshape(*points.shape[:-1], channels)
    return sampled[..., 0] if squeeze else sampled


VOLUME_MAGIC = b"SGLV"
VOLUME_VERSION = 1
_HEADER = struct.Struct("<4sI6d3I12d")


def save_volume(sglv, path):
    """Write the SGLV binary: header, then float32 grids c, alpha, w, lam, s (z-major)."""
    config = sglv.config
    ranges = [v for pair in zip(config.lo, config.hi) for v in pair]
    pose = [*config.origin.tolist(), *config.rotation.T.reshape(-1).tolist()]
    with open(path, "wb") as f:
        f.write(_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, *ranges, *config.counts, *pose))
        for grid in sglv.grids().values():
            f.write(grid.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    logger.info("wrote volume %s to %s", config.counts, path)


def load_volume(path):
    with open(path, "rb") as f:
        payload = f.read()
    if len(payload) < _HEADER.size:
        raise InputError(f"{path}: truncated SGLV header")
    magic, version, *values = _HEADER.unpack_from(payload)
    if magic != VOLUME_MAGIC or version != VOLUME_VERSION:
        raise InputError(f"{path}: not an SGLV v{VOLUME_VERSION} file")
    ranges, counts, pose = values[:6], values[6:9], np.asarray(values[9:]).reshape(4, 3)
    config = VolumeConfig(ranges[0::2], ranges[1::2], counts, pose[0], pose[1:].T)
    grids = {}
    offset = _HEADER.size
    for name, channels in CHANNELS.items():
        shape = config.shape if channels == 1 else (*config.shape, channels)
        size = int(np.prod(shape))
        if len(payload) < offset + 4 * size:
            raise InputError(f"{path}: truncated grid {name}")
        data = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
        grids[name] = torch.from_numpy(data.reshape(shape).astype(np.float32))
        offset += 4 * size
    return SglvGrid(config, **grids)
