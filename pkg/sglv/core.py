"""Cameras, images, panoramas and the sampling primitives shared by every module.

Pixel coordinates are continuous ``(x, y) = (col, row)`` pairs with pixel
centers on integers. Equirectangular maps put row 0 at the +y pole and
measure longitude from +x toward +z.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

from sglv.errors import ContractError, ShapeMismatchError

MAP_KINDS = ("hdr", "ldr", "mask", "depth")


def as_vector(value, dtype=torch.float64):
    return torch.as_tensor(value, dtype=dtype).reshape(3)


@dataclass(frozen=True, eq=False)
class Camera:
    position: torch.Tensor
    right: torch.Tensor
    up: torch.Tensor
    backward: torch.Tensor
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("position", "right", "up", "backward"):
            object.__setattr__(self, name, as_vector(getattr(self, name)))
        axes = torch.stack([self.right, self.up, self.backward])
        if not torch.allclose(
            axes @ axes.T, torch.eye(3, dtype=torch.float64), rtol=0.0, atol=1e-6
        ):
            raise ContractError("camera axes must be mutually orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 2 or self.height < 2:
            raise ContractError(f"image must be at least 2x2, got {self.width}x{self.height}")

    @property
    def forward(self):
        return -self.backward

    @property
    def rotation(self):
        """Camera-to-world rotation with columns right, up, backward."""
        return torch.stack([self.right, self.up, self.backward], dim=1)

    @classmethod
    def look_along(cls, position, forward, width, height, fov_deg, up_hint=(0.0, 1.0, 0.0)):
        forward = as_vector(forward)
        forward = forward / forward.norm()
        right = torch.linalg.cross(forward, as_vector(up_hint))
        if right.norm() < 1e-9:
            raise ContractError("view direction is parallel to the up hint")
        right = right / right.norm()
        up = torch.linalg.cross(right, forward)
        focal = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        return cls(
            position=position,
            right=right,
            up=up,
            backward=-forward,
            fx=focal,
            fy=focal,
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
            width=width,
            height=height,
        )

    @classmethod
    def from_matrix(cls, matrix, fx, fy, cx, cy, width, height):
        matrix = torch.as_tensor(matrix, dtype=torch.float64).reshape(4, 4)
        return cls(
            position=matrix[:3, 3],
            right=matrix[:3, 0],
            up=matrix[:3, 1],
            backward=matrix[:3, 2],
            fx=fx,
            fy=fy,
            cx=cx,
            cy=cy,
            width=width,
            height=height,
        )

    def to_matrix(self):
        matrix = torch.eye(4, dtype=torch.float64)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.position
        return matrix

    def pixel_grid(self, dtype=torch.float64):
        """Continuous coordinates of every pixel center, shape (H, W, 2)."""
        rows, cols = torch.meshgrid(
            torch.arange(self.height, dtype=dtype),
            torch.arange(self.width, dtype=dtype),
            indexing="ij",
        )
        return torch.stack([cols, rows], dim=-1)


@dataclass(frozen=True, eq=False)
class HdrImage:
    data: torch.Tensor

    def __post_init__(self):
        if self.data.dim() != 3 or self.data.shape[-1] != 3:
            raise ShapeMismatchError(f"expected (H, W, 3) image, got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all() or (self.data < 0).any():
            raise ContractError("image values must be finite and nonnegative")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class DepthMap:
    data: torch.Tensor
    valid: torch.Tensor = None

    def __post_init__(self):
        if self.data.dim() != 2:
            raise ShapeMismatchError(f"expected (H, W) depth, got {tuple(self.data.shape)}")
        valid = torch.isfinite(self.data) & (self.data > 0)
        if self.valid is not None:
            valid = valid & self.valid.bool()
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "data", torch.where(valid, self.data, torch.zeros_like(self.data)))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    def max_depth(self):
        if not self.valid.any():
            raise ContractError("depth map has no valid pixels")
        return float(self.data[self.valid].max())


@dataclass(frozen=True, eq=False)
class EquirectMap:
    data: torch.Tensor
    kind: str = "hdr"

    def __post_init__(self):
        if self.kind not in MAP_KINDS:
            raise ContractError(f"unknown map kind {self.kind!r}")
        if self.data.dim() == 2:
            object.__setattr__(self, "data", self.data.unsqueeze(-1))
        height, width = self.data.shape[:2]
        if width != 2 * height:
            raise ShapeMismatchError(f"equirect width must be twice the height, got {height}x{width}")
        values = self.data.detach()
        if self.kind == "depth":
            if torch.isnan(values).any() or (values < 0).any():
                raise ContractError("depth panorama values must be nonnegative or +inf")
        elif not torch.isfinite(values).all() or (values < 0).any():
            raise ContractError(f"{self.kind} map values must be finite and nonnegative")
        elif self.kind in ("ldr", "mask") and (values > 1).any():
            raise ContractError(f"{self.kind} map values must lie in [0, 1]")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    @classmethod
    def full(cls, height, value, channels=3, kind="hdr", dtype=torch.float32):
        return cls(torch.full((height, 2 * height, channels), value, dtype=dtype), kind)

    def detach(self):
        return EquirectMap(self.data.detach(), self.kind)

    def resized(self, height):
        """Area-resampled copy with ``height`` rows; longitude keeps the 2:1 aspect."""
        if height < 1:
            raise ContractError(f"panorama height must be positive, got {height}")
        if height == self.height:
            return self
        data = F.interpolate(
            self.data.permute(2, 0, 1).unsqueeze(0), size=(height, 2 * height), mode="area"
        )
        return EquirectMap(data[0].permute(1, 2, 0).contiguous(), self.kind)

    def check_same_shape(self, other):
        if self.data.shape[:2] != other.data.shape[:2]:
            raise ShapeMismatchError(
                f"map shapes differ: {tuple(self.data.shape)} vs {tuple(other.data.shape)}"
            )


def pixel_to_direction(row, col, height):
    """Unit direction through the center of equirect pixel (row, col)."""
    row = torch.as_tensor(row, dtype=torch.float64)
    col = torch.as_tensor(col, dtype=torch.float64)
    if (row < 0).any() or (row >= height).any() or (col < 0).any() or (col >= 2 * height).any():
        raise ContractError(f"pixel index outside a {height}x{2 * height} panorama")
    theta = math.pi * (row + 0.5) / height
    phi = 2.0 * math.pi * (col + 0.5) / (2 * height)
    sin_theta = torch.sin(theta)
    return torch.stack(
        [sin_theta * torch.cos(phi), torch.cos(theta), sin_theta * torch.sin(phi)], dim=-1
    )


def equirect_directions(height, dtype=torch.float32):
    rows, cols = torch.meshgrid(
        torch.arange(height), torch.arange(2 * height), indexing="ij"
    )
    return pixel_to_direction(rows, cols, height).to(dtype)


def _pixel_coordinates(dirs, height):
    theta = torch.acos(dirs[..., 1].clamp(-1.0, 1.0))
    phi = torch.remainder(torch.atan2(dirs[..., 2], dirs[..., 0]), 2.0 * math.pi)
    row = theta / math.pi * height - 0.5
    col = torch.remainder(phi / (2.0 * math.pi) * (2 * height) - 0.5, 2 * height)
    return row, col


def direction_to_pixel(dirs, height):
    """Continuous (row, col) of a unit direction; col wraps modulo the width."""
    dirs = torch.as_tensor(dirs, dtype=torch.float64)
    norm = dirs.norm(dim=-1)
    if (norm == 0).any():
        raise ContractError("cannot map a zero vector to a panorama pixel")
    if ((norm - 1.0).abs() > 1e-6).any():
        raise ContractError("direction must be unit length")
    return _pixel_coordinates(dirs, height)


def sample_envmap(env, dirs):
    """Bilinear lookup of ``env`` along ``dirs`` (..., 3), differentiable in the map.

    Longitude wraps around the seam through a one-column pad; latitude clamps
    at the poles.
    """
    height, width, channels = env.data.shape
    dirs = dirs / dirs.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    row, col = _pixel_coordinates(dirs, height)
    data = torch.cat([env.data, env.data[:, :1]], dim=1)
    grid = torch.stack([2.0 * col / width - 1.0, 2.0 * row / max(height - 1, 1) - 1.0], dim=-1)
    values = F.grid_sample(
        data.permute(2, 0, 1).unsqueeze(0),
        grid.reshape(1, 1, -1, 2).to(data.dtype),
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )
    return values.reshape(channels, -1).T.reshape(*dirs.shape[:-1], channels)


class Projection(NamedTuple):
    pixel: torch.Tensor
    depth: torch.Tensor
    in_front: torch.Tensor


def project(camera, points):
    """Pinhole projection of world points (..., 3).

    Points behind the camera are flagged through ``in_front`` and get NaN
    pixel coordinates.
    """
    points = torch.as_tensor(points)
    dtype = points.dtype if points.is_floating_point() else torch.float64
    offset = points.to(dtype) - camera.position.to(dtype)
    x = offset @ camera.right.to(dtype)
    y = offset @ camera.up.to(dtype)
    depth = offset @ camera.forward.to(dtype)
    in_front = depth > 0
    safe = torch.where(in_front, depth, torch.full_like(depth, math.nan))
    u = camera.cx + camera.fx * x / safe
    v = camera.cy - camera.fy * y / safe
    return Projection(torch.stack([u, v], dim=-1), depth, in_front)


def unproject(camera, pixel, depth):
    """World point at view depth ``depth`` behind pixel ``pixel`` (..., 2)."""
    pixel = torch.as_tensor(pixel)
    dtype = pixel.dtype if pixel.is_floating_point() else torch.float64
    pixel = pixel.to(dtype)
    depth = torch.as_tensor(depth, dtype=dtype)
    if (depth <= 0).any():
        raise ContractError("unproject needs a positive depth")
    x = (pixel[..., 0] - camera.cx) / camera.fx * depth
    y = -(pixel[..., 1] - camera.cy) / camera.fy * depth
    return (
        camera.position.to(dtype)
        + x.unsqueeze(-1) * camera.right.to(dtype)
        + y.unsqueeze(-1) * camera.up.to(dtype)
        + depth.unsqueeze(-1) * camera.forward.to(dtype)
    )


def _image_values(image):
    if isinstance(image, (HdrImage, DepthMap)):
        image = image.data
    return image.unsqueeze(-1) if image.dim() == 2 else image


def _corners(image, points):
    height, width = image.shape[:2]
    points = torch.nan_to_num(points)
    x = points[..., 0].clamp(0, width - 1)
    y = points[..., 1].clamp(0, height - 1)
    x0 = x.floor().clamp(0, width - 2)
    y0 = y.floor().clamp(0, height - 2)
    return x0.long(), y0.long(), x - x0, y - y0


def bilinear_sample(image, points):
    """Bilinear interpolation at continuous pixel coordinates with border clamping."""
    squeeze = isinstance(image, DepthMap) or (torch.is_tensor(image) and image.dim() == 2)
    values = _image_values(image)
    points = torch.as_tensor(points, dtype=values.dtype)
    x0, y0, fx, fy = _corners(values, points)
    fx = fx.unsqueeze(-1)
    fy = fy.unsqueeze(-1)
    top = values[y0, x0] * (1 - fx) + values[y0, x0 + 1] * fx
    bottom = values[y0 + 1, x0] * (1 - fx) + values[y0 + 1, x0 + 1] * fx
    result = top * (1 - fy) + bottom * fy
    return result.squeeze(-1) if squeeze else result


def bilinear_valid(depth, points):
    """True where all four bilinear neighbors of ``points`` hold valid depth."""
    valid = depth.valid
    x0, y0, _, _ = _corners(valid, torch.as_tensor(points, dtype=depth.data.dtype))
    return valid[y0, x0] & valid[y0, x0 + 1] & valid[y0 + 1, x0] & valid[y0 + 1, x0 + 1]
