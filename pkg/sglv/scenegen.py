"""Procedural box rooms with analytic ground truth.

Rooms span ``[0, sx] x [0, sy] x [0, sz]`` with +y up. Walls are indexed
x-, x+, y-, y+, z-, z+ and face inward. Shading is direct light from
rectangular panels and from a sun seen through a window aperture, with
visibility against box-shaped blockers, plus a constant ambient term.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from sglv.config import Config
from sglv.core import Camera, DepthMap, EquirectMap, HdrImage, equirect_directions, unproject
from sglv.errors import ContractError

logger = logging.getLogger(__name__)

WALL_NAMES = ("x-", "x+", "y-", "y+", "z-", "z+")
LIGHT_GRID = 4
SURFACE_OFFSET = 1e-6
TRAJECTORY_PITCH_DEG = -8.0


def _tangent_axes(axis):
    return [a for a in range(3) if a != axis]


@dataclass(frozen=True)
class WallMaterial:
    albedo: tuple = (0.7, 0.7, 0.7)
    checker: tuple = None
    checker_size: float = 0.25

    def __post_init__(self):
        for color in (self.albedo, self.checker or (0.0, 0.0, 0.0)):
            if not all(0.0 <= a <= 1.0 for a in color):
                raise ContractError(f"albedo must lie in [0, 1], got {color}")
        if not self.checker_size > 0:
            raise ContractError("checker size must be positive")


@dataclass(frozen=True)
class AreaLight:
    """Axis-aligned emitting rectangle; ``facing`` is the sign of its normal along ``axis``."""

    center: tuple
    size: tuple
    axis: int
    facing: int
    radiance: tuple

    def __post_init__(self):
        if self.axis not in (0, 1, 2) or self.facing not in (-1, 1):
            raise ContractError("area light needs an axis in 0..2 and a facing of +-1")
        if any(s <= 0 for s in self.size) or any(r < 0 for r in self.radiance):
            raise ContractError("area light needs positive size and nonnegative radiance")

    @property
    def area(self):
        return self.size[0] * self.size[1]

    def normal(self):
        n = np.zeros(3)
        n[self.axis] = self.facing
        return n

    def sample_points(self):
        """Centers of a LIGHT_GRID x LIGHT_GRID stratification of the rectangle."""
        offsets = (np.arange(LIGHT_GRID) + 0.5) / LIGHT_GRID - 0.5
        u, v = np.meshgrid(offsets * self.size[0], offsets * self.size[1], indexing="ij")
        points = np.tile(np.asarray(self.center, dtype=np.float64), (LIGHT_GRID**2, 1))
        first, second = _tangent_axes(self.axis)
        points[:, first] += u.reshape(-1)
        points[:, second] += v.reshape(-1)
        return points


@dataclass(frozen=True)
class WindowLight:
    """Aperture in ``wall`` through which the sun and a uniform sky are visible."""

    wall: int
    center: tuple
    size: tuple
    sun_direction: tuple
    sun_radiance: tuple
    sky_radiance: tuple = (0.6, 0.8, 1.2)
    angular_radius: float = 0.05

    def __post_init__(self):
        if self.wall not in range(6):
            raise ContractError(f"window wall index must be in 0..5, got {self.wall}")
        norm = math.sqrt(sum(d * d for d in self.sun_direction))
        if norm == 0:
            raise ContractError("sun direction must be nonzero")
        object.__setattr__(self, "sun_direction", tuple(d / norm for d in self.sun_direction))

    @property
    def axis(self):
        return self.wall // 2

    @property
    def solid_angle(self):
        return 2.0 * math.pi * (1.0 - math.cos(self.angular_radius))

    def contains(self, points):
        first, second = _tangent_axes(self.axis)
        du = np.abs(points[..., first] - self.center[first])
        dv = np.abs(points[..., second] - self.center[second])
        return (du <= self.size[0] / 2) & (dv <= self.size[1] / 2)


@dataclass(frozen=True)
class Blocker:
    lo: tuple
    hi: tuple
    albedo: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ContractError(f"blocker needs hi > lo, got {self.lo} .. {self.hi}")


@dataclass(frozen=True)
class BoxScene:
    size: tuple
    walls: tuple = tuple(WallMaterial() for _ in range(6))
    lights: tuple = ()
    window: WindowLight = None
    blockers: tuple = ()
    ambient: float = 0.0

    def __post_init__(self):
        if len(self.size) != 3 or any(s <= 0 for s in self.size):
            raise ContractError(f"room size must be three positive extents, got {self.size}")
        if len(self.walls) != 6:
            raise ContractError(f"a box room has 6 walls, got {len(self.walls)}")
        if self.ambient < 0:
            raise ContractError("ambient term must be nonnegative")
        for light in self.lights:
            if not self.contains(np.asarray(light.center), margin=-1e-9):
                raise ContractError(f"light at {light.center} lies outside the room")

    def contains(self, points, margin=0.0):
        points = np.asarray(points, dtype=np.float64)
        size = np.asarray(self.size)
        return ((points > margin) & (points < size - margin)).all(axis=-1)


def _wall_hits(scene, origins, dirs):
    size = np.asarray(scene.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_axis = np.where(dirs > 0, (size - origins) / dirs, -origins / dirs)
    t_axis = np.where(dirs == 0, np.inf, t_axis)
    axis = np.argmin(t_axis, axis=-1)
    t = np.take_along_axis(t_axis, axis[:, None], axis=-1)[:, 0]
    high = np.take_along_axis(dirs, axis[:, None], axis=-1)[:, 0] > 0
    return t, 2 * axis + high


def _box_hits(blocker, origins, dirs):
    """Entry distance (inf on a miss) and the entry face axis."""
    lo = np.asarray(blocker.lo)
    hi = np.asarray(blocker.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origins) / dirs
        t1 = (hi - origins) / dirs
    t0 = np.nan_to_num(t0, nan=-np.inf)
    t1 = np.nan_to_num(t1, nan=np.inf)
    t_min = np.minimum(t0, t1)
    near = t_min.max(axis=-1)
    far = np.maximum(t0, t1).min(axis=-1)
    hit = (near <= far) & (near > SURFACE_OFFSET)
    return np.where(hit, near, np.inf), np.argmax(t_min, axis=-1)


def _occluded(scene, origins, dirs, distance):
    blocked = np.zeros(len(origins), dtype=bool)
    for blocker in scene.blockers:
        t, _ = _box_hits(blocker, origins, dirs)
        blocked |= t < distance
    return blocked


def _wall_albedo(scene, wall, points):
    albedo = np.zeros((len(points), 3))
    for index, material in enumerate(scene.walls):
        on_wall = wall == index
        if not on_wall.any():
            continue
        color = np.asarray(material.albedo, dtype=np.float64)
        if material.checker is None:
            albedo[on_wall] = color
            continue
        first, second = _tangent_axes(index // 2)
        cells = np.floor(points[on_wall][:, first] / material.checker_size) + np.floor(
            points[on_wall][:, second] / material.checker_size
        )
        odd = (cells.astype(np.int64) % 2 == 1)[:, None]
        albedo[on_wall] = np.where(odd, np.asarray(material.checker, dtype=np.float64), color)
    return albedo


def _direct_light(scene, points, normals, albedo):
    """Reflected radiance at diffuse surface points."""
    irradiance = np.zeros((len(points), 3))
    start = points + SURFACE_OFFSET * normals
    for light in scene.lights:
        samples = light.sample_points()
        light_normal = light.normal()
        for q in samples:
            offset = q - points
            distance = np.linalg.norm(offset, axis=-1)
            wi = offset / np.maximum(distance, 1e-12)[:, None]
            cos_surface = np.clip((normals * wi).sum(axis=-1), 0.0, None)
            cos_light = np.clip(-(wi @ light_normal), 0.0, None)
            geometry = cos_surface * cos_light / np.maximum(distance**2, 1e-12)
            visible = ~_occluded(scene, start, wi, distance * (1 - 1e-6))
            weight = geometry * visible * light.area / len(samples)
            irradiance += weight[:, None] * np.asarray(light.radiance)

    window = scene.window
    if window is not None:
        sun = np.asarray(window.sun_direction)
        axis = window.axis
        plane = scene.size[axis] if window.wall % 2 else 0.0
        toward = sun[axis] > 0 if window.wall % 2 else sun[axis] < 0
        cos_surface = np.clip(normals @ sun, 0.0, None)
        if toward and abs(sun[axis]) > 0:
            t = (plane - start[:, axis]) / sun[axis]
            exit_points = start + t[:, None] * sun
            lit = window.contains(exit_points) & (t > 0)
            lit &= ~_occluded(scene, start, np.broadcast_to(sun, start.shape), t)
            sun_irradiance = np.asarray(window.sun_radiance) * window.solid_angle
            irradiance += (cos_surface * lit)[:, None] * sun_irradiance
    return albedo / math.pi * irradiance + albedo * scene.ambient


def trace_radiance(scene, origins, dirs):
    """Radiance and hit distance along world rays ``origins + t * dirs`` inside the room."""
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape).copy()
    n = len(dirs)

    t, wall = _wall_hits(scene, origins, dirs)
    kind = np.zeros(n, dtype=np.int64)  # 0 wall, 1 blocker, 2 emitter
    normals = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    emitted = np.zeros((n, 3))

    for blocker in scene.blockers:
        t_box, face = _box_hits(blocker, origins, dirs)
        closer = t_box < t
        t = np.where(closer, t_box, t)
        kind[closer] = 1
        face_normal = np.zeros((int(closer.sum()), 3))
        face_normal[np.arange(len(face_normal)), face[closer]] = -np.sign(
            dirs[closer, face[closer]]
        )
        normals[closer] = face_normal
        albedo[closer] = np.asarray(blocker.albedo)

    for light in scene.lights:
        axis = light.axis
        with np.errstate(divide="ignore", invalid="ignore"):
            t_light = (light.center[axis] - origins[:, axis]) / dirs[:, axis]
        points = origins + np.nan_to_num(t_light, posinf=0.0, neginf=0.0)[:, None] * dirs
        first, second = _tangent_axes(axis)
        inside = (np.abs(points[:, first] - light.center[first]) <= light.size[0] / 2) & (
            np.abs(points[:, second] - light.center[second]) <= light.size[1] / 2
        )
        hit = inside & (t_light > SURFACE_OFFSET) & (t_light <= t + 1e-9)
        t = np.where(hit, t_light, t)
        kind[hit] = 2
        front = dirs[:, axis] * light.facing < 0
        emitted[hit] = np.where(front[hit, None], np.asarray(light.radiance), 0.0)

    points = origins + t[:, None] * dirs
    on_wall = kind == 0
    wall_axis = wall // 2
    wall_normal = np.zeros((n, 3))
    wall_normal[np.arange(n), wall_axis] = np.where(wall % 2 == 1, -1.0, 1.0)
    normals[on_wall] = wall_normal[on_wall]
    albedo[on_wall] = _wall_albedo(scene, np.where(on_wall, wall, -1), points)[on_wall]

    radiance = emitted.copy()
    escaped = np.zeros(n, dtype=bool)
    window = scene.window
    if window is not None:
        escaped = on_wall & (wall == window.wall) & window.contains(points)
        sun = np.asarray(window.sun_direction)
        in_disk = dirs @ sun >= math.cos(window.angular_radius)
        sky = np.where(in_disk[:, None], np.asarray(window.sun_radiance), np.asarray(window.sky_radiance))
        radiance[escaped] = sky[escaped]

    surface = (kind < 2) & ~escaped
    if surface.any():
        radiance[surface] = _direct_light(
            scene, points[surface], normals[surface], albedo[surface]
        )
    return radiance, t


def _check_inside(scene, position, what):
    position = torch.as_tensor(position, dtype=torch.float64).reshape(3).numpy()
    if not scene.contains(position):
        raise ContractError(f"{what} at {position.tolist()} lies outside the room")
    return position


def render_scene_view(scene, camera):
    """HDR image and exact view depth seen by a pinhole ``camera``."""
    origin = _check_inside(scene, camera.position, "camera")
    pixels = camera.pixel_grid()
    targets = unproject(camera, pixels, torch.ones(pixels.shape[:-1], dtype=torch.float64))
    dirs = targets - camera.position
    dirs = (dirs / dirs.norm(dim=-1, keepdim=True)).reshape(-1, 3).numpy()
    radiance, t = trace_radiance(scene, origin, dirs)
    depth = t * (dirs @ camera.forward.numpy())
    shape = (camera.height, camera.width)
    image = HdrImage(torch.from_numpy(radiance.reshape(*shape, 3)).float())
    return image, DepthMap(torch.from_numpy(depth.reshape(shape)).float())


def render_gt_envmap(scene, position, height=Config.ENV_HEIGHT, frame=None):
    """Ground-truth HDR panorama at ``position``; ``frame`` columns are the map axes in the world."""
    origin = _check_inside(scene, position, "probe")
    dirs = equirect_directions(height, torch.float64)
    if frame is not None:
        dirs = dirs @ torch.as_tensor(frame, dtype=torch.float64).T
    radiance, _ = trace_radiance(scene, origin, dirs.reshape(-1, 3).numpy())
    return EquirectMap(torch.from_numpy(radiance.reshape(height, 2 * height, 3)).float(), "hdr")


def _waypoint_box(scene, margin):
    size = np.asarray(scene.size, dtype=np.float64)
    lo = np.full(3, margin)
    hi = size - margin
    if (hi <= lo).any():
        raise ContractError(f"room {scene.size} is too small for trajectory margin {margin}")
    return lo, hi


def _arc_length_samples(waypoints, step, count):
    chord = np.linalg.norm(np.diff(waypoints, axis=0), axis=-1)
    knots = np.concatenate([[0.0], np.cumsum(chord)])
    spline = CubicSpline(knots, waypoints, axis=0)
    dense = np.linspace(0.0, knots[-1], 200 * len(waypoints))
    points = spline(dense)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=-1))])
    wanted = np.arange(count) * step
    if wanted[-1] > arc[-1]:
        return None
    return spline(np.interp(wanted, arc, dense))


def gen_trajectory(
    scene,
    n_frames=Config.N_FRAMES,
    seed=Config.SEED,
    step=Config.TRAJECTORY_STEP,
    rotation_deg=Config.TRAJECTORY_ROTATION_DEG,
    width=Config.FRAME_WIDTH,
    height=Config.FRAME_HEIGHT,
    fov_deg=Config.FRAME_FOV_DEG,
    margin=0.1,
    attempts=50,
):
    """Cameras along a spline through random in-room waypoints.

    Positions are spaced ``step`` apart in arc length; the view yaws by
    ``rotation_deg`` per frame at a constant downward pitch.
    """
    if n_frames < 1:
        raise ContractError(f"need at least one frame, got {n_frames}")
    rng = np.random.default_rng(seed)
    lo, hi = _waypoint_box(scene, margin + 0.3)
    length = step * (n_frames - 1)

    positions = None
    for _ in range(attempts):
        waypoints = [rng.uniform(lo, hi)]
        total = 0.0
        while total < length * 1.5 or len(waypoints) < 2:
            waypoints.append(rng.uniform(lo, hi))
            total += np.linalg.norm(waypoints[-1] - waypoints[-2])
        if n_frames == 1:
            positions = np.asarray(waypoints[:1])
            break
        candidate = _arc_length_samples(np.asarray(waypoints), step, n_frames)
        if candidate is not None and scene.contains(candidate, margin).all():
            positions = candidate
            break
    if positions is None:
        raise ContractError(f"could not fit a {n_frames}-frame path inside room {scene.size}")

    yaw0 = rng.uniform(0.0, 360.0)
    cameras = []
    for index, position in enumerate(positions):
        rotation = Rotation.from_euler(
            "YX", [yaw0 + index * rotation_deg, TRAJECTORY_PITCH_DEG], degrees=True
        ).as_matrix()
        cameras.append(
            Camera.look_along(position, -rotation[:, 2], width, height, fov_deg)
        )
    logger.info("trajectory: %d frames, seed %d", len(cameras), seed)
    return cameras


def sample_probe_positions(
    camera, depth_max, n=Config.N_PROBES, seed=Config.SEED, depth=None, attempts=1000
):
    """World positions uniform in the frustum between 0.3 and 0.8 of ``depth_max``.

    With ``depth`` given, samples behind the observed surface are redrawn.
    """
    if n < 1:
        raise ContractError(f"need at least one probe, got {n}")
    if not depth_max > 0:
        raise ContractError(f"depth_max must be positive, got {depth_max}")
    rng = np.random.default_rng(seed)
    near, far = 0.3 * depth_max, 0.8 * depth_max
    probes = []
    for _ in range(attempts):
        u = rng.uniform(0.0, 1.0)
        z = (near**3 + u * (far**3 - near**3)) ** (1.0 / 3.0)
        pixel = rng.uniform([0.0, 0.0], [camera.width - 1, camera.height - 1])
        if depth is not None:
            row, col = int(round(pixel[1])), int(round(pixel[0]))
            if not depth.valid[row, col] or z >= 0.9 * float(depth.data[row, col]):
                continue
        probes.append(unproject(camera, torch.tensor(pixel), z))
        if len(probes) == n:
            return probes
    raise ContractError(f"found only {len(probes)} of {n} probes in front of the surface")


def default_box_scene():
    """Room with a ceiling panel, a sunlit window, a checkerboard floor and a table."""
    walls = [WallMaterial((0.75, 0.72, 0.68)) for _ in range(6)]
    walls[2] = WallMaterial((0.8, 0.8, 0.8), checker=(0.15, 0.15, 0.18), checker_size=0.5)
    walls[3] = WallMaterial((0.85, 0.85, 0.85))
    return BoxScene(
        size=(4.0, 2.8, 5.0),
        walls=tuple(walls),
        lights=(
            AreaLight(
                center=(2.0, 2.8, 2.5),
                size=(1.0, 0.6),
                axis=1,
                facing=-1,
                radiance=(12.0, 12.0, 11.0),
            ),
        ),
        window=WindowLight(
            wall=1,
            center=(4.0, 1.6, 2.0),
            size=(0.9, 1.4),
            sun_direction=(0.6, 0.6, 0.2),
            sun_radiance=(400.0, 380.0, 340.0),
        ),
        blockers=(Blocker((1.2, 0.0, 1.5), (2.2, 0.75, 2.5), (0.5, 0.35, 0.2)),),
        ambient=0.05,
    )


def occluder_scene():
    """Ceiling panel above a floating slab; the space under the slab is shadowed."""
    return BoxScene(
        size=(4.0, 3.0, 4.0),
        lights=(
            AreaLight(
                center=(2.0, 3.0, 2.0),
                size=(0.8, 0.8),
                axis=1,
                facing=-1,
                radiance=(20.0, 20.0, 20.0),
            ),
        ),
        blockers=(Blocker((1.4, 1.9, 1.4), (2.6, 2.0, 2.6), (0.4, 0.4, 0.4)),),
        ambient=0.02,
    )
