"""Partial meshes from RGBD frames and the panoramas ray-cast from them.

The mesh connects neighboring depth pixels into triangles; a bounding volume
hierarchy over those triangles answers nearest-hit queries for every
panorama direction at once.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from sglv.config import Config
from sglv.core import EquirectMap, equirect_directions, unproject
from sglv.errors import ShapeMismatchError

logger = logging.getLogger(__name__)

LEAF_SIZE = 8
HIT_EPSILON = 1e-9


@dataclass(frozen=True, eq=False)
class Bvh:
    """Flattened hierarchy; leaves own ``order[start:start + count]``."""

    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray

    @property
    def n_nodes(self):
        return len(self.lo)

    @classmethod
    def build(cls, triangles_xyz):
        n = len(triangles_xyz)
        tri_lo = triangles_xyz.min(axis=1)
        tri_hi = triangles_xyz.max(axis=1)
        centroids = triangles_xyz.mean(axis=1)
        order = np.arange(n)
        nodes = []

        def emit(begin, end):
            index = len(nodes)
            items = order[begin:end]
            node = {
                "lo": tri_lo[items].min(axis=0),
                "hi": tri_hi[items].max(axis=0),
                "left": -1,
                "right": -1,
                "start": begin,
                "count": end - begin,
            }
            nodes.append(node)
            if end - begin <= LEAF_SIZE:
                return index
            spread = centroids[items].max(axis=0) - centroids[items].min(axis=0)
            axis = int(np.argmax(spread))
            ranked = items[np.argsort(centroids[items, axis], kind="stable")]
            order[begin:end] = ranked
            middle = (begin + end) // 2
            node["left"] = emit(begin, middle)
            node["right"] = emit(middle, end)
            node["count"] = 0
            return index

        if n:
            emit(0, n)
        return cls(
            lo=np.array([node["lo"] for node in nodes]).reshape(-1, 3),
            hi=np.array([node["hi"] for node in nodes]).reshape(-1, 3),
            left=np.array([node["left"] for node in nodes], dtype=np.int64),
            right=np.array([node["right"] for node in nodes], dtype=np.int64),
            start=np.array([node["start"] for node in nodes], dtype=np.int64),
            count=np.array([node["count"] for node in nodes], dtype=np.int64),
            order=order,
        )


@dataclass(frozen=True, eq=False)
class PartialMesh:
    vertices: np.ndarray
    colors: np.ndarray
    triangles: np.ndarray
    bvh: Bvh

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def is_empty(self):
        return self.n_triangles == 0


@dataclass(frozen=True, eq=False)
class PanoBundle:
    color: EquirectMap
    mask: EquirectMap
    depth: EquirectMap

    def __post_init__(self):
        self.color.check_same_shape(self.mask)
        self.color.check_same_shape(self.depth)

    @property
    def height(self):
        return self.color.height

    @classmethod
    def empty(cls, height, dtype=torch.float32):
        return cls(
            color=EquirectMap.full(height, 0.0, 3, "ldr", dtype),
            mask=EquirectMap.full(height, 0.0, 1, "mask", dtype),
            depth=EquirectMap.full(height, float("inf"), 1, "depth", dtype),
        )


def _quad_triangles(index):
    a = index[:-1, :-1]
    b = index[:-1, 1:]
    d = index[1:, :-1]
    e = index[1:, 1:]
    first = np.stack([a, d, b], axis=-1).reshape(-1, 3)
    second = np.stack([b, d, e], axis=-1).reshape(-1, 3)
    return np.concatenate([first, second])


def build_partial_mesh(camera, depth, image, gap_threshold=Config.GAP_THRESHOLD):
    """Triangulate the valid pixels of ``depth``, textured with ``image`` clamped to LDR.

    Each 2x2 pixel quad yields two triangles; a triangle is dropped when a
    vertex is invalid or its max/min vertex depth ratio exceeds
    ``1 + gap_threshold``.
    """
    if (image.height, image.width) != (depth.height, depth.width):
        raise ShapeMismatchError(
            f"image is {image.height}x{image.width}, depth is {depth.height}x{depth.width}"
        )
    valid = depth.valid.numpy()
    values = depth.data.to(torch.float64).numpy()
    index = np.full(valid.shape, -1, dtype=np.int64)
    index[valid] = np.arange(int(valid.sum()))

    pixels = camera.pixel_grid()[torch.from_numpy(valid)]
    vertex_depth = torch.from_numpy(values[valid])
    if len(vertex_depth):
        vertices = unproject(camera, pixels, vertex_depth).numpy()
    else:
        vertices = np.zeros((0, 3))
    colors = image.data.detach().to(torch.float64).clamp(0.0, 1.0).numpy()[valid]

    triangles = _quad_triangles(index)
    triangles = triangles[(triangles >= 0).all(axis=1)]
    if len(triangles):
        corner_depths = values[valid][triangles]
        ratio = corner_depths.max(axis=1) / corner_depths.min(axis=1)
        triangles = triangles[ratio - 1.0 <= gap_threshold]

    bvh = Bvh.build(vertices[triangles].reshape(-1, 3, 3))
    logger.debug(
        "partial mesh: %d vertices, %d triangles, %d BVH nodes",
        len(vertices),
        len(triangles),
        bvh.n_nodes,
    )
    return PartialMesh(vertices, colors, triangles, bvh)


def _slab_test(origin, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inverse = 1.0 / dirs
        t0 = (lo - origin) * inverse
        t1 = (hi - origin) * inverse
    t0 = np.nan_to_num(t0, nan=-np.inf)
    t1 = np.nan_to_num(t1, nan=np.inf)
    near = np.minimum(t0, t1).max(axis=-1)
    far = np.maximum(t0, t1).min(axis=-1)
    return near, far


def intersect_triangles(origin, dirs, v0, v1, v2):
    """Möller-Trumbore test; returns hit distance (inf on a miss) and barycentrics (u, v)."""
    edge1 = v1 - v0
    edge2 = v2 - v0
    p = np.cross(dirs, edge2)
    det = (edge1 * p).sum(axis=-1)
    parallel = np.abs(det) < 1e-12
    inverse = 1.0 / np.where(parallel, 1.0, det)
    s = origin - v0
    u = (s * p).sum(axis=-1) * inverse
    q = np.cross(s, edge1)
    v = (dirs * q).sum(axis=-1) * inverse
    t = (edge2 * q).sum(axis=-1) * inverse
    hit = ~parallel & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > HIT_EPSILON)
    return np.where(hit, t, np.inf), u, v


def cast_rays(mesh, origin, dirs):
    """Nearest hit per ray: distance (inf on a miss), triangle index and barycentrics.

    Traversal is breadth first over (ray, node) pairs; subtrees farther than
    the best hit so far are pruned.
    """
    n_rays = len(dirs)
    best_t = np.full(n_rays, np.inf)
    best_tri = np.full(n_rays, -1, dtype=np.int64)
    best_uv = np.zeros((n_rays, 2))
    if mesh.is_empty:
        return best_t, best_tri, best_uv

    bvh = mesh.bvh
    corners = mesh.vertices[mesh.triangles]
    rays = np.arange(n_rays)
    nodes = np.zeros(n_rays, dtype=np.int64)
    while len(rays):
        near, far = _slab_test(origin, dirs[rays], bvh.lo[nodes], bvh.hi[nodes])
        keep = (far >= np.maximum(near, 0.0)) & (near < best_t[rays])
        rays, nodes = rays[keep], nodes[keep]

        leaf = bvh.left[nodes] < 0
        leaf_rays, leaf_nodes = rays[leaf], nodes[leaf]
        if len(leaf_rays):
            counts = bvh.count[leaf_nodes]
            pair_rays = np.repeat(leaf_rays, counts)
            offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
            pair_tris = bvh.order[np.repeat(bvh.start[leaf_nodes], counts) + offsets]
            tri = corners[pair_tris]
            t, u, v = intersect_triangles(origin, dirs[pair_rays], tri[:, 0], tri[:, 1], tri[:, 2])
            better = t < best_t[pair_rays]
            pair_rays, pair_tris, t, u, v = (
                x[better] for x in (pair_rays, pair_tris, t, u, v)
            )
            ranked = np.lexsort((pair_tris, t, pair_rays))
            _, first = np.unique(pair_rays[ranked], return_index=True)
            winners = ranked[first]
            hit_rays = pair_rays[winners]
            best_t[hit_rays] = t[winners]
            best_tri[hit_rays] = pair_tris[winners]
            best_uv[hit_rays] = np.stack([u[winners], v[winners]], axis=-1)

        inner_rays, inner_nodes = rays[~leaf], nodes[~leaf]
        rays = np.concatenate([inner_rays, inner_rays])
        nodes = np.concatenate([bvh.left[inner_nodes], bvh.right[inner_nodes]])
    return best_t, best_tri, best_uv


def render_partial_pano(mesh, position, height, frame=None):
    """Ray-cast LDR color, hit mask and hit distance from world ``position``.

    ``frame`` rotates panorama directions into the world (columns are the
    frame axes); the identity by default.
    """
    dirs = equirect_directions(height, torch.float64)
    if frame is not None:
        dirs = dirs @ torch.as_tensor(frame, dtype=torch.float64).T
    dirs = dirs.reshape(-1, 3).numpy()
    origin = torch.as_tensor(position, dtype=torch.float64).reshape(3).numpy()

    t, tri, uv = cast_rays(mesh, origin, dirs)
    hit = tri >= 0
    color = np.zeros((len(dirs), 3))
    if hit.any():
        weights = np.stack([1.0 - uv[hit, 0] - uv[hit, 1], uv[hit, 0], uv[hit, 1]], axis=-1)
        vertex_colors = mesh.colors[mesh.triangles[tri[hit]]]
        color[hit] = (weights[..., None] * vertex_colors).sum(axis=1).clip(0.0, 1.0)

    shape = (height, 2 * height)
    logger.debug("partial panorama: %.1f%% of directions hit", 100.0 * hit.mean())
    return PanoBundle(
        color=EquirectMap(torch.from_numpy(color.reshape(*shape, 3)).float(), "ldr"),
        mask=EquirectMap(torch.from_numpy(hit.reshape(shape)).float(), "mask"),
        depth=EquirectMap(torch.from_numpy(t.reshape(shape)).float(), "depth"),
    )
