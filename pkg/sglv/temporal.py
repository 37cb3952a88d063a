"""Blending detailed partial panoramas into volume renders, frame by frame.

A single view mixes the volume-rendered map with the mesh panorama through a
soft visibility weight. Over a video the blended map, the closest observed
depth and the accumulated weight are carried from frame to frame; a new
observation only overwrites history where it is clearly closer.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from scipy import ndimage

from sglv.config import Config
from sglv.core import EquirectMap
from sglv.errors import ContractError
from sglv.fit import FitOptions, fit_sglv
from sglv.panorama import build_partial_mesh, render_partial_pano
from sglv.raytrace import RenderSettings, render_envmap
from sglv.volume import (
    SglvGrid,
    build_initial_volume,
    clear_near_surface,
    make_volume_config,
    merge_volumes,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TemporalState:
    previous: EquirectMap
    depth: EquirectMap
    weight: EquirectMap
    index: int = 0

    @classmethod
    def initial(cls, height, dtype=torch.float32):
        return cls(
            previous=EquirectMap.full(height, 0.0, 3, "hdr", dtype),
            depth=EquirectMap.full(height, float("inf"), 1, "depth", dtype),
            weight=EquirectMap.full(height, 0.0, 1, "mask", dtype),
        )


@dataclass(frozen=True, eq=False)
class BlendWeights:
    weight: EquirectMap

    def __post_init__(self):
        if self.weight.kind != "mask" or self.weight.channels != 1:
            raise ContractError("blend weights must be a single-channel mask map")


def compute_blend_weight(bundle, feather=Config.FEATHER):
    """Hit mask with a linear ramp of ``feather`` pixels inside its boundary.

    A pixel at distance ``d`` from the nearest miss gets ``min(1, d / (feather + 1))``;
    the distance wraps around the longitude seam.
    """
    mask = bundle.mask.data[..., 0].detach().cpu().numpy() > 0.5
    if feather <= 0 or mask.all() or not mask.any():
        weight = mask.astype(np.float32)
    else:
        pad = min(feather + 1, mask.shape[1])
        padded = np.pad(mask, ((0, 0), (pad, pad)), mode="wrap")
        distance = ndimage.distance_transform_edt(padded)[:, pad:-pad]
        weight = np.minimum(1.0, distance / (feather + 1)).astype(np.float32)
    return BlendWeights(EquirectMap(torch.from_numpy(weight).to(bundle.mask.data.dtype), "mask"))


def blend_single(volume_map, bundle, weights):
    """``L = L_M * L̃ + (1 - L_M) * L̇``."""
    volume_map.check_same_shape(bundle.color)
    volume_map.check_same_shape(weights.weight)
    mix = weights.weight.data.to(volume_map.data.dtype)
    detail = bundle.color.data.to(volume_map.data.dtype)
    return EquirectMap(mix * detail + (1 - mix) * volume_map.data, "hdr")


def conservative_clamp(weights, prev_depth, new_depth, threshold=Config.CLAMP_THRESHOLD):
    """Zero the weight wherever the new surface is not ``threshold`` closer than history."""
    weights.weight.check_same_shape(prev_depth)
    weights.weight.check_same_shape(new_depth)
    closer = (prev_depth.data - new_depth.data.to(prev_depth.data.dtype)) >= threshold
    mix = weights.weight.data
    clamped = torch.where(closer, mix, (mix - 1).clamp_min(0.0))
    return BlendWeights(EquirectMap(clamped, "mask"))


def _accumulate_depth(mix, new_depth, prev_depth):
    mixed = mix * new_depth + (1 - mix) * prev_depth
    unseen = torch.isinf(prev_depth)
    mixed = torch.where(unseen | (mix >= 1), new_depth, mixed)
    return torch.where(mix <= 0, prev_depth, mixed)


def temporal_update(state, volume_map, bundle, weights):
    """Blend frame ``i`` into the history and advance the state.

    ``weights`` must already be conservatively clamped against ``state.depth``.
    """
    for other in (state.previous, bundle.color, weights.weight):
        volume_map.check_same_shape(other)
    dtype = volume_map.data.dtype
    mix = weights.weight.data.to(dtype)
    seen = state.weight.data.to(dtype)
    history = (1 - seen) * volume_map.data + seen * state.previous.data.to(dtype)
    blended = mix * bundle.color.data.to(dtype) + (1 - mix) * history

    prev_depth = state.depth.data
    depth = _accumulate_depth(mix.to(prev_depth.dtype), bundle.depth.data.to(prev_depth.dtype), prev_depth)
    weight = (state.weight.data + mix.to(state.weight.data.dtype)).clamp(max=1.0)
    env = EquirectMap(blended, "hdr")
    return env, TemporalState(
        previous=env,
        depth=EquirectMap(depth, "depth"),
        weight=EquirectMap(weight, "mask"),
        index=state.index + 1,
    )


@dataclass(frozen=True)
class VideoOptions:
    height: int = Config.ENV_HEIGHT
    feather: int = Config.FEATHER
    clamp_threshold: float = Config.CLAMP_THRESHOLD
    gap_threshold: float = Config.GAP_THRESHOLD
    volume_counts: tuple = Config.VOLUME_COUNTS
    volume_range: tuple = Config.VOLUME_RANGE
    max_samples: int = Config.MAX_SAMPLES
    fit: FitOptions = field(default_factory=FitOptions)
    accumulate: bool = True

    def __post_init__(self):
        if self.height < 1:
            raise ContractError(f"panorama height must be positive, got {self.height}")
        if self.feather < 0:
            raise ContractError(f"feather width must be nonnegative, got {self.feather}")


class Frame(NamedTuple):
    """One RGBD frame plus optional (world position, HDR map) fitting targets."""

    camera: object
    image: object
    depth: object
    targets: tuple = ()


@dataclass(frozen=True, eq=False)
class FrameResult:
    index: int
    env: EquirectMap
    volume_map: EquirectMap
    bundle: object
    weights: BlendWeights
    sglv: SglvGrid
    fit: object = None


@dataclass(frozen=True, eq=False)
class VideoState:
    """Everything needed to continue a video run after ``temporal.index`` frames."""

    temporal: TemporalState
    volume: SglvGrid = None
    predictions: list = None

    @property
    def index(self):
        return self.temporal.index


def pipeline_volume_config(frame, opts):
    return make_volume_config(
        frame.depth.max_depth(), frame.camera, opts.volume_counts, opts.volume_range
    )


def _check_probe(config, probe):
    if not bool(config.contains(torch.as_tensor(probe, dtype=torch.float64))):
        raise ContractError(f"probe {list(probe)} lies outside the lighting volume")


def _frame_volume(config, frame, opts, previous=None):
    init = build_initial_volume(config, frame.camera, frame.image, frame.depth)
    if not frame.targets or opts.fit is None:
        return clear_near_surface(SglvGrid.from_initial(init), init.empty), None
    if previous is not None and len(previous) != len(frame.targets):
        previous = None
    mode = "video" if previous is not None else "single"
    result = fit_sglv(init, list(frame.targets), opts.fit, previous=previous, mode=mode)
    return result.sglv, result


def _render_frame(config, frame, sglv, probe, opts):
    settings = RenderSettings.for_config(config, opts.max_samples)
    volume_map = render_envmap(sglv, probe, opts.height, settings).detach()
    mesh = build_partial_mesh(frame.camera, frame.depth, frame.image, opts.gap_threshold)
    bundle = render_partial_pano(mesh, probe, opts.height, frame=config.rotation)
    return volume_map, bundle


def run_single_view(camera, image, depth, probe, opts=None, targets=(), config=None):
    """Fit, render the volume, ray-cast the mesh panorama and blend them."""
    opts = opts or VideoOptions()
    frame = Frame(camera, image, depth, tuple(targets))
    config = config or pipeline_volume_config(frame, opts)
    _check_probe(config, probe)
    sglv, fit = _frame_volume(config, frame, opts)
    volume_map, bundle = _render_frame(config, frame, sglv, probe, opts)
    weights = compute_blend_weight(bundle, opts.feather)
    env = blend_single(volume_map, bundle, weights)
    return FrameResult(0, env, volume_map, bundle, weights, sglv, fit)


def iter_video_pipeline(frames, probe, opts=None, state=None):
    """Yield ``(FrameResult, VideoState)`` per frame, resuming after ``state.index`` frames.

    The volume is anchored at the first frame. With ``opts.accumulate`` off,
    every frame is an independent single-view prediction in that same frame.
    """
    opts = opts or VideoOptions()
    frames = list(frames)
    if not frames:
        raise ContractError("video pipeline needs at least one frame")
    config = pipeline_volume_config(frames[0], opts)
    _check_probe(config, probe)
    state = state or VideoState(TemporalState.initial(opts.height))
    if state.index > len(frames):
        raise ContractError(f"state is at frame {state.index} of a {len(frames)}-frame video")

    for index in range(state.index, len(frames)):
        frame = frames[index]
        if not opts.accumulate:
            result = run_single_view(
                frame.camera, frame.image, frame.depth, probe, opts, frame.targets, config
            )
            result = dataclasses.replace(result, index=index)
            state = VideoState(dataclasses.replace(state.temporal, index=index + 1))
            yield result, state
            continue

        sglv, fit = _frame_volume(config, frame, opts, state.predictions)
        if state.volume is not None:
            sglv = merge_volumes(sglv, state.volume, index / (index + 1))
        volume_map, bundle = _render_frame(config, frame, sglv, probe, opts)
        weights = compute_blend_weight(bundle, opts.feather)
        weights = conservative_clamp(
            weights, state.temporal.depth, bundle.depth, opts.clamp_threshold
        )
        env, temporal = temporal_update(state.temporal, volume_map, bundle, weights)
        predictions = [p.detach() for p in fit.predictions] if fit is not None else None
        state = VideoState(temporal, sglv.detach(), predictions)
        logger.info(
            "frame %d/%d: coverage %.3f",
            index + 1,
            len(frames),
            float(temporal.weight.data.mean()),
        )
        yield FrameResult(index, env, volume_map, bundle, weights, sglv, fit), state


def run_video_pipeline(frames, probe, opts=None):
    return [result.env for result, _ in iter_video_pipeline(frames, probe, opts)]
