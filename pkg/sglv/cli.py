import dataclasses
import functools
import logging
import math
from pathlib import Path

import click
import numpy as np
import torch

from sglv import load_config
from sglv.core import EquirectMap
from sglv.errors import InputError, SglvError, ValidationFailure
from sglv.fit import FitOptions, LossWeights, grad_check, loss_log_l2
from sglv.io import (
    load_state,
    read_depth,
    read_envmap,
    read_image,
    read_json,
    save_state,
    write_json,
    write_map,
    write_sidecar,
    write_table,
    write_trace,
)
from sglv.raytrace import RenderSettings
from sglv.scenegen import (
    default_box_scene,
    gen_trajectory,
    render_gt_envmap,
    render_scene_view,
    sample_probe_positions,
)
from sglv.schemas import (
    fit_options_schema,
    poses_schema,
    probes_schema,
    render_settings_schema,
    run_manifest_schema,
    scene_schema,
    sphere_spec_schema,
)
from sglv.shading import MicrofacetBrdf, SphereRenderSpec, render_mirror_sphere, render_sphere
from sglv.temporal import (
    Frame,
    VideoOptions,
    iter_video_pipeline,
    pipeline_volume_config,
    run_single_view,
)
from sglv.volume import SglvGrid, VolumeConfig, save_volume

logger = logging.getLogger(__name__)


def handle_errors(command):
    """Turn package errors into a message on stderr and the matching exit code."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except SglvError as err:
            click.echo(f"error: {err}", err=True)
            raise SystemExit(err.exit_code)

    return wrapper


def parse_probe(ctx, param, value):
    if value is None:
        return None
    try:
        coords = [float(v) for v in value.split(",")]
    except ValueError:
        raise click.BadParameter("expected x,y,z")
    if len(coords) != 3:
        raise click.BadParameter("expected x,y,z")
    return coords


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log at debug level.")
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    envvar="SGLV_THREADS",
    default=None,
    help="Worker threads (default: logical cores).",
)
@click.pass_context
def cli(ctx, verbose, threads):
    config = load_config()
    logging.basicConfig(
        level=logging.DEBUG if verbose else config.LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    torch.set_num_threads(threads or config.THREADS)
    ctx.obj = config


def _frame_path(root, kind, index):
    return Path(root) / "frames" / f"{kind}_{index:03d}.pfm"


def _load_sequence(root, poses_path=None):
    root = Path(root)
    poses = read_json(poses_path or root / "poses.json", poses_schema)["frames"]
    frames = []
    for index, camera in sorted(poses, key=lambda pose: pose[0]):
        rgb, depth = _frame_path(root, "rgb", index), _frame_path(root, "depth", index)
        if not rgb.exists() or not depth.exists():
            raise InputError(f"pose {index} has no matching frame files under {root / 'frames'}")
        frames.append((camera, read_image(rgb), read_depth(depth)))
    on_disk = len(list((root / "frames").glob("rgb_*.pfm")))
    if on_disk != len(frames):
        raise InputError(f"{on_disk} frames on disk but {len(frames)} poses")
    return frames


def _load_probes(root, height=None):
    """Probe targets, resampled to ``height`` rows when it differs from the stored maps."""
    root = Path(root)
    document = read_json(root / "probes.json", probes_schema)
    height = height or document["height"]
    targets = []
    for probe in sorted(document["probes"], key=lambda p: p["index"]):
        targets.append((probe["position"], read_envmap(root / probe["file"]).resized(height)))
    return height, targets


def _pipeline_options(config, height, iters, spp, seed, step_size):
    fit = FitOptions(
        iterations=iters or config.FIT_ITERATIONS,
        step_size=step_size or config.FIT_STEP_SIZE,
        weights=LossWeights(config.LOSS_EPS_R, config.LOSS_EPS_SM),
        sphere_size=config.FIT_SPHERE_SIZE,
        spp=spp or config.FIT_SPP,
        max_samples=config.MAX_SAMPLES,
        seed=seed,
        log_every=config.FIT_LOG_EVERY,
    )
    return VideoOptions(
        height=height,
        feather=config.FEATHER,
        clamp_threshold=config.CLAMP_THRESHOLD,
        gap_threshold=config.GAP_THRESHOLD,
        volume_counts=config.FIT_VOLUME_COUNTS,
        volume_range=config.VOLUME_RANGE,
        max_samples=config.MAX_SAMPLES,
        fit=fit,
    )


def _choose_probe(targets, probe, probe_index):
    if probe is not None:
        return probe, None
    if not 0 <= probe_index < len(targets):
        raise InputError(f"probe index {probe_index} out of range 0..{len(targets) - 1}")
    position, env = targets[probe_index]
    return position, env


@cli.command("scenegen")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--scene", "scene_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--frames", "n_frames", type=click.IntRange(min=1))
@click.option("--height", type=click.IntRange(min=1), help="Probe panorama height.")
@click.option("--probes", "n_probes", type=click.IntRange(min=1))
@click.option("--seed", type=int)
@click.pass_obj
@handle_errors
def cmd_scenegen(config, out_dir, scene_path, n_frames, height, n_probes, seed):
    """Render a synthetic RGBD sequence with ground-truth probe panoramas."""
    seed = config.SEED if seed is None else seed
    n_frames = n_frames or config.N_FRAMES
    height = height or config.ENV_HEIGHT
    n_probes = n_probes or config.N_PROBES
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "probes").mkdir(exist_ok=True)

    scene = read_json(scene_path, scene_schema) if scene_path else default_box_scene()
    write_json(out / "scene.json", scene, scene_schema)
    cameras = gen_trajectory(
        scene,
        n_frames,
        seed,
        config.TRAJECTORY_STEP,
        config.TRAJECTORY_ROTATION_DEG,
        config.FRAME_WIDTH,
        config.FRAME_HEIGHT,
        config.FRAME_FOV_DEG,
    )
    poses = []
    first_depth = None
    for index, camera in enumerate(cameras):
        image, depth = render_scene_view(scene, camera)
        if index == 0:
            first_depth = depth
        write_map(_frame_path(out, "rgb", index), image)
        write_map(_frame_path(out, "depth", index), depth, preview=False)
        poses.append(
            {
                "index": index,
                "matrix": camera.to_matrix().reshape(-1).tolist(),
                "fx": camera.fx,
                "fy": camera.fy,
                "cx": camera.cx,
                "cy": camera.cy,
                "width": camera.width,
                "height": camera.height,
            }
        )
    write_json(out / "poses.json", {"frames": poses})

    anchor = cameras[0]
    positions = sample_probe_positions(
        anchor, first_depth.max_depth(), n_probes, seed, depth=first_depth
    )
    probes = []
    for index, position in enumerate(positions):
        name = f"probes/gt_{index:03d}.pfm"
        write_map(out / name, render_gt_envmap(scene, position, height, anchor.rotation))
        probes.append({"index": index, "position": position.tolist(), "file": name})
    write_json(
        out / "probes.json",
        {
            "height": height,
            "frame_axes": anchor.rotation.reshape(-1).tolist(),
            "probes": probes,
        },
    )
    write_sidecar(
        out / "sidecar.json",
        "scenegen",
        seed,
        {"frames": n_frames, "height": height, "probes": n_probes},
        inputs={"scene": scene_path or "default"},
        outputs=["scene.json", "poses.json", "probes.json", "frames/", "probes/"],
    )
    click.echo(f"wrote {n_frames} frames and {n_probes} probes to {out}")


@cli.command("fit-single")
@click.option("--frames", "frames_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--poses", "poses_path", type=click.Path(exists=True, dir_okay=False), help="Poses file.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--frame", "frame_index", type=click.IntRange(min=0), default=0)
@click.option("--probe", callback=parse_probe, help="Probe position x,y,z.")
@click.option("--probe-index", type=click.IntRange(min=0), default=0)
@click.option("--height", type=click.IntRange(min=1), help="Probe panorama height.")
@click.option("--iters", type=click.IntRange(min=1))
@click.option("--spp", type=click.IntRange(min=1))
@click.option("--step-size", type=click.FloatRange(min=0, min_open=True))
@click.option("--seed", type=int)
@click.option("--no-blend", is_flag=True, help="Only write the volume-rendered map.")
@click.pass_obj
@handle_errors
def cmd_fit_single(
    config,
    frames_dir,
    poses_path,
    out_dir,
    frame_index,
    probe,
    probe_index,
    height,
    iters,
    spp,
    step_size,
    seed,
    no_blend,
):
    """Fit a lighting volume to one RGBD frame and blend in the mesh panorama."""
    seed = config.SEED if seed is None else seed
    sequence = _load_sequence(frames_dir, poses_path)
    if frame_index >= len(sequence):
        raise InputError(f"frame {frame_index} out of range, sequence has {len(sequence)}")
    height, targets = _load_probes(frames_dir, height)
    position, gt = _choose_probe(targets, probe, probe_index)
    opts = _pipeline_options(config, height, iters, spp, seed, step_size)
    anchor = Frame(*sequence[0])
    volume_config = pipeline_volume_config(anchor, opts)

    camera, image, depth = sequence[frame_index]
    result = run_single_view(camera, image, depth, position, opts, targets, volume_config)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = ["volume.sglv", "volume_map.pfm"]
    save_volume(result.sglv, out / "volume.sglv")
    write_map(out / "volume_map.pfm", result.volume_map)
    if result.fit is not None:
        write_trace(out / "trace.csv", result.fit.trace)
        outputs.append("trace.csv")
    if not no_blend:
        write_map(out / "pano_color.pfm", result.bundle.color)
        write_map(out / "pano_mask.pfm", result.bundle.mask)
        write_map(out / "pano_depth.pfm", result.bundle.depth, preview=False)
        write_map(out / "env.pfm", result.env)
        outputs += ["pano_color.pfm", "pano_mask.pfm", "pano_depth.pfm", "env.pfm"]
    write_sidecar(
        out / "sidecar.json",
        "fit-single",
        seed,
        {
            "frame": frame_index,
            "probe": list(map(float, position)),
            "height": height,
            "blend": not no_blend,
            "fit": fit_options_schema.dump(opts.fit),
            "render": render_settings_schema.dump(
                RenderSettings.for_config(volume_config, opts.max_samples)
            ),
        },
        inputs={"frames": frames_dir, "poses": poses_path or ""},
        outputs=outputs,
    )
    if result.fit is not None:
        click.echo(
            f"fit loss {result.fit.initial_loss:.6f} -> {result.fit.best_loss:.6f} "
            f"(iteration {result.fit.best_iteration})"
        )
    if gt is not None:
        final = result.volume_map if no_blend else result.env
        click.echo(f"log-L2 vs ground truth: {float(loss_log_l2(final, gt)):.6f}")


@cli.command("video")
@click.option("--frames", "frames_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--poses", "poses_path", type=click.Path(exists=True, dir_okay=False), help="Poses file.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--probe", callback=parse_probe, help="Probe position x,y,z.")
@click.option("--probe-index", type=click.IntRange(min=0), default=0)
@click.option("--height", type=click.IntRange(min=1), help="Probe panorama height.")
@click.option("--iters", type=click.IntRange(min=1))
@click.option("--spp", type=click.IntRange(min=1))
@click.option("--step-size", type=click.FloatRange(min=0, min_open=True))
@click.option("--seed", type=int)
@click.option("--count", type=click.IntRange(min=1), help="Use only the first COUNT frames.")
@click.option("--independent", is_flag=True, help="Predict every frame on its own.")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), help="State to continue from.")
@click.option("--state", "state_path", type=click.Path(dir_okay=False), help="Where to save state.")
@click.option("--stop-after", type=click.IntRange(min=1), help="Stop once this many frames are done.")
@click.pass_obj
@handle_errors
def cmd_video(
    config,
    frames_dir,
    poses_path,
    out_dir,
    probe,
    probe_index,
    height,
    iters,
    spp,
    step_size,
    seed,
    count,
    independent,
    resume,
    state_path,
    stop_after,
):
    """Run the accumulating pipeline over a frame sequence."""
    seed = config.SEED if seed is None else seed
    sequence = _load_sequence(frames_dir, poses_path)
    if count:
        sequence = sequence[:count]
    height, targets = _load_probes(frames_dir, height)
    position, gt = _choose_probe(targets, probe, probe_index)
    opts = _pipeline_options(config, height, iters, spp, seed, step_size)
    if independent:
        opts = dataclasses.replace(opts, accumulate=False)
    frames = [Frame(camera, image, depth, tuple(targets)) for camera, image, depth in sequence]
    state = load_state(resume) if resume else None

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    previous = state.temporal.previous if state is not None and state.index > 0 else None
    for result, state in iter_video_pipeline(frames, position, opts, state):
        write_map(out / f"env_{result.index:03d}.pfm", result.env)
        rows.append(
            {
                "frame": result.index,
                "log_l2": float(loss_log_l2(result.env, gt)) if gt is not None else math.nan,
                "smoothness": float(loss_log_l2(result.env, previous))
                if previous is not None
                else math.nan,
                "coverage": float(state.temporal.weight.data.mean()),
            }
        )
        previous = result.env
        if stop_after and state.index >= stop_after:
            break
    if not rows:
        raise InputError("nothing to do: the state already covers every frame")
    if state_path:
        save_state(state_path, state)

    write_table(out / "metrics.csv", rows)
    write_sidecar(
        out / "manifest.json",
        "video",
        seed,
        {
            "height": height,
            "accumulate": opts.accumulate,
            "clamp_threshold": opts.clamp_threshold,
            "feather": opts.feather,
            "fit": fit_options_schema.dump(opts.fit),
            "first_frame": rows[0]["frame"],
            "last_frame": rows[-1]["frame"],
        },
        inputs={"frames": frames_dir, "poses": poses_path or "", "resume": resume or ""},
        outputs=[f"env_{row['frame']:03d}.pfm" for row in rows] + ["metrics.csv"],
        schema=run_manifest_schema,
        probe=list(map(float, position)),
        frames=[{k: None if v != v else v for k, v in row.items()} for row in rows],
    )
    click.echo(f"processed frames {rows[0]['frame']}..{rows[-1]['frame']}")


def _mse(image, reference):
    return float(((image.data - reference.data.to(image.data.dtype)) ** 2).mean())


@cli.command("render-sphere")
@click.option("--env", "env_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option(
    "--mode",
    type=click.Choice(["importance", "uniform", "both", "mirror"]),
    default="both",
    show_default=True,
    help="Sampling mode, or a perfect mirror without a reference.",
)
@click.option("--spp", type=click.IntRange(min=1))
@click.option("--size", type=click.IntRange(min=1))
@click.option("--reference-spp", type=click.IntRange(min=1))
@click.option("--seed", type=int)
@click.pass_obj
@handle_errors
def cmd_render_sphere(config, env_path, out_dir, mode, spp, size, reference_spp, seed):
    """Render glossy spheres lit by an HDR panorama and report MSE against a reference."""
    seed = config.SEED if seed is None else seed
    spp = spp or config.EVAL_SPP
    size = size or config.SPHERE_SIZE
    reference_spp = reference_spp or config.REFERENCE_SPP
    env = read_envmap(env_path)
    out = Path(out_dir)
    if mode == "mirror":
        out.mkdir(parents=True, exist_ok=True)
        write_map(out / "sphere_mirror.pfm", render_mirror_sphere(env, size))
        write_sidecar(
            out / "sidecar.json",
            "render-sphere",
            seed,
            {"mode": mode, "size": size},
            inputs={"env": env_path},
            outputs=["sphere_mirror.pfm"],
        )
        click.echo(f"mirror sphere written to {out}")
        return

    brdf = MicrofacetBrdf(config.ALBEDO, config.ROUGHNESS)
    reference_spec = SphereRenderSpec(size=size, spp=reference_spp, seed=seed + 1)
    reference = render_sphere(env, brdf, reference_spec)

    out.mkdir(parents=True, exist_ok=True)
    modes = ["importance", "uniform"] if mode == "both" else [mode]
    rows = []
    for name in modes:
        image = render_sphere(env, brdf, SphereRenderSpec(size=size, spp=spp, mode=name, seed=seed))
        write_map(out / f"sphere_{name}.pfm", image)
        rows.append({"mode": name, "spp": spp, "mse": _mse(image, reference)})
    write_table(out / "report.csv", rows)
    write_sidecar(
        out / "sidecar.json",
        "render-sphere",
        seed,
        {
            "mode": mode,
            "spp": spp,
            "size": size,
            "reference": sphere_spec_schema.dump(reference_spec),
        },
        inputs={"env": env_path},
        outputs=[f"sphere_{name}.pfm" for name in modes] + ["report.csv"],
    )
    for row in rows:
        click.echo(f"{row['mode']}: mse {row['mse']:.6e}")


def random_volume(size, seed):
    """Random float64 grid on ``[-1, 1]^3`` with opacities away from 0 and 1."""
    generator = torch.Generator().manual_seed(seed)
    config = VolumeConfig((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), (size, size, size))
    shape = config.shape

    def uniform(*dims, lo=0.0, hi=1.0):
        return lo + (hi - lo) * torch.rand(*dims, generator=generator, dtype=torch.float64)

    s = torch.randn(*shape, 3, generator=generator, dtype=torch.float64)
    return SglvGrid(
        config,
        c=uniform(*shape, 3),
        alpha=uniform(*shape, lo=0.05, hi=0.95),
        w=uniform(*shape, 3),
        lam=uniform(*shape, lo=0.0, hi=5.0),
        s=s / s.norm(dim=-1, keepdim=True),
    )


def random_target(height, seed):
    generator = torch.Generator().manual_seed(seed)
    data = 2.0 * torch.rand(height, 2 * height, 3, generator=generator, dtype=torch.float64)
    return EquirectMap(data, "hdr")


@cli.command("gradcheck")
@click.option("--volumes", type=click.IntRange(min=1))
@click.option("--size", type=click.IntRange(min=2))
@click.option("--eps", type=click.FloatRange(min=0, min_open=True))
@click.option("--height", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--tolerance", type=click.FloatRange(min=0, min_open=True))
@click.option("--seed", type=int)
@click.pass_obj
@handle_errors
def cmd_gradcheck(config, volumes, size, eps, height, tolerance, seed):
    """Compare autograd gradients with central differences on random volumes."""
    seed = config.SEED if seed is None else seed
    volumes = volumes or config.GRADCHECK_VOLUMES
    size = size or config.GRADCHECK_SIZE
    eps = eps or config.GRADCHECK_EPS
    tolerance = tolerance or config.GRADCHECK_TOLERANCE
    rng = np.random.default_rng(seed)
    worst = 0.0
    for index in range(volumes):
        sglv = random_volume(size, seed + index)
        probe = rng.uniform(-0.5, 0.5, size=3).tolist()
        target = random_target(height, seed + 1000 + index)
        error = grad_check(sglv, [(probe, target)], eps, config.MAX_SAMPLES)
        click.echo(f"volume {index}: max relative error {error:.3e}")
        worst = max(worst, error)
    click.echo(f"max relative error {worst:.3e} (tolerance {tolerance:.1e})")
    if not worst < tolerance:
        raise ValidationFailure(f"gradient check failed: {worst:.3e} >= {tolerance:.1e}")
