"""File formats: PFM and PNG images, JSON sidecars, loss traces and pipeline state."""

import csv
import json
import logging
import pickle
from pathlib import Path

import numpy as np
import torch
from marshmallow import ValidationError
from PIL import Image

from sglv.core import DepthMap, EquirectMap, HdrImage
from sglv.errors import ContractError, InputError
from sglv.schemas import sidecar_schema
from sglv.temporal import TemporalState, VideoState
from sglv.volume import SglvGrid, VolumeConfig

logger = logging.getLogger(__name__)


def read_pfm(path):
    """Float image as (H, W) or (H, W, 3) float32, top row first."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            header = f.readline().strip()
            if header not in (b"PF", b"Pf"):
                raise InputError(f"{path}: not a PFM file")
            width, height = (int(v) for v in f.readline().split())
            scale = float(f.readline().strip())
            channels = 3 if header == b"PF" else 1
            dtype = "<f4" if scale < 0 else ">f4"
            data = np.frombuffer(f.read(), dtype=dtype, count=width * height * channels)
    except (OSError, ValueError) as err:
        raise InputError(f"{path}: unreadable PFM ({err})") from err
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_pfm(path, data):
    """Little-endian PFM, rows stored bottom-up."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim not in (2, 3) or (data.ndim == 3 and data.shape[-1] != 3):
        raise ContractError(f"PFM holds (H, W) or (H, W, 3) data, got {data.shape}")
    height, width = data.shape[:2]
    header = b"PF\n" if data.ndim == 3 else b"Pf\n"
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{width} {height}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def write_png(path, data):
    """8-bit preview of ``data`` clamped to [0, 1]."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[-1] == 1:
        data = data[..., 0]
    pixels = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def read_png(path):
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as err:
        raise InputError(f"{path}: unreadable PNG ({err})") from err


def _tensor(data):
    return data.detach().cpu().numpy() if torch.is_tensor(data) else np.asarray(data)


def write_map(path, env, preview=True):
    """PFM of ``env`` plus a PNG preview next to it."""
    path = Path(path)
    data = _tensor(env.data if hasattr(env, "data") else env)
    write_pfm(path, data)
    if preview:
        write_png(path.with_suffix(".png"), data)
    logger.debug("wrote %s", path)


def read_envmap(path, kind="hdr"):
    """Environment map from PFM; PNG files always load as LDR maps."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        data, kind = read_png(path), "ldr"
    else:
        data = read_pfm(path)
    try:
        return EquirectMap(torch.from_numpy(np.ascontiguousarray(data)), kind)
    except ContractError as err:
        raise InputError(f"{path}: {err}") from err


def read_image(path):
    try:
        return HdrImage(torch.from_numpy(np.ascontiguousarray(read_pfm(path))))
    except ContractError as err:
        raise InputError(f"{path}: {err}") from err


def read_depth(path):
    data = read_pfm(path)
    if data.ndim != 2:
        raise InputError(f"{path}: depth PFM must have one channel")
    return DepthMap(torch.from_numpy(np.ascontiguousarray(data)))


def read_json(path, schema):
    try:
        with open(path) as f:
            return schema.load(json.load(f))
    except OSError as err:
        raise InputError(f"{path}: {err}") from err
    except json.JSONDecodeError as err:
        raise InputError(f"{path}: invalid JSON ({err})") from err
    except ValidationError as err:
        raise InputError(f"{path}: {err.messages}") from err
    except ContractError as err:
        raise InputError(f"{path}: {err}") from err


def write_json(path, document, schema=None):
    if schema is not None:
        document = schema.dump(document)
    with open(path, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")


def write_sidecar(
    path, command, seed, options, inputs=None, outputs=None, schema=sidecar_schema, **extra
):
    """JSON record of how an output was produced; ``extra`` holds schema-specific fields."""
    document = {
        "command": command,
        "seed": seed,
        "options": options,
        "inputs": {k: str(v) for k, v in (inputs or {}).items()},
        "outputs": [str(v) for v in outputs or []],
        **extra,
    }
    errors = schema.validate(document)
    if errors:
        raise ContractError(f"invalid sidecar: {errors}")
    write_json(path, document)


def read_sidecar(path, schema=sidecar_schema):
    return read_json(path, schema)


def write_trace(path, trace):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "log_l2", "render", "total"])
        writer.writerows(trace)


def write_table(path, rows):
    """CSV from a list of dicts sharing their keys."""
    if not rows:
        raise ContractError("no rows to write")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def save_state(path, state):
    payload = {
        "index": state.temporal.index,
        "previous": state.temporal.previous.data,
        "depth": state.temporal.depth.data,
        "weight": state.temporal.weight.data,
        "predictions": [p.data for p in state.predictions or []],
        "has_predictions": state.predictions is not None,
    }
    if state.volume is not None:
        config = state.volume.config
        payload["volume"] = {
            "lo": list(config.lo),
            "hi": list(config.hi),
            "counts": list(config.counts),
            "origin": config.origin,
            "rotation": config.rotation,
            "stacked": state.volume.stacked().detach(),
        }
    torch.save(payload, path)
    logger.info("saved pipeline state after frame %d to %s", state.index, path)


def load_state(path):
    try:
        payload = torch.load(path, weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as err:
        raise InputError(f"{path}: unreadable pipeline state ({err})") from err
    temporal = TemporalState(
        previous=EquirectMap(payload["previous"], "hdr"),
        depth=EquirectMap(payload["depth"], "depth"),
        weight=EquirectMap(payload["weight"], "mask"),
        index=payload["index"],
    )
    volume = None
    if "volume" in payload:
        stored = payload["volume"]
        config = VolumeConfig(
            stored["lo"], stored["hi"], stored["counts"], stored["origin"], stored["rotation"]
        )
        volume = SglvGrid.from_stacked(config, stored["stacked"])
    predictions = None
    if payload["has_predictions"]:
        predictions = [EquirectMap(p, "hdr") for p in payload["predictions"]]
    return VideoState(temporal, volume, predictions)
