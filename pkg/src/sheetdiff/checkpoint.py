"""Checkpoint files: magic, length-prefixed JSON header, then raw float32 blobs.

Layout::

    b"SDCK" | u32 header_len | header JSON (UTF-8) | blobs

The header holds ``format_version``, the model config, ``head_specs`` and a
parameter directory ``name -> {"shape": [...], "offset": int}`` with offsets
relative to the start of the blob section. Blobs are little-endian float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import GptConfig, GptModel, build_model
from .tensor import Tensor

MAGIC = b"SDCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointParseError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class MissingParameterError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class EncoderMismatchError(CheckpointError):
    pass


def save_checkpoint(model: GptModel, path) -> None:
    directory = {}
    blobs = []
    offset = 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        directory[name] = {"shape": list(p.shape), "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "head_specs": [[d, k] for d, k in model.head_specs],
        "parameters": directory,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(head)) + head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, expect_encoder: str | None = None) -> GptModel:
    """Read a checkpoint written by :func:`save_checkpoint`.

    ``expect_encoder`` rejects checkpoints pretrained with a different input
    encoder (e.g. an EMB checkpoint handed to an FC fine-tuning run).
    """
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointParseError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    if len(blob) < 8 + hlen:
        raise CheckpointParseError(f"{path}: header truncated")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
        version = header["format_version"]
        config = GptConfig(**header["config"])
        head_specs = [(str(d), int(k)) for d, k in header["head_specs"]]
        directory = header["parameters"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointParseError(f"{path}: corrupt header ({exc})") from None
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format_version {version}, expected {FORMAT_VERSION}")
    if expect_encoder is not None and config.encoder_kind != expect_encoder.upper():
        raise EncoderMismatchError(
            f"{path}: checkpoint uses the {config.encoder_kind} encoder, {expect_encoder.upper()} requested"
        )

    template = build_model(config, head_specs)
    data = blob[8 + hlen :]
    params = {}
    for name, ref in template.params.items():
        entry = directory.get(name)
        if entry is None:
            raise MissingParameterError(f"{path}: parameter {name!r} missing")
        shape = tuple(entry["shape"])
        if shape != ref.shape:
            raise ShapeMismatchError(f"{path}: {name} has shape {shape}, expected {ref.shape}")
        count = int(np.prod(shape))
        start = int(entry["offset"])
        if start < 0 or start + 4 * count > len(data):
            raise CheckpointParseError(f"{path}: blob for {name} out of bounds")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(shape)
        params[name] = Tensor(arr.astype(np.float32), name=name)
    return GptModel(config, head_specs, params)
