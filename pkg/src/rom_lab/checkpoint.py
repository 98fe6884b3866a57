"""Checkpoint persistence: header.json + raw little-endian f32 blob.

The header pins tensor names, shapes and byte offsets; everything is
validated against the embedded model config before a single tensor is
read, so a corrupt or tampered checkpoint fails fast.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import CheckpointVersionError, CorruptCheckpointError
from .model import ModelConfig, ModelParameters, parameter_shapes

FORMAT_VERSION = 1
HEADER_NAME = "header.json"
BLOB_NAME = "params.bin"


def save_checkpoint(params: ModelParameters, config: ModelConfig, path: str | Path) -> None:
    """Write a checkpoint directory; tensors are stored as f32 in canonical order."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, shape in parameter_shapes(config):
        data = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append(
            {"name": name, "shape": list(shape), "dtype": "f32", "byte_offset": offset}
        )
        blobs.append(data.tobytes())
        offset += len(blobs[-1])
    header = {"version": FORMAT_VERSION, "config": asdict(config), "tensors": entries}
    with open(path / HEADER_NAME, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(path / BLOB_NAME, "wb") as f:
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | Path) -> tuple[ModelParameters, ModelConfig]:
    """Read and validate a checkpoint; inverse of save_checkpoint."""
    path = Path(path)
    header_path = path / HEADER_NAME
    blob_path = path / BLOB_NAME
    if not header_path.exists():
        raise FileNotFoundError(f"no checkpoint header at {header_path}")
    try:
        with open(header_path, encoding="utf-8") as f:
            header = json.load(f)
    except json.JSONDecodeError as e:
        raise CorruptCheckpointError(f"{header_path}: header is not valid JSON: {e}") from e

    version = header.get("version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unknown checkpoint version {version!r}")
    try:
        config = ModelConfig(**header["config"])
    except (KeyError, TypeError) as e:
        raise CorruptCheckpointError(f"{header_path}: bad config block: {e}") from e

    expected = parameter_shapes(config)
    entries = header.get("tensors")
    if not isinstance(entries, list) or len(entries) != len(expected):
        raise CorruptCheckpointError(f"{header_path}: tensor list does not match config")

    # Validate every entry before touching the blob.
    offset = 0
    for entry, (name, shape) in zip(entries, expected):
        if entry.get("name") != name or tuple(entry.get("shape", ())) != shape:
            raise CorruptCheckpointError(
                f"{header_path}: tensor {entry.get('name')!r} does not match "
                f"expected {name} {shape}"
            )
        if entry.get("dtype") != "f32":
            raise CorruptCheckpointError(f"{header_path}: unsupported dtype {entry.get('dtype')!r}")
        if entry.get("byte_offset") != offset:
            raise CorruptCheckpointError(f"{header_path}: bad byte_offset for {name}")
        offset += int(np.prod(shape, dtype=np.int64)) * 4

    if not blob_path.exists():
        raise CorruptCheckpointError(f"missing blob {blob_path}")
    blob = blob_path.read_bytes()
    if len(blob) != offset:
        raise CorruptCheckpointError(
            f"{blob_path}: expected {offset} bytes, found {len(blob)}"
        )

    tensors: dict[str, np.ndarray] = {}
    for entry, (name, shape) in zip(entries, expected):
        start = entry["byte_offset"]
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        tensors[name] = arr.reshape(shape).astype(config.dtype)
    params = ModelParameters(tensors)
    params.validate(config)
    return params, config
