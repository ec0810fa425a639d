"""Checkpoint format: text header plus contiguous float32 payload.

Layout: 8-byte magic ``PVDCKPT1``, an 8-byte little-endian header length,
a UTF-8 JSON header (format version, network config, class names, training
metadata, per-array manifest with name/shape/offset), then the payload of
little-endian float32 arrays in manifest order.  Offsets are element
counts into the payload and must tile it exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import Detector, NetworkConfig

MAGIC = b"PVDCKPT1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def _model_arrays(model: Detector):
    for name, p in model.named_parameters():
        yield name, p.data
    for name, b in model.named_buffers():
        yield f"buffer:{name}", b


def save_checkpoint(model: Detector, path: Path, metadata: dict | None = None) -> None:
    arrays = list(_model_arrays(model))
    manifest = []
    offset = 0
    for name, arr in arrays:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "format_version": FORMAT_VERSION,
        "network": model.config.to_dict(),
        "class_names": list(model.config.class_names),
        "metadata": metadata or {},
        "payload_elements": offset,
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_header(path: Path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        try:
            header = json.loads(f.read(hlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"{path}: unreadable header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {header.get('format_version')} "
            f"(expected {FORMAT_VERSION})")
    return header


def load_checkpoint(path: Path) -> tuple[Detector, dict]:
    """Rebuild a model from a checkpoint; returns (model, metadata)."""
    path = Path(path)
    header = read_header(path)
    config = NetworkConfig.from_dict(header["network"])
    model = Detector(config, seed=0)
    data = path.read_bytes()
    (hlen,) = struct.unpack("<Q", data[8:16])
    raw = data[16 + hlen:]
    flat = np.frombuffer(raw, dtype="<f4")
    manifest = header["arrays"]
    expected = header["payload_elements"]
    ends = [m["offset"] + int(np.prod(m["shape"])) for m in manifest]
    if sorted(m["offset"] for m in manifest) != [0] + sorted(ends)[:-1] \
            or (manifest and max(ends) != expected):
        raise CheckpointFormatError(f"{path}: manifest does not tile the payload")
    targets = dict(_model_arrays(model))
    if set(targets) != {m["name"] for m in manifest}:
        missing = set(targets) ^ {m["name"] for m in manifest}
        raise CheckpointFormatError(f"{path}: array name mismatch: {sorted(missing)}")
    for m in manifest:
        size = int(np.prod(m["shape"]))
        chunk = flat[m["offset"]:m["offset"] + size]
        if chunk.size < size:
            raise CheckpointTruncatedError(
                f"{path}: payload truncated at array {m['name']!r}")
        arr = targets[m["name"]]
        if list(arr.shape) != m["shape"]:
            raise CheckpointFormatError(
                f"{path}: array {m['name']!r} shape {m['shape']} != model {list(arr.shape)}")
        arr[...] = chunk.reshape(m["shape"]).astype(arr.dtype)
    return model, header["metadata"]
