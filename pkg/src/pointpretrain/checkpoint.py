"""Versioned binary checkpoint for model parameters and optimizer state.

Layout (little-endian):

    magic            4 bytes  b"CL3R"
    format version   uint32
    config length    uint32   followed by that many bytes of config JSON
    manifest length  uint32   followed by that many bytes of manifest JSON
    blob region      raw float32 arrays, tiled exactly by the manifest
    training step    uint64

The manifest is ``{"entries": [{name, shape, offset}, ...],
"optimizer_step": int | null}``; offsets are byte offsets into the blob
region and entries appear in serialization order.  Optimizer moments ride
along as entries named ``opt.m.<param>`` / ``opt.v.<param>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CL3R"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint file."""


@dataclass
class CheckpointData:
    config: dict
    params: dict[str, np.ndarray]
    opt_moments: dict[str, np.ndarray]
    opt_step: int | None
    step: int


def _array_of(value) -> np.ndarray:
    arr = value.data if hasattr(value, "data") and isinstance(value.data, np.ndarray) else value
    # tobytes() always emits C order; avoid ascontiguousarray, which would
    # promote 0-d scalars to 1-d and corrupt their manifest shapes
    return np.asarray(arr, dtype="<f4")


def save_checkpoint(path, config: dict, params: dict, step: int,
                    opt_moments: dict[str, np.ndarray] | None = None,
                    opt_step: int | None = None) -> None:
    """Write a checkpoint; parameters are stored as raw float32 blobs."""
    entries = []
    blobs = []
    offset = 0
    items = list(params.items())
    if opt_moments:
        items += list(opt_moments.items())
    for name, value in items:
        arr = _array_of(value)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"entries": entries, "optimizer_step": opt_step}
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", len(manifest_bytes)))
        fh.write(manifest_bytes)
        for blob in blobs:
            fh.write(blob)
        fh.write(struct.pack("<Q", step))
    tmp.replace(path)


def load_checkpoint(path) -> CheckpointData:
    """Read and validate a checkpoint; rejects before returning anything on
    bad magic, unknown version, or a manifest that does not tile the blobs."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 + 4 + 4:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if pos + clen > len(raw):
        raise CheckpointError(f"{path}: truncated config block")
    try:
        config = json.loads(raw[pos:pos + clen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: invalid config JSON ({e})") from e
    pos += clen
    if pos + 4 > len(raw):
        raise CheckpointError(f"{path}: truncated manifest length")
    (mlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if pos + mlen > len(raw):
        raise CheckpointError(f"{path}: truncated manifest block")
    try:
        manifest = json.loads(raw[pos:pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: invalid manifest JSON ({e})") from e
    pos += mlen

    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: missing step counter")
    blob = raw[pos:-8]
    (step,) = struct.unpack_from("<Q", raw, len(raw) - 8)

    entries = manifest.get("entries")
    if not isinstance(entries, list):
        raise CheckpointError(f"{path}: manifest has no entry list")
    expected = 0
    params: dict[str, np.ndarray] = {}
    opt_moments: dict[str, np.ndarray] = {}
    for entry in entries:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if offset != expected:
            raise CheckpointError(
                f"{path}: manifest does not tile the blob region at {name!r} "
                f"(offset {offset}, expected {expected})"
            )
        expected += nbytes
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: blob region too small for {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=max(1, int(np.prod(shape, dtype=np.int64))),
                            offset=offset).reshape(shape).copy()
        if name.startswith("opt.m.") or name.startswith("opt.v."):
            opt_moments[name] = arr
        else:
            params[name] = arr
    if expected != len(blob):
        raise CheckpointError(
            f"{path}: blob region holds {len(blob)} bytes but manifest covers {expected}"
        )
    return CheckpointData(config=config, params=params, opt_moments=opt_moments,
                          opt_step=manifest.get("optimizer_step"), step=int(step))
