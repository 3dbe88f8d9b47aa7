"""Binary checkpoint format for named parameter arrays.

Layout:

    bytes 0..8    magic ``TECCKPT1``
    bytes 8..16   u64 little-endian length of the metadata document
    metadata      UTF-8 JSON: format version, config snapshot, step
                  counter, optional RNG state, and an array index with
                  per-array name/dtype/shape/offset/nbytes. Offsets are
                  relative to the start of the data section.
    data          raw little-endian arrays, in index order

Arrays may be stored as ``f64`` (default, round-trips training state
bitwise) or ``f32`` (compact export; values are rounded once on save
and re-promoted to float64 on load).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IngestionError, ParameterError

MAGIC = b"TECCKPT1"
FORMAT_VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8"}


@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray]  # always float64 after load
    step: int = 0
    rng_state: dict | None = None
    dtype: str = "f64"


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict,
                    step: int = 0, rng_state: dict | None = None,
                    dtype: str = "f64") -> None:
    if dtype not in _DTYPES:
        raise ParameterError(f"checkpoint dtype must be f32 or f64, got {dtype}")
    np_dtype = np.dtype(_DTYPES[dtype])
    index = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np_dtype)
        blob = arr.tobytes()
        index.append({"name": name, "dtype": dtype,
                      "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    meta = {"format_version": FORMAT_VERSION, "config": config,
            "step": int(step), "rng_state": rng_state, "arrays": index}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 8 or raw[:len(MAGIC)] != MAGIC:
        raise IngestionError(f"{path} is not a checkpoint (bad magic)")
    (meta_len,) = struct.unpack("<Q", raw[8:16])
    meta_end = 16 + meta_len
    if len(raw) < meta_end:
        raise IngestionError(f"{path} is truncated (metadata)")
    try:
        meta = json.loads(raw[16:meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IngestionError(f"{path} has corrupt metadata: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise IngestionError(
            f"{path}: unsupported format version {meta.get('format_version')}")
    data = raw[meta_end:]
    arrays = {}
    dtype = "f64"
    for entry in meta["arrays"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(data):
            raise IngestionError(f"{path} is truncated (array {entry['name']})")
        arr = np.frombuffer(data[lo:hi], dtype=_DTYPES[entry["dtype"]])
        arrays[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
        dtype = entry["dtype"]
    return Checkpoint(config=meta["config"], arrays=arrays,
                      step=meta.get("step", 0), rng_state=meta.get("rng_state"),
                      dtype=dtype)
