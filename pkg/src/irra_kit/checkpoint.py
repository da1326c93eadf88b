"""Shared checkpoint container: named float64 arrays in one binary file.

Layout: 8-byte little-endian header length, UTF-8 JSON header mapping each
array name to {"shape": [...], "offset": n}, then the raw row-major
float64 buffers. Offsets are relative to the end of the header. Names are
written sorted, so identical arrays produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError
from .tensor import Tensor

_LEN_FMT = "<Q"


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    header: dict[str, dict] = {}
    offset = 0
    names = sorted(arrays)
    for name in names:
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float64))
        header[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.nbytes
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack(_LEN_FMT, len(blob)))
        f.write(blob)
        for name in names:
            f.write(np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float64)).tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ParseError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < struct.calcsize(_LEN_FMT):
        raise ParseError(f"{path} is not a checkpoint container (too short)")
    (hlen,) = struct.unpack_from(_LEN_FMT, raw, 0)
    start = struct.calcsize(_LEN_FMT)
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"{path} has a malformed header: {e}") from e
    data_start = start + hlen
    out: dict[str, np.ndarray] = {}
    for name, meta in header.items():
        shape = tuple(int(s) for s in meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        begin = data_start + int(meta["offset"])
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=begin).reshape(shape)
        out[name] = arr.copy()
    return out


def save_params(path, params: dict[str, Tensor]) -> None:
    save_arrays(path, {name: p.data for name, p in params.items()})


def load_params(path) -> dict[str, Tensor]:
    return {name: Tensor(arr, requires_grad=True) for name, arr in load_arrays(path).items()}
