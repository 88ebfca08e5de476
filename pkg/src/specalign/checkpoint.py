"""Model checkpoint container: JSON header plus a raw float64 parameter blob.

Layout (little-endian):

    [4 bytes]  uint32 header length H
    [H bytes]  UTF-8 JSON header with a caller-supplied metadata dict plus
               the ordered parameter names and shapes
    [..]       concatenated float64 parameter values in header order

Round-trips are bit-exact: the blob stores the raw 64-bit values.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_checkpoint(path, meta: dict, params: list[tuple[str, np.ndarray]]) -> None:
    header = {
        "meta": meta,
        "params": [{"name": name, "shape": list(arr.shape)} for name, arr in params],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(np.array(len(blob), dtype="<u4").tobytes())
            fh.write(blob)
            for _, arr in params:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    except OSError as exc:
        raise OSError(f"failed to write checkpoint {path}: {exc}") from exc


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"failed to read checkpoint {path}: {exc}") from exc
    hlen = int(np.frombuffer(raw[:4], dtype="<u4")[0])
    header = json.loads(raw[4:4 + hlen].decode())
    offset = 4 + hlen
    values: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        values[entry["name"]] = arr.reshape(shape).astype(np.float64)
        offset += 8 * count
    return header["meta"], values
