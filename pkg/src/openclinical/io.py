"""Parameter container: magic, header length, JSON header, raw little-endian float64 tensors."""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"OCPARAM1"


def save_params(path, params: dict, **header) -> None:
    """Write ``params`` (name -> array, order preserved) with extra JSON-able ``header`` fields."""
    head = dict(header)
    head["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in params.items()]
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_params(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a parameter container")
        (n,) = struct.unpack("<Q", fh.read(8))
        head = json.loads(fh.read(n).decode("utf-8"))
        params = {}
        for t in head["tensors"]:
            shape = tuple(t["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated tensor {t['name']}")
            params[t["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return params, head
