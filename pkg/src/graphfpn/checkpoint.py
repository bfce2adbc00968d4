"""Versioned binary checkpoints: magic "GFPN", u32 version, then sections.

Sections: canonical-JSON config echo, named parameter tensors (shape header
plus flat little-endian f64 payload), and the training RNG state as JSON.
save(load(x)) is byte-identical.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .numerics import ContractError

MAGIC = b"GFPN"
VERSION = 1


def _canonical_json(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def _pack_block(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ContractError("checkpoint truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def block(self) -> bytes:
        return self.take(self.u32())


def serialize(config: dict, params: "OrderedDict[str, np.ndarray]", rng_state: dict) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    out.append(_pack_block(_canonical_json(config)))
    out.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        out.append(_pack_block(name.encode()))
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f8").tobytes())
    out.append(_pack_block(_canonical_json(rng_state)))
    return b"".join(out)


def deserialize(blob: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]", dict]:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise ContractError("not a GFPN checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    config = json.loads(r.block().decode())
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(r.u32()):
        name = r.block().decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        params[name] = np.array(data, dtype=np.float64)  # own writable copy
    rng_state = json.loads(r.block().decode())
    if r.pos != len(blob):
        raise ContractError("trailing bytes after checkpoint payload")
    return config, params, rng_state


def save(path: str | Path, config: dict, params, rng_state: dict) -> None:
    Path(path).write_bytes(serialize(config, params, rng_state))


def load(path: str | Path) -> tuple[dict, "OrderedDict[str, np.ndarray]", dict]:
    return deserialize(Path(path).read_bytes())
