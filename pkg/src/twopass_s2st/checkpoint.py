"""Versioned, self-describing checkpoint container.

Layout::

    b"TPS2CKPT" | u32 format version | u64 header length | header JSON | tensor bytes

The header (UTF-8 JSON, sorted keys) carries the stage, step, seed, the fully
resolved config, JSON extras and an index of tensors (name, dtype, shape,
offset). Tensors are little-endian, C-ordered and stored in name order, so
writing the same content twice gives the same bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"TPS2CKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    stage: str
    step: int
    seed: int
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        index, blobs, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name])
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = arr.tobytes()
            index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {"stage": self.stage, "step": self.step, "seed": self.seed, "config": self.config,
                  "extras": self.extras, "tensors": index}
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[: len(MAGIC)] != MAGIC:
            raise DataError("not a checkpoint file (bad magic)")
        pos = len(MAGIC)
        version, hlen = struct.unpack_from("<IQ", data, pos)
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint format version {version}")
        pos += struct.calcsize("<IQ")
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
        base = pos + hlen
        tensors = {}
        for entry in header["tensors"]:
            start = base + entry["offset"]
            raw = data[start : start + entry["nbytes"]]
            tensors[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        return cls(header["stage"], header["step"], header["seed"], header["config"], tensors, header["extras"])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            return cls.from_bytes(Path(path).read_bytes())
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc

    def with_prefix(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}
