"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic "MVARCKPT"
    4 bytes   format version (uint32)
    8 bytes   metadata length in bytes (uint64)
    n bytes   UTF-8 JSON metadata; its "arrays" entry lists name, shape
              and byte offset (relative to the payload start) of every array
    ...       raw float32 arrays, back to back in directory order
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint, UnsupportedFormat

MAGIC = b"MVARCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    model_config: dict
    codebook: np.ndarray
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    train_config: dict = field(default_factory=dict)
    rng_state: str = ""
    extra: dict = field(default_factory=dict)
    version: int = VERSION

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [("codebook", self.codebook)]
        out += [(f"param/{k}", v) for k, v in self.params.items()]
        out += [(f"optim/{k}", v) for k, v in self.optimizer.items()]
        return out

    @property
    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    directory = []
    blobs = []
    offset = 0
    for name, arr in ckpt.arrays():
        a = np.ascontiguousarray(arr, dtype="<f4")
        directory.append({"name": name, "shape": list(a.shape), "offset": offset})
        blob = a.tobytes()
        blobs.append(blob)
        offset += len(blob)
    meta = {
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "dtype": "float32",
        "arrays": directory,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:8] != MAGIC:
        raise UnsupportedFormat(f"{path}: unsupported format (bad magic)")
    _, version, meta_len = _HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedFormat(f"{path}: unsupported format version {version}")
    start = _HEADER.size
    if start + meta_len > len(data):
        raise CorruptCheckpoint(f"{path}: metadata length {meta_len} exceeds file size")
    try:
        meta = json.loads(data[start:start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{path}: unreadable metadata ({e})") from None
    payload = start + meta_len
    arrays = {}
    for entry in meta["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        lo = payload + entry["offset"]
        hi = lo + 4 * count
        if hi > len(data):
            raise CorruptCheckpoint(f"{path}: array {entry['name']} truncated")
        arrays[entry["name"]] = np.frombuffer(data[lo:hi], dtype="<f4").reshape(shape).copy()
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    optim = {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")}
    if "codebook" not in arrays:
        raise CorruptCheckpoint(f"{path}: no codebook")
    return Checkpoint(
        model_config=meta["model_config"],
        codebook=arrays["codebook"],
        params=params,
        optimizer=optim,
        step=int(meta["step"]),
        train_config=meta.get("train_config", {}),
        rng_state=meta.get("rng_state", ""),
        extra=meta.get("extra", {}),
        version=version,
    )
