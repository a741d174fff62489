"""Self-describing checkpoint container.

Layout::

    b"DGLBCKPT"  magic
    uint64 LE    header length in bytes
    header       UTF-8 JSON: format, config, init_seed, meta, tensor table
    payload      raw little-endian tensor bytes at the offsets in the table

Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelState
from .tensor import Tensor

MAGIC = b"DGLBCKPT"
FORMAT = "digitlab.checkpoint/1"


def write_container(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    table = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        blob = a.tobytes()
        table.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    head = json.dumps({**header, "tensors": table}, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a digitlab checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for ent in header["tensors"]:
        start = base + ent["offset"]
        buf = raw[start:start + ent["nbytes"]]
        arrays[ent["name"]] = np.frombuffer(buf, dtype=np.dtype(ent["dtype"])).reshape(ent["shape"]).copy()
    return header, arrays


def save_state(state: ModelState, path: str | Path) -> None:
    header = {
        "format": FORMAT,
        "config": state.config.to_json(),
        "init_seed": state.init_seed,
        "meta": state.meta,
    }
    write_container(path, header, state.arrays())


def load_state(path: str | Path) -> ModelState:
    header, arrays = read_container(path)
    if header.get("format") != FORMAT:
        raise ValueError(f"{path}: unsupported format {header.get('format')!r}")
    cfg = ModelConfig.from_json(header["config"])
    params = {k: Tensor(v, requires_grad=True, dtype=v.dtype, name=k) for k, v in arrays.items()}
    return ModelState(cfg, params, int(header["init_seed"]), header.get("meta", {}))
