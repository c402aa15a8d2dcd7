"""Binary checkpoint format.

Layout::

    b"FWEB" | u32 version | u64 header length | JSON header | tensor bytes

The header holds the model config and a tensor table of
``{name, shape, dtype, offset, nbytes}``; tensors are raw little-endian
arrays concatenated in table order. The header is fully validated before
any tensor is built, so a bad file never yields a half-loaded model.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import EnsembleTransformer, ModelConfig

MAGIC = b"FWEB"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


def to_bytes(model: EnsembleTransformer, extra: dict | None = None) -> bytes:
    table, chunks, offset = [], [], 0
    for name, p in model.parameters().items():
        arr = np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"config": model.config.to_dict(), "dtype": np.dtype(model.dtype).str,
              "tensors": table, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def save(model: EnsembleTransformer, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(model, extra))


def read_header(blob: bytes) -> tuple[dict, int]:
    if len(blob) < _PREFIX.size:
        raise DataError("checkpoint truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise DataError("checkpoint truncated inside header")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header: {exc}") from None
    return header, start


def from_bytes(blob: bytes) -> tuple[EnsembleTransformer, dict]:
    header, start = read_header(blob)
    tensors = {}
    for entry in header["tensors"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise DataError(f"{entry['name']}: unsupported element type {entry['dtype']}")
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(blob):
            raise DataError(f"{entry['name']}: tensor data truncated")
        arr = np.frombuffer(blob[lo:hi], dtype=np.dtype(entry["dtype"]))
        if arr.size != int(np.prod(entry["shape"])):
            raise DataError(f"{entry['name']}: byte count does not match shape")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype)
    config = ModelConfig(**header["config"])
    model = EnsembleTransformer(config, dtype=np.dtype(header["dtype"]))
    expected = set(model.parameters())
    missing = expected - {n for n in tensors if not n.split(".")[-1].startswith("lora_")}
    if missing:
        raise DataError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    for name, arr in tensors.items():
        try:
            model.set_parameter(name, arr)
        except KeyError as exc:
            raise DataError(str(exc)) from None
    return model, header.get("extra", {})


def load(path: str | Path) -> EnsembleTransformer:
    return from_bytes(Path(path).read_bytes())[0]
