"""Single-file tensor container: magic, header length, JSON header, float64 payload.

Layout::

    b"MECASA\\x00\\x01" | uint64 LE header length | UTF-8 JSON header | tensors

Tensors are little-endian float64, row-major, concatenated in the order the
header lists them. Checkpoints, feature caches and epoch stores all use it.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MECASA\x00\x01"
_LEN = struct.Struct("<Q")


class FormatError(ValueError):
    pass


def write_container(path, header, tensors):
    """Write ``tensors`` (iterable of (name, array)) with a JSON ``header``."""
    tensors = [(name, np.asarray(arr, dtype="<f8", order="C")) for name, arr in tensors]
    header = dict(header)
    header["tensors"] = [{"name": n, "shape": list(a.shape)} for n, a in tensors]
    header["dtype"] = "float64"
    header["byte_order"] = "little"
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(blob)))
        f.write(blob)
        for _, a in tensors:
            f.write(a.tobytes())
    os.replace(tmp, path)


def read_header(path):
    with open(path, "rb") as f:
        return _read_header(f, path)[0]


def _read_header(f, path):
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"{path}: not a mecasa container (bad magic)")
    raw = f.read(_LEN.size)
    if len(raw) != _LEN.size:
        raise FormatError(f"{path}: truncated header length")
    (n,) = _LEN.unpack(raw)
    blob = f.read(n)
    if len(blob) != n:
        raise FormatError(f"{path}: truncated header")
    return json.loads(blob.decode("utf-8")), len(MAGIC) + _LEN.size + n


def read_container(path):
    """Returns ``(header, {name: array})`` preserving the stored order."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {path}")
    with open(path, "rb") as f:
        header, _ = _read_header(f, path)
        payload = f.read()
    if header.get("dtype") != "float64" or header.get("byte_order") != "little":
        raise FormatError(f"{path}: unsupported payload encoding")
    specs = header.get("tensors", [])
    sizes = [int(np.prod(s["shape"], dtype=np.int64)) for s in specs]
    if sum(sizes) * 8 != len(payload):
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header declares {sum(sizes) * 8}")
    flat = np.frombuffer(payload, dtype="<f8")
    out, off = {}, 0
    for spec, n in zip(specs, sizes):
        out[spec["name"]] = flat[off : off + n].reshape(spec["shape"]).astype(np.float64)
        off += n
    return header, out


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {path}")
    return json.loads(path.read_text())
