"""Parameter container format.

Layout of a ``.kino`` file:

    bytes 0..4    magic b"KINO1"
    bytes 5..12   uint64 little-endian: byte length of the JSON manifest
    manifest      UTF-8 JSON: {"entries": [{"name", "shape", "dtype",
                  "offset", "nbytes"}, ...]} listing entries in order
    blob          raw little-endian values, concatenated per the manifest

``dtype`` is "<f4" or "<f8". Offsets are relative to the start of the blob.
"""

import json
import struct

import numpy as np

from .tensor import ContractError

MAGIC = b"KINO1"

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def save_params(path, params):
    """Write named parameters (in iteration order) to ``path``."""
    entries = []
    chunks = []
    offset = 0
    for p in params:
        raw = np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<"))
        buf = raw.tobytes()
        entries.append({
            "name": p.name,
            "shape": list(p.data.shape),
            "dtype": raw.dtype.str,
            "offset": offset,
            "nbytes": len(buf),
        })
        chunks.append(buf)
        offset += len(buf)
    manifest = json.dumps({"entries": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for buf in chunks:
            fh.write(buf)


def load_params(path):
    """Read a container back as an ordered dict name -> numpy array."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ContractError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        blob = fh.read()
    out = {}
    for entry in manifest["entries"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ContractError(f"unsupported dtype {entry['dtype']!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(blob[start:start + nbytes], dtype=dtype)
        out[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return out


def restore_params(path, params):
    """Assign values from a container into matching live parameters."""
    values = load_params(path)
    params = list(params)
    for p in params:
        if p.name not in values:
            raise ContractError(f"container is missing parameter {p.name!r}")
        p.assign(values[p.name].astype(p.data.dtype, copy=False))
    return params
