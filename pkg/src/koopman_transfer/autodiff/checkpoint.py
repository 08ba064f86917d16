"""Versioned checkpoint container.

Layout: the magic ``KTLCKPT1``, a little-endian u64 manifest length, a JSON
manifest (``name -> {shape, offset}`` plus free-form ``meta``) and a blob of
little-endian float64 values.  Names may carry a namespace prefix such as
``TRANSFORMER/`` or ``PCA1/``.
"""

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"KTLCKPT1"


def checkpoint_bytes(tensors, meta=None):
    names = sorted(tensors)
    entries, offset, blobs = {}, 0, []
    for name in names:
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.size
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(blobs)


def save_checkpoint(path, tensors, meta=None):
    """Write atomically so a crash never leaves a half-written checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(tensors, meta))
    os.replace(tmp, path)


def parse_checkpoint(raw):
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError("not a KTLCKPT1 checkpoint")
    (n,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    manifest = json.loads(raw[start : start + n].decode())
    blob = np.frombuffer(raw[start + n :], dtype="<f8")
    tensors = {}
    for name, entry in manifest["tensors"].items():
        size = int(np.prod(entry["shape"], dtype=np.int64))
        tensors[name] = blob[entry["offset"] : entry["offset"] + size].reshape(entry["shape"]).astype(np.float64)
    return tensors, manifest["meta"]


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())


def state_hash(tensors, meta=None):
    return hashlib.sha256(checkpoint_bytes(tensors, meta)).hexdigest()


def namespaced(prefix, tensors):
    return {f"{prefix}/{k}": v for k, v in tensors.items()}


def strip_namespace(prefix, tensors):
    head = prefix + "/"
    return {k[len(head) :]: v for k, v in tensors.items() if k.startswith(head)}
