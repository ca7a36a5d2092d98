"""Checkpoint container: JSON manifest + little-endian raw parameter blob.

Layout: 8-byte magic, uint32 (LE) manifest length, UTF-8 JSON manifest, then
all parameter arrays concatenated in manifest order. Save/load roundtrips are
bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .network import Network

_MAGIC = b"MCNNCKPT"

_DTYPE_CODE = {"float32": "<f4", "float64": "<f8"}


def params_hash(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()[:16]


def save_network(net: Network, path, extras: dict | None = None) -> None:
    code = _DTYPE_CODE[net.dtype.name]
    manifest = {
        "layers": net.layers,
        "input_shape": list(net.input_shape),
        "dtype": net.dtype.name,
        "seed": net.seed,
        "class_count": net.class_count,
        "params": [{"name": k, "shape": list(net.params[k].shape)}
                   for k in net.param_order],
        "extras": extras or {},
    }
    blob = b"".join(np.ascontiguousarray(net.params[k]).astype(code).tobytes()
                    for k in net.param_order)
    head = json.dumps(manifest).encode()
    with open(str(path), "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(blob)


def load_network(path):
    """Returns (network, extras)."""
    with open(str(path), "rb") as f:
        if f.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a network checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(hlen).decode())
        blob = f.read()
    code = _DTYPE_CODE[manifest["dtype"]]
    itemsize = np.dtype(code).itemsize
    params = {}
    offset = 0
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype=code, count=n, offset=offset)
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(manifest["dtype"])
        offset += n * itemsize
    if offset != len(blob):
        raise ValueError(f"{path}: parameter blob size mismatch")
    net = Network(
        manifest["layers"],
        manifest["input_shape"],
        seed=manifest["seed"],
        dtype=manifest["dtype"],
        class_count=manifest["class_count"],
        params=params,
    )
    return net, manifest.get("extras", {})
