"""Self-describing binary containers for encoder and model checkpoints.

Layout (little-endian)::

    magic            9 bytes, e.g. b"RATD-ENC1"
    header_len       uint32
    header           UTF-8 JSON: metadata plus an ordered tensor table
                     [{"name", "dtype", "shape"}, ...]
    payload          raw tensor bytes, concatenated in table order
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FingerprintMismatch, MissingArtifactError

MAGIC_LEN = 9


def write_container(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    assert len(magic) == MAGIC_LEN
    table, chunks = [], []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        chunks.append(arr.astype(dt, copy=False).tobytes())
    header = json.dumps({"meta": meta, "tensors": table}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    buf = path.read_bytes()
    if buf[:MAGIC_LEN] != magic:
        raise FingerprintMismatch(f"{path}: bad magic {buf[:MAGIC_LEN]!r}, expected {magic!r}")
    (hlen,) = struct.unpack_from("<I", buf, MAGIC_LEN)
    start = MAGIC_LEN + 4
    header = json.loads(buf[start:start + hlen])
    offset = start + hlen
    arrays = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
        offset += count * dt.itemsize
    return header["meta"], arrays


def hash_arrays(arrays: dict[str, np.ndarray], salt: str = "") -> str:
    h = hashlib.sha256(salt.encode())
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def state_to_numpy(module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
