"""Self-describing binary container for named arrays.

Layout (little endian)::

    magic      8 bytes  b"SURFCKPT"
    version    u32
    header_len u64
    header     JSON, sorted keys; lists every array's name, dtype, shape, offset
    payload    raw array bytes, C order, in header order
    digest     sha256 of everything above

Writing the same header and arrays always produces the same bytes.
"""
import hashlib
import json
import os
from pathlib import Path
import struct

import numpy as np

from .errors import CheckpointCorruptError, IncompatibleCheckpointError

MAGIC = b"SURFCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


def encode(header: dict, arrays: dict) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        a = a if a.flags.c_contiguous else a.copy(order="C")
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({"meta": header, "arrays": entries}, sort_keys=True,
                      separators=(",", ":")).encode()
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode(data: bytes):
    """Return ``(header, arrays)``; raise on any structural or integrity problem."""
    if len(data) < _PREFIX.size + _DIGEST:
        raise CheckpointCorruptError("checkpoint is truncated")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptError("checkpoint digest mismatch (truncated or modified)")
    start = _PREFIX.size
    try:
        head = json.loads(body[start:start + head_len])
    except ValueError as exc:
        raise CheckpointCorruptError(f"unreadable checkpoint header: {exc}") from exc
    payload = body[start + head_len:]
    arrays = {}
    for e in head["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointCorruptError(f"array {e['name']} is truncated")
        a = np.frombuffer(raw, dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = a.reshape(tuple(e["shape"])).copy()
    return head["meta"], arrays


def write(path, header, arrays):
    """Atomically write a checkpoint file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(header, arrays))
    os.replace(tmp, path)


def read(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


def config_difference(expected: dict, found: dict):
    """First key whose value differs between two config records, or None."""
    for key in sorted(set(expected) | set(found)):
        if expected.get(key) != found.get(key):
            return key
    return None
