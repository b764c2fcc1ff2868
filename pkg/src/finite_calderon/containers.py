"""Versioned binary container used for DN maps, single layers, measurement sets and iterates.

Layout (little endian):
    8 bytes   magic  b"FCAL" + 4-byte kind tag
    u16       format version
    u32       header length L
    L bytes   header, JSON with sorted keys
    payload   raw row-major arrays, in the order listed under header["arrays"]
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContainerError

__all__ = ["write_container", "read_container", "KINDS", "FORMAT_VERSION"]

FORMAT_VERSION = 1
KINDS = {
    "dtn": b"DTN\x00",
    "single_layer": b"SLO\x00",
    "measurement": b"MSET",
    "iterates": b"ITER",
}
_ALLOWED_DTYPES = {"<c8", "<c16", "<f8", "<i8"}


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()


def write_container(path, kind: str, header: dict, arrays) -> None:
    """Write ``arrays`` (sequence of (name, ndarray)) after a JSON header."""
    tag = KINDS[kind]
    specs, blobs = [], []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<").str
        if dt not in _ALLOWED_DTYPES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for array {name!r}")
        specs.append({"name": name, "dtype": dt, "shape": list(arr.shape)})
        blobs.append(arr.astype(dt, copy=False).tobytes(order="C"))
    head = dict(header)
    head["arrays"] = specs
    hb = _canonical(head)
    with open(path, "wb") as fh:
        fh.write(b"FCAL" + tag)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def read_container(path, kind: str):
    """Return (header, {name: array}); raises ContainerError on any mismatch."""
    data = Path(path).read_bytes()
    if len(data) < 14 or data[:4] != b"FCAL":
        raise ContainerError(f"{path}: bad magic")
    if data[4:8] != KINDS[kind]:
        raise ContainerError(f"{path}: expected a {kind} container, found tag {data[4:8]!r}")
    version, hlen = struct.unpack("<HI", data[8:14])
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(data[14:14 + hlen])
    except ValueError as exc:
        raise ContainerError(f"{path}: corrupt header") from exc
    offset = 14 + hlen
    arrays = {}
    for spec in header.get("arrays", []):
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * dt.itemsize
        if offset + nbytes > len(data):
            raise ContainerError(f"{path}: truncated payload for {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(spec["shape"]).copy()
        offset += nbytes
    if offset != len(data):
        raise ContainerError(f"{path}: {len(data) - offset} trailing bytes")
    return header, arrays
