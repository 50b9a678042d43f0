"""On-disk formats: array payload files and key=value manifests.

An array file is an ASCII header followed by a binary payload::

    DC3ARRAYS 1 <kind>
    <name> <d1>,<d2>,...        (one line per array; "-" for a scalar)
    END
    <little-endian float64 values of every array, in header order>

Integer arrays (permutations, indices) are stored as float64, which is exact
for any index that fits in memory.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = "DC3ARRAYS"
VERSION = 1


def write_arrays(path, arrays: dict, kind: str = "arrays") -> None:
    lines = [f"{MAGIC} {VERSION} {kind}"]
    payload = []
    for name, arr in arrays.items():
        if any(c.isspace() for c in name) or not name:
            raise FormatError(f"invalid array name {name!r}")
        arr = np.asarray(arr, dtype=np.float64)
        dims = ",".join(str(d) for d in arr.shape) if arr.ndim else "-"
        lines.append(f"{name} {dims}")
        payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("ascii")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)
    os.replace(tmp, path)


def read_arrays(path, kind: str | None = None) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    pos = 0
    header = []
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: truncated header")
        line = raw[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        if line == "END":
            break
        header.append(line)
    if not header:
        raise FormatError(f"{path}: empty header")
    first = header[0].split()
    if len(first) != 3 or first[0] != MAGIC:
        raise FormatError(f"{path}: not an array file")
    if int(first[1]) != VERSION:
        raise FormatError(f"{path}: unsupported version {first[1]}")
    if kind is not None and first[2] != kind:
        raise FormatError(f"{path}: expected kind {kind!r}, found {first[2]!r}")
    out = {}
    for line in header[1:]:
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}: bad header line {line!r}")
        name, dims = parts
        shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload for array {name!r}")
        out[name] = np.frombuffer(raw[pos:pos + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after payload")
    return out


def write_manifest(path, entries: dict) -> None:
    lines = []
    for key, value in entries.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
