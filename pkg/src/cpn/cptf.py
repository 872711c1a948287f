"""CPTF: the little-endian binary container used for every persisted tensor.

Layout::

    b"CPTF" | version u8 (=1) | dtype u8 (0=f32, 1=f64) | ndim u8 |
    ndim x u32 extents | row-major payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CPTF"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CptfError(ValueError):
    pass


def to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise CptfError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise CptfError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, _CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise CptfError("not a CPTF payload (bad magic)")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise CptfError(f"unsupported CPTF version {version}")
    if code not in _DTYPES:
        raise CptfError(f"unknown dtype code {code}")
    off = 7 + 4 * ndim
    if len(buf) < off:
        raise CptfError("truncated header")
    shape = struct.unpack_from(f"<{ndim}I", buf, 7)
    dt = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != expected:
        raise CptfError(f"payload length {len(buf) - off} does not match shape {shape}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def save(arr: np.ndarray, path) -> None:
    Path(path).write_bytes(to_bytes(arr))


def load(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())


def save_bundle(arrays: dict[str, np.ndarray], directory) -> None:
    """Write one CPTF file per array plus a ``weights.idx`` name -> file index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(arrays):
        fname = name.replace("/", "_") + ".cptf"
        save(arrays[name], directory / fname)
        lines.append(f"{name}\t{fname}")
    (directory / "weights.idx").write_text("\n".join(lines) + "\n")


def load_bundle(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    index = directory / "weights.idx"
    if not index.exists():
        raise CptfError(f"missing index {index}")
    out = {}
    for line in index.read_text().splitlines():
        if line.strip():
            name, fname = line.split("\t")
            out[name] = load(directory / fname)
    return out
