"""Little-endian binary container used by every on-disk artifact.

Layout (all integers little-endian):

    header (16 bytes): magic[8] | u32 version | u32 section_count
    section:           u16 name_len | name (utf-8) | u8 dtype_code | u8 ndim
                       | u64 * ndim shape | raw payload (C order)

dtype codes: 0 float32, 1 float64, 2 int32, 3 int64, 4 uint8, 5 uint64.

Each artifact kind has its own 8-byte magic (pyramids, spiral tables,
checkpoints, motion sequences, audio feature tracks). Scalars are stored as
0-dim sections. Strings are stored as uint8 sections holding utf-8 bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC_PYRAMID = b"SDGEOM01"
MAGIC_SPIRAL_TABLE = b"SDTABL01"
MAGIC_CHECKPOINT = b"SDCKPT01"
MAGIC_MOTION = b"SDMOTN01"
MAGIC_AUDIO = b"SDAUDF01"

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i4"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
    np.dtype("<u8"): 5,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ContainerError(ValueError):
    """Malformed or mismatched binary container."""


def write_container(path, magic: bytes, sections: dict, version: int = 1) -> None:
    """Serialize named arrays to ``path``. Section order follows dict order."""
    if len(magic) != 8:
        raise ContainerError("magic must be exactly 8 bytes")
    parts = [struct.pack("<8sII", magic, version, len(sections))]
    for name, arr in sections.items():
        arr = np.asarray(arr)
        little = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        # asarray keeps 0-dim sections 0-dim (ascontiguousarray would not)
        arr = np.asarray(arr, dtype=little, order="C")
        if arr.dtype not in _DTYPE_CODES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for section {name!r}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_container(path, expected_magic: bytes | None = None):
    """Read a container; returns (magic, version, {name: array})."""
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise ContainerError(f"{path}: truncated header")
    magic, version, count = struct.unpack_from("<8sII", blob, 0)
    if expected_magic is not None and magic != expected_magic:
        raise ContainerError(
            f"{path}: magic {magic!r} does not match expected {expected_magic!r}"
        )
    off = 16
    sections: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        if code not in _CODE_DTYPES:
            raise ContainerError(f"{path}: unknown dtype code {code} in section {name!r}")
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        raw = blob[off : off + nbytes]
        if len(raw) != nbytes:
            raise ContainerError(f"{path}: truncated payload in section {name!r}")
        off += nbytes
        sections[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return magic, version, sections


def pack_string(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).copy()


def unpack_string(arr: np.ndarray) -> str:
    return arr.tobytes().decode("utf-8")


def save_vertex_mask(path, indices) -> None:
    """Plaintext region mask: one vertex id per line."""
    ids = np.asarray(indices, dtype=np.int64).ravel()
    Path(path).write_text("".join(f"{i}\n" for i in ids))


def load_vertex_mask(path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    return np.array([int(ln) for ln in lines if ln], dtype=np.int64)
