"""Self-describing binary container for named arrays plus JSON metadata.

Layout (all integers little-endian):

    magic  b"TJDF"
    u32    format version (currently 1)
    u64    metadata length, then that many bytes of UTF-8 JSON
    u32    array count, then per array:
             u16 name length, name bytes (UTF-8)
             u8  dtype tag, u8 ndim, ndim * u64 dims
             raw array payload, C order, little-endian

Round-trips are bit-exact; arrays are written in sorted name order so the
same state always produces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"TJDF"
VERSION = 1

_DTYPE_TAGS = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1"}
_TAG_FOR_KIND = {("f", 4): 0, ("f", 8): 1, ("i", 8): 2, ("u", 1): 3}


class ContainerError(RuntimeError):
    pass


def _tag_for(arr: np.ndarray) -> int:
    tag = _TAG_FOR_KIND.get((arr.dtype.kind, arr.dtype.itemsize))
    if tag is None:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    return tag


def save_container(path, metadata: dict, arrays: dict[str, np.ndarray]) -> None:
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            tag = _tag_for(arr)
            arr = arr.astype(_DTYPE_TAGS[tag], copy=False)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes())


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise ContainerError("truncated container")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise ContainerError("bad magic; not a container file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    (meta_len,) = struct.unpack("<Q", take(8))
    metadata = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2))
        if tag not in _DTYPE_TAGS:
            raise ContainerError(f"unknown dtype tag {tag}")
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
        dtype = np.dtype(_DTYPE_TAGS[tag])
        n_bytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        arrays[name] = np.frombuffer(take(n_bytes), dtype=dtype).reshape(shape).copy()
    if off != len(raw):
        raise ContainerError("trailing bytes after last array")
    return metadata, arrays


def file_hash(path, digits: int = 12) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:digits]
