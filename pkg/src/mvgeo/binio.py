"""Versioned little-endian array container.

Layout::

    magic        4 bytes
    version      u32
    meta_len     u32, then meta_len bytes of UTF-8 ``key=value`` lines
    n_entries    u32
    table        per entry: u16 name length, name, u8 dtype code, u8 ndim,
                 ndim x u32 dims
    payload      the arrays, in table order, raw little-endian

Writes go through a temporary file and an atomic rename, so a reader never
sees a half-written file under its final name.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("|u1"), 3: np.dtype("<i8")}
CODES = {v: k for k, v in DTYPES.items()}


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype
    if dt == np.bool_ or dt == np.uint8:
        return 2
    if dt.kind == "f" and dt.itemsize in (4, 8):
        return 0 if dt.itemsize == 4 else 1
    if dt.kind in "iu":
        return 3
    raise TypeError(f"unsupported dtype {dt}")


def encode(magic: bytes, version: int, arrays: dict[str, np.ndarray], meta: dict[str, str]) -> bytes:
    meta_bytes = "".join(f"{k}={v}\n" for k, v in meta.items()).encode()
    head = [magic, struct.pack("<I", version), struct.pack("<I", len(meta_bytes)), meta_bytes,
            struct.pack("<I", len(arrays))]
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        nb = name.encode()
        head.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(head + payload)


def decode(buf: bytes, magic: bytes, version: int) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated file: wanted {n} bytes, {len(buf) - pos} left", pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    got = take(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    (ver,) = struct.unpack("<I", take(4))
    if ver != version:
        raise FormatError(f"unsupported format version {ver} (this reader handles {version})", 4)
    (mlen,) = struct.unpack("<I", take(4))
    meta = {}
    for line in take(mlen).decode().splitlines():
        k, _, v = line.partition("=")
        meta[k] = v
    (n,) = struct.unpack("<I", take(4))
    table = []
    for _ in range(n):
        at = pos
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}", at)
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        table.append((name, DTYPES[code], shape))
    arrays = {}
    for name, dt, shape in table:
        count = int(np.prod(shape))
        at = pos
        raw = take(count * dt.itemsize)
        try:
            arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        except ValueError as exc:  # pragma: no cover
            raise FormatError(str(exc), at) from None
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return arrays, meta


def write_file(path, magic: bytes, version: int, arrays: dict[str, np.ndarray],
               meta: dict[str, str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(magic, version, arrays, meta or {})
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_file(path, magic: bytes, version: int) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode(Path(path).read_bytes(), magic, version)
