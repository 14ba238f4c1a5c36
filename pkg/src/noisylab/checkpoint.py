"""Binary archive of named float32 tensors ("NLAB" format).

Layout, all integers little-endian:
    magic "NLAB" | version u32 | entry count u32 |
    per entry: name (u32 length + utf-8) | rank u32 | extents u32... |
               payload as raw little-endian float32

Strings (architecture descriptors) and bit-cast integers (RNG seeds) are
stored as float32 payloads via the helpers below so everything fits one
container.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"NLAB"
VERSION = 1


def write_archive(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", raw.ndim))
            if raw.ndim:
                f.write(struct.pack(f"<{raw.ndim}I", *raw.shape))
            f.write(raw.tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated archive: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def read_archive(path) -> dict[str, np.ndarray]:
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise FormatError(f"{path}: bad magic, not an NLAB archive")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported archive version {version}")
        for i in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "extents")) if rank else ()
            n_items = int(np.prod(shape)) if rank else 1
            payload = _read_exact(f, 4 * n_items, f"payload of '{name}'")
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
            out[name] = arr
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after {count} entries")
    return out


# -- payload helpers ---------------------------------------------------------

def encode_text(s: str) -> np.ndarray:
    """Unicode codepoints as float32 (all codepoints are < 2^24, so exact)."""
    return np.array([ord(c) for c in s], dtype=np.float32)


def decode_text(arr: np.ndarray) -> str:
    return "".join(chr(int(round(v))) for v in np.asarray(arr).ravel())


def encode_u64(value: int) -> np.ndarray:
    """Bit-cast a u64 into two float32 words (bit-exact through the archive)."""
    return np.frombuffer(struct.pack("<Q", int(value) & (2 ** 64 - 1)), dtype="<f4").copy()


def decode_u64(arr: np.ndarray) -> int:
    raw = np.ascontiguousarray(np.asarray(arr, dtype="<f4")).tobytes()
    return struct.unpack("<Q", raw)[0]
