"""AGOE embedding blocks, the AGOW named-section container and 16-bit PGM masks."""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

AGOE_MAGIC = b"AGOE"
AGOE_VERSION = 1
_AGOE_HEADER = struct.Struct("<4sIIII")

AGOW_MAGIC = b"AGOW"
AGOW_VERSION = 1


def embedding_to_bytes(arr) -> bytes:
    """Serialise a 2-D ``(rows, C)`` matrix or 3-D ``(rows, cols, C)`` map."""
    a = np.asarray(arr)
    if a.ndim == 2:
        rows, cols, ch = a.shape[0], 1, a.shape[1]
    elif a.ndim == 3:
        rows, cols, ch = a.shape
    else:
        raise ValueError(f"embedding must be 2-D or 3-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("embedding values must be finite")
    return _AGOE_HEADER.pack(AGOE_MAGIC, AGOE_VERSION, rows, cols, ch) + a.astype("<f4").tobytes()


def _parse_embedding(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if len(buf) - offset < _AGOE_HEADER.size:
        raise FormatError("AGOE header truncated", len(buf))
    magic, version, rows, cols, ch = _AGOE_HEADER.unpack_from(buf, offset)
    if magic != AGOE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {AGOE_MAGIC!r}", offset)
    if version != AGOE_VERSION:
        raise FormatError(f"unsupported AGOE version {version}", offset + 4)
    n = rows * cols * ch
    start = offset + _AGOE_HEADER.size
    if len(buf) - start < 4 * n:
        raise FormatError(f"AGOE payload truncated: need {4 * n} bytes", len(buf))
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=start).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise FormatError("AGOE payload contains non-finite values", start)
    return data.reshape(rows, cols, ch), start + 4 * n


def embedding_from_bytes(buf: bytes, as_map: bool = False) -> np.ndarray:
    arr, end = _parse_embedding(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after AGOE payload", end)
    if not as_map and arr.shape[1] == 1:
        return arr[:, 0, :]
    return arr


def write_embedding(arr, path) -> None:
    Path(path).write_bytes(embedding_to_bytes(arr))


def read_embedding(path, as_map: bool = False) -> np.ndarray:
    return embedding_from_bytes(Path(path).read_bytes(), as_map=as_map)


def write_sections(sections: dict[str, np.ndarray], path) -> None:
    parts = [AGOW_MAGIC, struct.pack("<II", AGOW_VERSION, len(sections))]
    for name, arr in sections.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(embedding_to_bytes(np.atleast_2d(arr)))
    Path(path).write_bytes(b"".join(parts))


def read_sections(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != AGOW_MAGIC:
        raise FormatError("not an AGOW container", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != AGOW_VERSION:
        raise FormatError(f"unsupported AGOW version {version}", 4)
    pos = 12
    out = {}
    for _ in range(count):
        if len(buf) - pos < 4:
            raise FormatError("section name truncated", pos)
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) - pos < nlen:
            raise FormatError("section name truncated", pos)
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        arr, pos = _parse_embedding(buf, pos)
        out[name] = arr[:, 0, :] if arr.shape[1] == 1 else arr
    if pos != len(buf):
        raise FormatError("trailing bytes after last section", pos)
    return out


# ---------------------------------------------------------------- PGM

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def mask_to_pgm(mask) -> bytes:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError("mask must be 2-D")
    h, w = m.shape
    return f"P5\n{w} {h}\n65535\n".encode("ascii") + m.astype(">u2").tobytes()


def mask_from_pgm(buf: bytes) -> np.ndarray:
    pos = 0
    tokens = []
    for _ in range(4):
        match = _PGM_TOKEN.match(buf, pos)
        if match is None:
            raise FormatError("PGM header truncated", pos)
        tokens.append(match.group(1))
        pos = match.end()
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})", 0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-integer PGM header field", pos) from None
    if maxval != 65535:
        raise FormatError(f"mask PGM must have maxval 65535, got {maxval}", pos)
    if w < 1 or h < 1:
        raise FormatError(f"invalid PGM size {w}x{h}", pos)
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    if len(buf) - pos != 2 * w * h:
        raise FormatError(f"PGM raster has {len(buf) - pos} bytes, expected {2 * w * h}", min(len(buf), pos))
    return np.frombuffer(buf, dtype=">u2", offset=pos).reshape(h, w).astype(np.uint16)


def write_mask(mask, path) -> None:
    Path(path).write_bytes(mask_to_pgm(mask))


def read_mask(path) -> np.ndarray:
    return mask_from_pgm(Path(path).read_bytes())
