"""Time-tag files.

Binary: optional 16-byte header (``b"TTAG"``, u32 version, u64 count), then one
little-endian int64 per tag.  CSV: one decimal integer per line.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import TimeTagSeries, as_tag_array

MAGIC = b"TTAG"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def write_tags(path, tags, *, header: bool = True, fmt: str = "binary") -> None:
    arr = as_tag_array(tags)
    path = Path(path)
    if fmt == "csv":
        np.savetxt(path, arr, fmt="%d")
        return
    if fmt != "binary":
        raise ValueError(f"unknown tag format {fmt!r}")
    with open(path, "wb") as fh:
        if header:
            fh.write(_HEADER.pack(MAGIC, VERSION, arr.size))
        fh.write(arr.astype("<i8", copy=False).tobytes())


def read_tags(path, *, fmt: str | None = None, origin_note: str = "") -> TimeTagSeries:
    """Read a tag file; the format is sniffed from the suffix and header if not given."""
    path = Path(path)
    if fmt is None:
        fmt = "csv" if path.suffix.lower() in (".csv", ".txt") else "binary"
    note = origin_note or str(path)
    if fmt == "csv":
        arr = np.loadtxt(path, dtype=np.int64, ndmin=1)
        return TimeTagSeries(arr, note)
    raw = path.read_bytes()
    if raw[:4] == MAGIC:
        magic, version, count = _HEADER.unpack_from(raw)
        if version != VERSION:
            raise ValueError(f"unsupported tag file version {version}")
        body = raw[_HEADER.size :]
        if len(body) != 8 * count:
            raise ValueError(f"header announces {count} tags, file holds {len(body) // 8}")
    else:
        body = raw
        if len(body) % 8:
            raise ValueError("headerless tag file length is not a multiple of 8")
    return TimeTagSeries(np.frombuffer(body, dtype="<i8").astype(np.int64), note)


def write_cause_sidecar(path, rounds, causes, names=("qubit", "dark", "afterpulse")) -> None:
    """Per-tag cause CSV: ``round,cause``, one row per tag in tag order."""
    rounds = np.asarray(rounds, dtype=np.int64)
    causes = np.asarray(causes)
    if rounds.shape != causes.shape:
        raise ValueError("rounds and causes must have the same length")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("round,cause\n")
        for r, c in zip(rounds.tolist(), causes.tolist()):
            fh.write(f"{r},{names[c]}\n")
