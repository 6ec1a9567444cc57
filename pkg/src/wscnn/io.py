"""File formats: the WSCFS1 raster container, 16-bit PGM exports, CSV tables
and key=value manifests."""

from __future__ import annotations

import csv
import hashlib
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

RASTER_MAGIC = b"WSCFS1\n"


def write_rasters(path, maps: Sequence[np.ndarray], meta: Mapping[str, object] | None = None) -> None:
    """Write 2-D rasters as float32 plus a trailing key=value metadata block."""
    maps = [np.asarray(m) for m in maps]
    for i, m in enumerate(maps):
        if m.ndim != 2:
            raise DataError(f"raster {i} must be 2-D, got shape {m.shape}")
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(struct.pack("<I", len(maps)))
        for m in maps:
            fh.write(struct.pack("<II", *m.shape))
            fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
        for key, value in (meta or {}).items():
            key = str(key)
            if "=" in key or "\n" in key or "\n" in str(value):
                raise DataError(f"metadata entry {key!r} cannot be encoded")
            fh.write(f"{key}={value}\n".encode("utf-8"))


def read_rasters(path) -> tuple[list[np.ndarray], dict[str, str]]:
    blob = Path(path).read_bytes()
    if not blob.startswith(RASTER_MAGIC):
        raise DataError(f"{path}: not a WSCFS1 raster file")
    pos = len(RASTER_MAGIC)
    try:
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        maps = []
        for _ in range(count):
            h, w = struct.unpack_from("<II", blob, pos)
            pos += 8
            arr = np.frombuffer(blob, dtype="<f4", count=h * w, offset=pos)
            pos += 4 * h * w
            maps.append(arr.reshape(h, w).astype(np.float64))
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated raster file") from exc
    meta: dict[str, str] = {}
    for line in blob[pos:].decode("utf-8").splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}: malformed metadata line {line!r}")
        meta[key] = value
    return maps, meta


def write_image(path, image: np.ndarray, meta: Mapping[str, object] | None = None) -> None:
    write_rasters(path, [image], {"kind": "image", **(meta or {})})


def read_image(path) -> tuple[np.ndarray, dict[str, str]]:
    maps, meta = read_rasters(path)
    if len(maps) != 1:
        raise DataError(f"{path}: expected a single image, found {len(maps)} rasters")
    return maps[0], meta


def write_pgm(path, image: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """16-bit binary PGM, linearly mapping [lo, hi] (default: data range) to [0, 65535]."""
    img = np.nan_to_num(np.asarray(image, dtype=np.float64))
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    q = np.clip(np.round((img - lo) * scale), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(parts[4], dtype=dtype, count=w * h).reshape(h, w)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else _fmt(v) for v in row])


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_keyvalue(path, entries: Mapping[str, object]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in entries.items():
            fh.write(f"{key}={value}\n")


def read_keyvalue(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}:{n}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
