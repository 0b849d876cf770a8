"""File formats: PGM (P5) and raw + JSON sidecar masks, distance fields, CSV.

Every writer goes through :func:`atomic_write` so that a failed run never
leaves a partial file behind.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .grid import DistanceField, GridGeometry, GridSet


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    """RFC-4180 style CSV with LF line endings and ``repr`` floats."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer, np.bool_)):
        return int(v)
    return v


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer, np.bool_)):
        return int(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _header(geometry: GridGeometry, dtype: str) -> dict:
    return {
        "dims": list(geometry.dims),
        "spacing": geometry.spacing,
        "origin": list(geometry.origin),
        "axis_order": "C (last axis fastest)",
        "dtype": dtype,
    }


# -- 2D masks as PGM ----------------------------------------------------------


def pgm_bytes(E: GridSet) -> bytes:
    if E.geometry.ndim != 2:
        raise ValueError("PGM holds 2D masks only")
    rows, cols = E.geometry.dims
    head = f"P5\n{cols} {rows}\n255\n".encode("ascii")
    return head + (E.mask.astype(np.uint8) * 255).tobytes()


def write_pgm(path, E: GridSet) -> None:
    """Binary PGM: first grid axis = image rows, 255 = inside."""
    atomic_write(path, pgm_bytes(E))


def read_pgm(path, spacing: float = 1.0, origin=None) -> GridSet:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval separated by whitespace/comments
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    cols, rows, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM is not supported")
    pos += 1
    pix = np.frombuffer(data, dtype=np.uint8, count=rows * cols, offset=pos)
    mask = pix.reshape(rows, cols) > maxval // 2
    return GridSet(GridGeometry((rows, cols), spacing, origin), mask)


# -- raw arrays with JSON sidecar ----------------------------------------------


def write_raw_mask(path, E: GridSet) -> None:
    """``path`` gets uint8 cells (1 = inside); ``path + '.json'`` the header."""
    atomic_write(path, E.mask.astype(np.uint8).tobytes())
    atomic_write(str(path) + ".json", json_text(_header(E.geometry, "uint8")))


def _read_sidecar(path):
    meta = json.loads(Path(str(path) + ".json").read_text())
    geometry = GridGeometry(tuple(meta["dims"]), meta["spacing"], tuple(meta["origin"]))
    return geometry, meta


def read_raw_mask(path) -> GridSet:
    geometry, meta = _read_sidecar(path)
    if meta.get("dtype") != "uint8":
        raise ValueError(f"{path}: expected a uint8 mask")
    arr = np.fromfile(path, dtype=np.uint8)
    return GridSet(geometry, arr.reshape(geometry.dims) != 0)


def write_raw_field(path, d: DistanceField) -> None:
    """Little-endian float64 values with the same sidecar layout."""
    atomic_write(path, d.values.astype("<f8").tobytes())
    atomic_write(str(path) + ".json", json_text(_header(d.geometry, "<f8")))


def read_raw_field(path) -> DistanceField:
    geometry, meta = _read_sidecar(path)
    if meta.get("dtype") != "<f8":
        raise ValueError(f"{path}: expected little-endian float64 values")
    arr = np.fromfile(path, dtype="<f8")
    return DistanceField(geometry, arr.reshape(geometry.dims))


def distance_csv(d: DistanceField) -> str:
    nd = d.geometry.ndim
    header = ["i", "j", "k"][:nd] + ["value"]
    idx = np.indices(d.geometry.dims).reshape(nd, -1).T
    rows = (list(map(int, i)) + [float(v)] for i, v in zip(idx, d.values.reshape(-1)))
    return csv_text(header, rows)


def read_mask(path, spacing: float = 1.0) -> GridSet:
    """PGM for ``.pgm`` files, raw + sidecar otherwise."""
    if str(path).lower().endswith(".pgm"):
        return read_pgm(path, spacing)
    return read_raw_mask(path)


def write_mask(path, E: GridSet) -> None:
    if E.geometry.ndim == 2 and str(path).lower().endswith(".pgm"):
        write_pgm(path, E)
    else:
        write_raw_mask(path, E)
