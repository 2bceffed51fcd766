"""Persistence: RFC-4180 CSV, the ``DFL1`` binary layout and JSON records.

Binary layout (all integers unsigned little-endian, all floats IEEE-754
little-endian float64)::

    offset  size  field
    0       4     magic  b"DFL1"
    4       4     kind   0 = path bundle, 1 = inverse flow
    8       8     n_paths
    16      8     n_times
    24      8     n_cols  (path bundle: 2 or 3 columns S, logZ[, Y];
                           inverse flow: number of x keys)
    32      8     flags   bit 0: factor column Y present
    40      8*n_times          time grid
    ...     8*n_cols           x keys (inverse flow only)
    ...     8*n_paths*n_times*n_cols  data, C order (path, time, column)
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError
from .inverse import InverseFlowField

FloatArray = NDArray[np.float64]

MAGIC = b"DFL1"
_HEADER = struct.Struct("<4sIQQQQ")
KIND_PATHS, KIND_INVERSE = 0, 1


def fmt(v: float) -> str:
    """Shortest round-trip text for a float."""
    return repr(float(v))


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def write_paths_csv(path: str | Path, paths) -> None:
    """Columnar CSV ``path,t,S,logZ,Y`` (``Y`` empty in single-factor models)."""
    t = paths.times
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "t", "S", "logZ", "Y"])
        for i in range(paths.n_paths):
            for k in range(t.size):
                y = "" if paths.Y is None else fmt(paths.Y[i, k])
                w.writerow([i, fmt(t[k]), fmt(paths.S[i, k]), fmt(paths.log_z[i, k]), y])


def read_paths_csv(path: str | Path) -> dict[str, FloatArray | None]:
    """Arrays ``t``, ``S``, ``logZ`` and ``Y`` (``None`` when absent) from a paths CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["path", "t", "S", "logZ", "Y"]:
        raise ConfigError("not a path-bundle CSV", {"header": "unrecognized"})
    body = rows[1:]
    n_paths = int(body[-1][0]) + 1
    n_times = len(body) // n_paths
    arr = lambda j: np.array([float(r[j]) for r in body]).reshape(n_paths, n_times)
    has_y = body[0][4] != ""
    return {"t": arr(1)[0], "S": arr(2), "logZ": arr(3), "Y": arr(4) if has_y else None}


def write_inverse_csv(path: str | Path, inv: InverseFlowField) -> None:
    """Columnar CSV ``path,t,x,psi``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "t", "x", "psi"])
        for i in range(inv.n_paths):
            for k, tk in enumerate(inv.times):
                for j, xj in enumerate(inv.x):
                    w.writerow([i, fmt(tk), fmt(xj), fmt(inv.psi[i, k, j])])


def write_matrix_csv(path: str | Path, row_key: str, rows: FloatArray, cols: FloatArray,
                     values: FloatArray, col_key: str = "t") -> None:
    """Matrix CSV: header ``row_key\\col_key`` then column values; one row per key.

    ``values`` has shape ``(len(cols), len(rows))`` (time-major, as stored in
    value fields) and is written transposed.
    """
    values = np.asarray(values)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{row_key}\\{col_key}"] + [fmt(c) for c in cols])
        for j, r in enumerate(rows):
            w.writerow([fmt(r)] + [fmt(v) for v in values[:, j]])


def read_matrix_csv(path: str | Path) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Inverse of :func:`write_matrix_csv`: ``(rows, cols, values)`` time-major."""
    with open(path, newline="") as fh:
        data = list(csv.reader(fh))
    cols = np.array([float(c) for c in data[0][1:]])
    rows = np.array([float(r[0]) for r in data[1:]])
    vals = np.array([[float(v) for v in r[1:]] for r in data[1:]]).T
    return rows, cols, vals


def write_series_csv(path: str | Path, columns: dict[str, Any]) -> None:
    """Equal-length named columns, for external plotting."""
    names = list(columns)
    cols = [np.asarray(columns[n]).ravel() for n in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


# --------------------------------------------------------------------------
# binary
# --------------------------------------------------------------------------


def _write_binary(path, kind: int, times: FloatArray, data: FloatArray, flags: int,
                  keys: FloatArray | None = None) -> None:
    n_paths, n_times, n_cols = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, kind, n_paths, n_times, n_cols, flags))
        fh.write(np.asarray(times, dtype="<f8").tobytes())
        if keys is not None:
            fh.write(np.asarray(keys, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def write_paths_binary(path: str | Path, paths) -> None:
    cols = [paths.S, paths.log_z] + ([] if paths.Y is None else [paths.Y])
    _write_binary(path, KIND_PATHS, paths.times, np.stack(cols, axis=-1), int(paths.Y is not None))


def write_inverse_binary(path: str | Path, inv: InverseFlowField) -> None:
    _write_binary(path, KIND_INVERSE, inv.times, inv.psi, 0, inv.x)


def read_binary(path: str | Path) -> dict[str, Any]:
    """Decode a ``DFL1`` file into ``kind``, ``t``, ``data`` and (inverse) ``x``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ConfigError("truncated DFL1 header", {"header": "unrecognized"})
    magic, kind, n_paths, n_times, n_cols, flags = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ConfigError(f"bad magic {magic!r}", {"magic": "expected DFL1"})
    off = _HEADER.size
    n_keys = n_cols if kind == KIND_INVERSE else 0
    need = off + 8 * (n_times + n_keys + n_paths * n_times * n_cols)
    if len(raw) != need:
        raise ConfigError(f"DFL1 payload has {len(raw)} bytes, expected {need}", {"payload": "size mismatch"})
    t = np.frombuffer(raw, "<f8", n_times, off)
    off += 8 * n_times
    out: dict[str, Any] = {"kind": kind, "t": t, "flags": flags}
    if n_keys:
        out["x"] = np.frombuffer(raw, "<f8", n_keys, off)
        off += 8 * n_keys
    out["data"] = np.frombuffer(raw, "<f8", n_paths * n_times * n_cols, off).reshape(n_paths, n_times, n_cols)
    return out


# --------------------------------------------------------------------------
# JSON
# --------------------------------------------------------------------------


def jsonable(obj: Any) -> Any:
    """Strict-JSON form: numpy scalars/arrays unwrapped, non-finite floats as strings."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def write_json(path: str | Path, obj: Any) -> None:
    text = json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text())


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
