"""Matrix storage and the centering/scaling preprocessing applied to every dataset.

Matrices are plain 2-D float64 numpy arrays. Two on-disk formats are
supported: a small binary container ("TICA" magic, little-endian f64
payload) and headerless CSV.
"""

import csv
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInput, FormatError, IoError

MAGIC = b"TICA"
VERSION = 1
_HEADER = struct.Struct("<4sB3xQQ")


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise FormatError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    return m


def _check_path(path) -> Path:
    if path is None or str(path) == "":
        raise IoError("empty path")
    return Path(path)


def _infer_format(path: Path, fmt):
    if fmt is not None:
        if fmt not in ("csv", "bin"):
            raise FormatError(f"unknown matrix format {fmt!r}")
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "bin"


def write_matrix(m, path, fmt=None) -> None:
    """Write ``m`` to ``path`` as ``"bin"`` (bit-exact) or ``"csv"`` (repr digits)."""
    path = _check_path(path)
    fmt = _infer_format(path, fmt)
    m = as_matrix(m)
    if not np.all(np.isfinite(m)):
        raise FormatError("matrix contains non-finite values")
    try:
        if fmt == "bin":
            rows, cols = m.shape
            with open(path, "wb") as fh:
                fh.write(_HEADER.pack(MAGIC, VERSION, rows, cols))
                fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
        else:
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                for row in m:
                    writer.writerow([repr(float(x)) for x in row])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_matrix(path, fmt=None) -> np.ndarray:
    path = _check_path(path)
    fmt = _infer_format(path, fmt)
    try:
        if fmt == "bin":
            with open(path, "rb") as fh:
                raw = fh.read()
        else:
            with open(path, newline="") as fh:
                rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    if fmt == "bin":
        if len(raw) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, nrow, ncol = _HEADER.unpack_from(raw)
        if magic != MAGIC or version != VERSION:
            raise FormatError(f"{path}: bad magic/version")
        payload = raw[_HEADER.size:]
        if nrow < 1 or ncol < 1 or len(payload) != 8 * nrow * ncol:
            raise FormatError(
                f"{path}: header ({nrow}, {ncol}) inconsistent with {len(payload)} payload bytes"
            )
        return np.frombuffer(payload, dtype="<f8").reshape(nrow, ncol).astype(np.float64)

    if not rows:
        raise FormatError(f"{path}: empty csv")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise FormatError(f"{path}: ragged csv rows")
    try:
        return np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric cell ({exc})") from exc


@dataclass(frozen=True)
class ScaledData:
    data: np.ndarray
    scale_factor: float


def double_center(x) -> np.ndarray:
    """Remove per-column (temporal) means, then per-row (spatial) means."""
    x = as_matrix(x)
    xc = x - x.mean(axis=0, keepdims=True)
    return xc - xc.mean(axis=1, keepdims=True)


def center_rows(m) -> np.ndarray:
    """Subtract each row's mean (spatial centering of maps)."""
    m = as_matrix(m)
    return m - m.mean(axis=1, keepdims=True)


def center_scale(x, scaling: str = "temporal_sd") -> ScaledData:
    """Doubly center a T x V dataset and divide by its average temporal SD.

    The scale factor is computed on the *uncentered* input: the mean over
    locations of each location's sample standard deviation (ddof=1). With
    ``scaling="image_sd"`` the divisor is instead the standard deviation of
    the centered data taken over all entries.
    """
    x = as_matrix(x)
    t, v = x.shape
    if t < 2 or v < 2:
        raise DegenerateInput(f"center_scale needs T >= 2 and V >= 2, got {x.shape}")
    centered = double_center(x)
    if scaling == "temporal_sd":
        scale = float(np.mean(np.std(x, axis=0, ddof=1)))
    elif scaling == "image_sd":
        scale = float(np.std(centered, ddof=1))
    else:
        raise ValueError(f"unknown scaling {scaling!r}")
    if not scale > 0:
        raise DegenerateInput("data are constant in time at every location")
    return ScaledData(centered / scale, scale)


def split_sessions(x):
    """Split rows into two equal halves; a trailing odd row is dropped."""
    x = as_matrix(x)
    t = x.shape[0]
    if t < 4:
        raise DegenerateInput(f"need at least 4 time points to split, got {t}")
    h = t // 2
    return x[:h].copy(), x[h:2 * h].copy()


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc}") from exc
    return path
