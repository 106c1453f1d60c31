"""Binary cube/measurement containers and per-band PNG export.

Cube files (magic HSC1): H, W, C as little-endian uint32, then H*W*C
little-endian float32 values, band-major then row-major. Measurement files
(magic MSR1): H and width as uint32, then row-major float32 values. Both
round-trip byte-identically: floats are stored as float32 and promoted to
float64 in memory, which is exact in the write-read-write direction.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FileFormatError, ShapeError, UsageError

CUBE_MAGIC = b"HSC1"
MEAS_MAGIC = b"MSR1"


def write_cube(path, cube: np.ndarray) -> None:
    c3 = np.asarray(cube, dtype=np.float64)
    if c3.ndim != 3:
        raise ShapeError(f"cube must be (C, H, W), got ndim {c3.ndim}")
    if not np.isfinite(c3).all():
        raise UsageError("cube payload contains non-finite values")
    c, h, w = c3.shape
    payload = np.ascontiguousarray(c3, dtype="<f4").tobytes()
    Path(path).write_bytes(CUBE_MAGIC + struct.pack("<3I", h, w, c) + payload)


def read_cube(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != CUBE_MAGIC:
        raise FileFormatError(f"{path}: bad magic, expected {CUBE_MAGIC!r}")
    if len(buf) < 16:
        raise FileFormatError(f"{path}: truncated header")
    h, w, c = struct.unpack("<3I", buf[4:16])
    expected = 16 + 4 * h * w * c
    if len(buf) != expected:
        raise FileFormatError(f"{path}: payload length {len(buf) - 16} != 4*H*W*C = {expected - 16}")
    vals = np.frombuffer(buf[16:], dtype="<f4").astype(np.float64)
    return vals.reshape(c, h, w)


def write_meas(path, meas: np.ndarray) -> None:
    m = np.asarray(meas, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"measurement must be 2-d, got ndim {m.ndim}")
    if not np.isfinite(m).all():
        raise UsageError("measurement payload contains non-finite values")
    h, w = m.shape
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    Path(path).write_bytes(MEAS_MAGIC + struct.pack("<2I", h, w) + payload)


def read_meas(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != MEAS_MAGIC:
        raise FileFormatError(f"{path}: bad magic, expected {MEAS_MAGIC!r}")
    if len(buf) < 12:
        raise FileFormatError(f"{path}: truncated header")
    h, w = struct.unpack("<2I", buf[4:12])
    expected = 12 + 4 * h * w
    if len(buf) != expected:
        raise FileFormatError(f"{path}: payload length {len(buf) - 12} != 4*H*width = {expected - 12}")
    return np.frombuffer(buf[12:], dtype="<f4").astype(np.float64).reshape(h, w)


def quantize_band(band: np.ndarray) -> np.ndarray:
    """[0,1] floats to uint8 with round-half-up (0.5 maps to 128)."""
    return np.floor(np.clip(band, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_band_pngs(cube: np.ndarray, out_dir) -> list[Path]:
    """Write each band as an 8-bit grayscale band_XX.png; returns the paths."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, band in enumerate(np.asarray(cube, dtype=np.float64)):
        p = out_dir / f"band_{i:02d}.png"
        Image.fromarray(quantize_band(band), mode="L").save(p)
        paths.append(p)
    return paths
