"""Versioned binary weight container (magic HWT1).

Layout, all little-endian:

  magic   4 bytes  b"HWT1"
  config  5 x int32   K, N, C, enc_levels, res_blocks
          1 x float64 theta
  count   1 x uint32  number of named arrays
  entry   uint32 name length, utf-8 name,
          uint32 ndim, ndim x uint32 extents,
          float64 payload (C-order)

Parameter groups are stored under their network names; the trainer adds
bookkeeping arrays under ``meta.*``, ``mask.*`` and ``optim.*``. Arrays are
float64 end to end, so a write/read/write cycle is byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FileFormatError
from .network import RecoveryConfig, RecoveryNet

MAGIC = b"HWT1"
META_FUSION = "meta.use_fusion"


def save_checkpoint(path, cfg: RecoveryConfig, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC,
              struct.pack("<5i", cfg.K, cfg.N, cfg.C, cfg.enc_levels, cfg.res_blocks),
              struct.pack("<d", cfg.theta),
              struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FileFormatError(f"{self.path}: truncated at byte {self.off} (wanted {n} more)")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[RecoveryConfig, dict[str, np.ndarray]]:
    """Read the container back; returns the config block and all named arrays."""
    rd = _Reader(Path(path).read_bytes(), path)
    if rd.take(4) != MAGIC:
        raise FileFormatError(f"{path}: bad magic, expected {MAGIC!r}")
    k, n, c, enc, res = rd.unpack("<5i")
    (theta,) = rd.unpack("<d")
    (count,) = rd.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = rd.unpack("<I")
        name = rd.take(name_len).decode("utf-8")
        (ndim,) = rd.unpack("<I")
        shape = rd.unpack(f"<{ndim}I") if ndim else ()
        payload = rd.take(8 * int(np.prod(shape, dtype=np.int64)))
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if rd.off != len(rd.buf):
        raise FileFormatError(f"{path}: {len(rd.buf) - rd.off} trailing bytes after last entry")
    fusion = bool(arrays[META_FUSION][0]) if META_FUSION in arrays else True
    cfg = RecoveryConfig(K=k, N=n, C=c, enc_levels=enc, res_blocks=res,
                         theta=theta, use_fusion=fusion)
    return cfg, arrays


def load_net(path) -> tuple[RecoveryNet, dict[str, np.ndarray]]:
    """Rebuild a RecoveryNet from a checkpoint.

    Returns the network plus every non-parameter array (meta / mask /
    optimizer state) for callers that resume training.
    """
    cfg, arrays = load_checkpoint(path)
    net = RecoveryNet(cfg)
    param_names = {name for name, _ in net.named_params()}
    net.load_arrays({k: v for k, v in arrays.items() if k in param_names})
    extras = {k: v for k, v in arrays.items() if k not in param_names}
    return net, extras
