"""Sampling subnet: latent mask, binarization, straight-through gradients.

The deployable coded aperture is binary. Training keeps a continuous latent
field; the forward pass thresholds it, and the backward pass treats the
threshold's derivative as the constant 1, so the gradient that lands on the
latent is elementwise identical to the gradient computed at the binary mask.

The latent is deliberately never clipped or re-normalized between steps: the
threshold makes the binarized mask insensitive to the latent's scale. Latent
values can drift away from the threshold over long runs (see README).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, accumulate
from .errors import FileFormatError, ShapeError, UsageError
from .optics import DispersionRule, forward


def binary_sign(z, mu_b: float = 0.0):
    """Threshold at mu_b: 1 where z >= mu_b (boundary inclusive), else 0."""
    out = (np.asarray(z, dtype=np.float64) >= mu_b).astype(np.float64)
    return float(out) if np.isscalar(z) else out


@dataclass
class MaskPair:
    """Continuous latent field plus its binarized coded aperture.

    ``mask`` is always derived from the current latent, so the two cannot
    fall out of sync no matter how the trainer updates the latent.
    """

    latent: Tensor
    mu_b: float = 0.0
    sigma_b: float = 0.1

    @property
    def mask(self) -> np.ndarray:
        return binary_sign(self.latent.data, self.mu_b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.latent.data.shape


def init_latent(h: int, w: int, mu_b: float = 0.0, sigma_b: float = 0.1,
                seed: int = 0) -> MaskPair:
    """Gaussian latent init, mean mu_b and std sigma_b, deterministic per seed."""
    if sigma_b <= 0:
        raise UsageError(f"sigma_b must be positive, got {sigma_b}")
    rng = np.random.default_rng(seed)
    latent = rng.normal(mu_b, sigma_b, size=(h, w))
    return MaskPair(latent=Tensor(latent, requires_grad=True), mu_b=mu_b, sigma_b=sigma_b)


def binarize_ste(latent: Tensor, mu_b: float = 0.0) -> Tensor:
    """Elementwise threshold with a straight-through backward pass.

    Forward: binary_sign(latent, mu_b). Backward: the upstream gradient is
    passed to the latent unchanged (derivative defined as the constant 1).
    """
    out = binary_sign(latent.data, mu_b)

    def bwd(g):
        accumulate(latent, g)

    return Tensor.from_op(out, (latent,), bwd, "binarize_ste")


def compress(cube, maskpair: MaskPair, rule: DispersionRule | None = None,
             noise_sigma: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Snapshot a cube through the current binarized mask.

    Gradients reach the latent through the straight-through path, so the
    result is differentiable with respect to both the cube and the latent.
    """
    mask_t = binarize_ste(maskpair.latent, maskpair.mu_b)
    return forward(cube, mask_t, rule, noise_sigma=noise_sigma, rng=rng)


# -- plain-text mask format ---------------------------------------------------

_MASK_MAGIC = "MASK1"


def save_mask(path, mask: np.ndarray) -> None:
    """Write a binary mask as a MASK1 text grid (canonical form, round-trips bit-exactly)."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ShapeError(f"mask must be 2-d, got ndim {m.ndim}")
    if not np.all((m == 0) | (m == 1)):
        raise UsageError("mask values must be exactly 0 or 1")
    h, w = m.shape
    rows = [" ".join("1" if v else "0" for v in row) for row in m]
    Path(path).write_text("\n".join([_MASK_MAGIC, f"{h} {w}", *rows]) + "\n")


def load_mask(path) -> np.ndarray:
    """Read a MASK1 text grid back into a float64 array of 0s and 1s."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _MASK_MAGIC:
        raise FileFormatError(f"{path}: bad magic, expected {_MASK_MAGIC!r}")
    try:
        h, w = (int(t) for t in lines[1].split())
    except (IndexError, ValueError):
        raise FileFormatError(f"{path}: malformed extent line, expected 'H W'")
    if len(lines) != 2 + h:
        raise FileFormatError(f"{path}: expected {h} rows, found {len(lines) - 2}")
    mask = np.empty((h, w))
    for r, line in enumerate(lines[2:]):
        toks = line.split()
        if len(toks) != w or any(t not in ("0", "1") for t in toks):
            raise FileFormatError(f"{path}: row {r} is not {w} space-separated 0/1 values")
        mask[r] = [float(t) for t in toks]
    return mask
