"""CASSI physics: mask modulation, per-band dispersion, adjoint, dense oracle.

Geometry conventions used throughout the package:
  - a hyperspectral cube is a (C, H, W) array, band index slowest;
    ground-truth cubes live in [0, 1], intermediate estimates may not
  - a snapshot measurement is an (H, W + C - 1) array: band i is written
    at column offset ``shifts[i]`` and the shifted bands are summed
  - the per-band shift is one pixel per band (shifts[i] = i). This is the
    only integer dispersion consistent with the measurement width above;
    see README for discussion.

Every operator here accepts plain ndarrays (pure numeric path) or
:class:`~snapspec.autodiff.Tensor` inputs, in which case the result is a
graph node. The operators are linear, so each backward pass is just the
partner operator: dispersion's gradient is the extraction window, the
adjoint's gradient is the forward placement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, accumulate
from .errors import ShapeError, UsageError


@dataclass(frozen=True)
class DispersionRule:
    """Integer per-band column shifts, nondecreasing, from 0 to C - 1."""

    shifts: tuple[int, ...]

    def __post_init__(self):
        s = self.shifts
        if len(s) < 1:
            raise UsageError("DispersionRule: needs at least one band")
        if s[0] != 0:
            raise UsageError(f"DispersionRule: first shift must be 0, got {s[0]}")
        if any(b < a for a, b in zip(s, s[1:])):
            raise UsageError(f"DispersionRule: shifts must be nondecreasing, got {s}")
        if s[-1] != len(s) - 1:
            raise UsageError(f"DispersionRule: last shift must be C-1={len(s) - 1}, got {s[-1]}")

    @classmethod
    def unit(cls, bands: int) -> "DispersionRule":
        """One pixel of shift per band (the default disperser model)."""
        return cls(tuple(range(bands)))

    @property
    def bands(self) -> int:
        return len(self.shifts)

    def meas_width(self, cube_width: int) -> int:
        return cube_width + self.shifts[-1]


def _rule_for(cube_bands: int, rule: DispersionRule | None) -> DispersionRule:
    if rule is None:
        return DispersionRule.unit(cube_bands)
    if rule.bands != cube_bands:
        raise ShapeError(f"dispersion rule has {rule.bands} shifts but cube has {cube_bands} bands")
    return rule


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_cube(cube: np.ndarray) -> None:
    if cube.ndim != 3:
        raise ShapeError(f"cube must be (C, H, W), got ndim {cube.ndim}")


def _check_mask(mask: np.ndarray, h: int, w: int) -> None:
    if mask.shape != (h, w):
        raise ShapeError(f"mask extents {mask.shape} != cube spatial extents ({h}, {w})")


# -- numpy kernels (forward and their adjoints) ------------------------------


def _modulate_k(cube: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return cube * mask[None, :, :]


def _disperse_k(cube: np.ndarray, rule: DispersionRule) -> np.ndarray:
    c, h, w = cube.shape
    out = np.zeros((h, rule.meas_width(w)))
    for i, d in enumerate(rule.shifts):
        out[:, d:d + w] += cube[i]
    return out


def _unshift_k(meas: np.ndarray, rule: DispersionRule, w: int) -> np.ndarray:
    h = meas.shape[0]
    out = np.empty((rule.bands, h, w))
    for i, d in enumerate(rule.shifts):
        out[i] = meas[:, d:d + w]
    return out


# -- public operators ---------------------------------------------------------


def modulate(cube, mask):
    """Hadamard product of every band with the coded aperture."""
    cd, md = _data(cube), _data(mask)
    _check_cube(cd)
    _check_mask(md, cd.shape[1], cd.shape[2])
    out = _modulate_k(cd, md)
    if not (isinstance(cube, Tensor) or isinstance(mask, Tensor)):
        return out
    ct = cube if isinstance(cube, Tensor) else Tensor(cd)
    mt = mask if isinstance(mask, Tensor) else Tensor(md)

    def bwd(g):
        accumulate(ct, _modulate_k(g, md))
        accumulate(mt, (g * cd).sum(axis=0))

    return Tensor.from_op(out, (ct, mt), bwd, "modulate")


def disperse_sum(cube, rule: DispersionRule | None = None):
    """Shift band i by ``rule.shifts[i]`` columns and sum onto the sensor."""
    cd = _data(cube)
    _check_cube(cd)
    r = _rule_for(cd.shape[0], rule)
    out = _disperse_k(cd, r)
    if not isinstance(cube, Tensor):
        return out
    w = cd.shape[2]

    def bwd(g):
        accumulate(cube, _unshift_k(g, r, w))

    return Tensor.from_op(out, (cube,), bwd, "disperse_sum")


def forward(cube, mask, rule: DispersionRule | None = None,
            noise_sigma: float = 0.0, rng: np.random.Generator | None = None):
    """Full sensing chain: modulate, disperse, sum, plus optional Gaussian noise."""
    if noise_sigma < 0:
        raise UsageError(f"noise_sigma must be >= 0, got {noise_sigma}")
    meas = disperse_sum(modulate(cube, mask), rule)
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        noise = rng.normal(0.0, noise_sigma, size=_data(meas).shape)
        meas = meas + Tensor(noise) if isinstance(meas, Tensor) else meas + noise
    return meas


def adjoint(meas, mask, rule: DispersionRule | None = None):
    """Exact transpose of the noiseless forward operator.

    Band i reads measurement columns [d_i, d_i + W) and multiplies by the mask.
    """
    md = _data(mask)
    mh, mw = md.shape
    measd = _data(meas)
    if measd.ndim != 2 or measd.shape[0] != mh:
        raise ShapeError(f"measurement shape {measd.shape} incompatible with mask height {mh}")
    r = rule if rule is not None else DispersionRule.unit(measd.shape[1] - mw + 1)
    if measd.shape[1] != r.meas_width(mw):
        raise ShapeError(f"measurement width {measd.shape[1]} != expected {r.meas_width(mw)}")
    out = _modulate_k(_unshift_k(measd, r, mw), md)
    if not (isinstance(meas, Tensor) or isinstance(mask, Tensor)):
        return out
    yt = meas if isinstance(meas, Tensor) else Tensor(measd)
    mt = mask if isinstance(mask, Tensor) else Tensor(md)

    def bwd(g):
        accumulate(yt, _disperse_k(_modulate_k(g, md), r))
        accumulate(mt, (g * _unshift_k(measd, r, mw)).sum(axis=0))

    return Tensor.from_op(out, (yt, mt), bwd, "adjoint")


def init_split(meas, rule: DispersionRule):
    """Initial cube estimate: stack the C sliding extraction windows of y."""
    measd = _data(meas)
    if measd.ndim != 2:
        raise ShapeError(f"measurement must be 2-d, got ndim {measd.ndim}")
    w = measd.shape[1] - rule.shifts[-1]
    if w < 1:
        raise ShapeError(f"measurement width {measd.shape[1]} too small for {rule.bands} bands")
    out = _unshift_k(measd, rule, w)
    if not isinstance(meas, Tensor):
        return out

    def bwd(g):
        accumulate(meas, _disperse_k(g, rule))

    return Tensor.from_op(out, (meas,), bwd, "init_split")


def dense_phi(mask, rule: DispersionRule) -> np.ndarray:
    """Materialize the sensing matrix so that forward == phi @ vec(cube).

    vec orders the cube band-major then row-major; the measurement is
    vectorized row-major. Guarded to small instances (H*W*C <= 65536).
    """
    md = _data(mask)
    h, w = md.shape
    r = rule
    c = r.bands
    if h * w * c > 65536:
        raise UsageError(f"dense_phi guard: H*W*C = {h * w * c} exceeds 65536")
    wm = r.meas_width(w)
    phi = np.zeros((h * wm, h * w * c))
    mm, nn = np.mgrid[0:h, 0:w]
    for i, d in enumerate(r.shifts):
        rows = (mm * wm + nn + d).ravel()
        cols = (i * h * w + mm * w + nn).ravel()
        phi[rows, cols] = md.ravel()
    return phi
