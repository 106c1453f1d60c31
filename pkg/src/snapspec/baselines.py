"""Classical sparse-recovery baseline: ISTA with an exact proximal step.

This solver doubles as an oracle for the unrolled network: its gradient
step is the reference the learned phases must reproduce when their feature
stacks are identity-initialized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .optics import DispersionRule, adjoint, forward, init_split


def power_iteration_norm(mask, rule: DispersionRule | None = None,
                         iters: int = 500, tol: float = 1e-8, seed: int = 0) -> float:
    """Largest eigenvalue of (Phi^T Phi), i.e. the squared spectral norm of
    the sensing operator, via repeated forward/adjoint application.

    Stops when the Rayleigh quotient's relative change drops below ``tol``
    or the iteration budget runs out. A zero mask yields 0 with a warning.
    """
    m = np.asarray(mask, dtype=np.float64)
    if not m.any():
        warnings.warn("power_iteration_norm: zero mask, operator norm is 0")
        return 0.0
    r = rule if rule is not None else DispersionRule.unit(1)
    h, w = m.shape
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((r.bands, h, w))
    v /= np.linalg.norm(v)
    lam_prev = 0.0
    for _ in range(iters):
        av = adjoint(forward(v, m, r), m, r)
        lam = float(np.vdot(v, av))
        nrm = np.linalg.norm(av)
        if nrm == 0.0:
            return 0.0
        if abs(lam - lam_prev) < tol * max(1.0, abs(lam)):
            return lam
        v = av / nrm
        lam_prev = lam
    return lam_prev


def soft_threshold(v, tau: float):
    """sign(v) * max(|v| - tau, 0): the exact prox of tau * l1."""
    if tau < 0:
        raise UsageError(f"soft_threshold: tau must be >= 0, got {tau}")
    a = np.asarray(v, dtype=np.float64)
    return np.sign(a) * np.maximum(np.abs(a) - tau, 0.0)


@dataclass
class IstaConfig:
    iterations: int = 200
    lam: float = 0.0
    rho: float = 0.5
    prox_kind: str = "soft_threshold_identity"

    def __post_init__(self):
        if self.rho <= 0:
            raise UsageError(f"rho must be positive, got {self.rho}")
        if self.lam < 0:
            raise UsageError(f"lam must be >= 0, got {self.lam}")
        if self.prox_kind not in ("soft_threshold_identity", "soft_threshold_diff"):
            raise UsageError(f"unknown prox_kind {self.prox_kind!r}")


# Orthonormal horizontal pair transform: s=(a+b)/sqrt2, d=(a-b)/sqrt2 over
# non-overlapping column pairs. Shrinking d is the exact prox of the
# anisotropic difference penalty below (odd trailing column passes through).

_SQRT2 = np.sqrt(2.0)


def _pair_split(x: np.ndarray):
    weven = (x.shape[-1] // 2) * 2
    a, b = x[..., 0:weven:2], x[..., 1:weven:2]
    return (a + b) / _SQRT2, (a - b) / _SQRT2, x[..., weven:]


def _pair_merge(s: np.ndarray, d: np.ndarray, rest: np.ndarray) -> np.ndarray:
    out = np.empty(s.shape[:-1] + (2 * s.shape[-1] + rest.shape[-1],))
    out[..., 0:2 * s.shape[-1]:2] = (s + d) / _SQRT2
    out[..., 1:2 * s.shape[-1]:2] = (s - d) / _SQRT2
    out[..., 2 * s.shape[-1]:] = rest
    return out


def _prox(z: np.ndarray, tau: float, kind: str) -> np.ndarray:
    if kind == "soft_threshold_identity":
        return soft_threshold(z, tau)
    s, d, rest = _pair_split(z)
    return _pair_merge(s, soft_threshold(d, tau), rest)


def _penalty(x: np.ndarray, kind: str) -> float:
    if kind == "soft_threshold_identity":
        return float(np.abs(x).sum())
    _, d, _ = _pair_split(x)
    return float(np.abs(d).sum())


def ista_reconstruct(y, mask, rule: DispersionRule | None = None,
                     cfg: IstaConfig | None = None):
    """Proximal gradient descent on 0.5*||y - Phi x||^2 + lam * psi(x).

    Starts from the split-and-stack initialization. Returns the final
    iterate and the objective trace (length iterations + 1). Warns when the
    step exceeds the safe 1/||Phi||^2 bound.
    """
    cfg = cfg if cfg is not None else IstaConfig()
    m = np.asarray(mask, dtype=np.float64)
    yd = np.asarray(y, dtype=np.float64)
    r = rule if rule is not None else DispersionRule.unit(yd.shape[1] - m.shape[1] + 1)
    lip = power_iteration_norm(m, r)
    if lip > 0 and cfg.rho > 1.0 / lip:
        warnings.warn(f"ista step {cfg.rho} exceeds safe bound {1.0 / lip:.6g}; "
                      "objective may not decrease monotonically")

    def objective(x):
        resid = forward(x, m, r) - yd
        return 0.5 * float(np.vdot(resid, resid)) + cfg.lam * _penalty(x, cfg.prox_kind)

    x = init_split(yd, r)
    trace = [objective(x)]
    for _ in range(cfg.iterations):
        grad = adjoint(forward(x, m, r) - yd, m, r)
        x = _prox(x - cfg.rho * grad, cfg.rho * cfg.lam, cfg.prox_kind)
        trace.append(objective(x))
    return x, trace
