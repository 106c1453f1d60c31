"""Finite-difference verification of the end-to-end training gradient.

``numerical_gradient`` is the independent oracle (central differences on the
raw loss value, no autodiff involved); ``check_network`` compares it with
the reverse-mode gradients for every named parameter group of a full
compress -> reconstruct -> loss pipeline, plus the mask latent via the
straight-through convention (the latent's finite difference is taken at the
binary mask, where the loss is smooth in the mask values).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .network import RecoveryConfig, RecoveryNet
from .optics import DispersionRule, forward
from .sensing import binarize_ste, init_latent
from .training import loss


def numerical_gradient(f, arr: np.ndarray, indices, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() at selected flat indices.

    ``arr`` is perturbed in place and restored; ``f`` must read the current
    contents of ``arr`` on every call.
    """
    flat = arr.reshape(-1)
    out = np.empty(len(indices))
    for j, idx in enumerate(indices):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = f()
        flat[idx] = orig - h
        fm = f()
        flat[idx] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max absolute difference over the larger of the two max magnitudes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), floor)
    return float(np.abs(a - b).max(initial=0.0)) / denom


def check_network(rcfg: RecoveryConfig, seed: int = 0, spatial: int | None = None,
                  samples_per_group: int = 6, h: float = 1e-5,
                  corrupt: str | None = None) -> dict[str, float]:
    """Per-group worst relative error of autodiff vs. finite differences.

    Builds a randomly initialized network on a random scene, runs one
    backward pass of the training loss, then spot-checks sampled coordinates
    of every parameter group with central differences. ``corrupt`` is a test
    hook that deliberately falsifies one group's autodiff gradient so the
    report must flag it.
    """
    hw = spatial if spatial is not None else max(8, 4 * 2 ** rcfg.enc_levels)
    rng = np.random.default_rng(seed)
    cube = rng.uniform(0.0, 1.0, size=(rcfg.C, hw, hw))
    rule = DispersionRule.unit(rcfg.C)
    maskpair = init_latent(hw, hw, seed=seed)
    net = RecoveryNet(rcfg, seed=seed, random_init=True)

    mask_t = binarize_ste(maskpair.latent, maskpair.mu_b)
    y = forward(cube, mask_t, rule)
    outs = net.reconstruct(y, mask_t, rule)
    total = loss(outs[-1],
                 outs[-2] if len(outs) >= 2 else None,
                 outs[-3] if len(outs) >= 3 else None,
                 cube)
    ad.backward(total)

    # Finite differences are taken with the mask held at its binary values;
    # this matches the straight-through definition of the latent's gradient.
    mask_arr = maskpair.mask

    def loss_value() -> float:
        with ad.no_grad():
            y_v = forward(cube, mask_arr, rule)
            outs_v = net.reconstruct(y_v, mask_arr, rule)
            l_v = loss(outs_v[-1],
                       outs_v[-2] if len(outs_v) >= 2 else None,
                       outs_v[-3] if len(outs_v) >= 3 else None,
                       cube)
        return float(l_v.data)

    groups = list(net.named_params()) + [("mask.latent", maskpair.latent)]
    report: dict[str, float] = {}
    for gi, (name, p) in enumerate(groups):
        grad = p.grad
        grng = np.random.default_rng((seed, gi))
        n = min(samples_per_group, p.data.size)
        indices = grng.choice(p.data.size, size=n, replace=False)
        target = mask_arr if name == "mask.latent" else p.data
        fd = numerical_gradient(loss_value, target, indices, h=h)
        advals = grad.reshape(-1)[indices]
        if corrupt == name:
            advals = advals * 1.5 + 0.1
        report[name] = rel_error(advals, fd)
    return report
