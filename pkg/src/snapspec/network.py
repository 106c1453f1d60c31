"""K-phase unrolled recovery network.

Each phase mirrors one iteration of proximal gradient descent on the
snapshot inverse problem:

  1. a gradient step ``r = x - step * Ht(H(x) - y)`` where H and Ht wrap the
     fixed physics (mask + dispersion) in learned channel-preserving feature
     stacks, and ``step`` is a per-band size with a static learnable part and
     a content-dependent part read off the previous estimate;
  2. a refinement step that lifts r into an N-channel feature space, fuses
     it with the hidden states of all earlier phases, runs an
     encoder/decoder enhancer, and emits both the new estimate (as a
     residual on the initial split-and-stack cube) and a new hidden state.

Phases do not share weights. Network tensors are (1, C, H, W); the physics
operators see (C, H, W) cubes and (H, W+C-1) measurements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import optics
from .autodiff import Tensor
from .errors import ShapeError, UsageError


@dataclass
class RecoveryConfig:
    """Architecture knobs. Defaults are the desk-scale test configuration.

    At full scale the intended operating point is K=8 phases, N=32 feature
    channels, C=28 bands, a 4-level enhancer and a 16-block residual module;
    none of that is required for correctness, only for benchmark parity.
    """

    K: int = 3
    N: int = 8
    C: int = 8
    enc_levels: int = 2
    res_blocks: int = 2
    theta: float = 0.5
    use_fusion: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise UsageError(f"K must be >= 1, got {self.K}")
        for name in ("N", "C"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.enc_levels < 0 or self.res_blocks < 0:
            raise UsageError("enc_levels and res_blocks must be >= 0")

    def check_geometry(self, h: int, w: int) -> None:
        d = 2 ** self.enc_levels
        if h % d or w % d:
            raise ShapeError(
                f"spatial extents {h}x{w} not divisible by 2^enc_levels = {d}")


# -- parameterized building blocks -------------------------------------------


def _he_weights(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k))


def _dirac_weights(cout: int, cin: int, k: int) -> np.ndarray:
    if cout != cin:
        raise UsageError("dirac init needs matching channel counts")
    w = np.zeros((cout, cin, k, k))
    for i in range(cout):
        w[i, i, k // 2, k // 2] = 1.0
    return w


class Conv2d:
    """Same-convolution layer; ``init`` is one of he / zero / dirac."""

    def __init__(self, cin: int, cout: int, k: int = 3, *, stride: int = 1,
                 init: str = "he", rng: np.random.Generator | None = None):
        if init == "he":
            w = _he_weights(rng, cout, cin, k)
        elif init == "zero":
            w = np.zeros((cout, cin, k, k))
        elif init == "dirac":
            w = _dirac_weights(cout, cin, k)
        else:
            raise UsageError(f"unknown conv init {init!r}")
        self.stride = stride
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        k = self.w.data.shape[2]
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=(k - 1) // 2)

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class ResidualBlock:
    """x + Conv(ReLU(Conv(x))), channel-preserving 3x3 convs.

    The second conv is zero-initialized by default so a fresh block is the
    identity map.
    """

    def __init__(self, ch: int, rng: np.random.Generator, *, random_init: bool = False):
        self.c1 = Conv2d(ch, ch, 3, rng=rng)
        self.c2 = Conv2d(ch, ch, 3, rng=rng, init="he" if random_init else "zero")

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.c2(ad.relu(self.c1(x)))

    def named(self, prefix: str):
        yield from self.c1.named(f"{prefix}.c1")
        yield from self.c2.named(f"{prefix}.c2")


class FeatureStack:
    """Channel-preserving sensing surrogate: two 3x3 convs + four residual blocks.

    Default initialization is the exact identity (dirac convs, zero residual
    branches), so a fresh stack composed with the physics reproduces the
    plain forward/adjoint operator; training then deforms it.
    """

    def __init__(self, ch: int, rng: np.random.Generator, *, random_init: bool = False):
        conv_init = "he" if random_init else "dirac"
        self.c1 = Conv2d(ch, ch, 3, rng=rng, init=conv_init)
        self.c2 = Conv2d(ch, ch, 3, rng=rng, init=conv_init)
        self.blocks = [ResidualBlock(ch, rng, random_init=random_init) for _ in range(4)]

    def __call__(self, x: Tensor) -> Tensor:
        x = self.c1(x)
        for blk in self.blocks:
            x = blk(x)
        return self.c2(x)

    def named(self, prefix: str):
        yield from self.c1.named(f"{prefix}.c1")
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"{prefix}.rb{i}")
        yield from self.c2.named(f"{prefix}.c2")


class StepScale:
    """Per-band gradient step size: static vector + theta * channel attention.

    The attention map is Sigmoid(Conv1x1(ReLU(Conv1x1(GAP(x))))), bounded in
    (0, 1) per band; with theta = 0 the step reduces to the static vector and
    the attention branch is skipped entirely.
    """

    def __init__(self, c: int, theta: float, rng: np.random.Generator):
        self.theta = float(theta)
        self.rho = Tensor(np.ones(c), requires_grad=True)
        self.a = Conv2d(c, c, 1, rng=rng)
        self.b = Conv2d(c, c, 1, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        c = self.rho.data.shape[0]
        rho = ad.reshape(self.rho, (1, c, 1, 1))
        if self.theta == 0.0:
            return rho
        lam = ad.sigmoid(self.b(ad.relu(self.a(ad.global_avg_pool(x)))))
        return rho + self.theta * lam

    def attention(self, x: Tensor) -> Tensor:
        """The bounded per-band attention map alone (diagnostics and tests)."""
        return ad.sigmoid(self.b(ad.relu(self.a(ad.global_avg_pool(x)))))

    def named(self, prefix: str):
        yield f"{prefix}.rho", self.rho
        yield from self.a.named(f"{prefix}.a")
        yield from self.b.named(f"{prefix}.b")


class Enhancer:
    """Encoder/decoder feature enhancer with additive skip connections.

    ``levels`` stride-2 down-convolutions, a residual module at the
    bottleneck, then ``levels`` nearest-up + same-conv blocks; each decoder
    level adds the matching encoder feature. Channel width stays N.
    """

    def __init__(self, ch: int, levels: int, blocks: int, rng: np.random.Generator,
                 *, random_init: bool = False):
        self.downs = [Conv2d(ch, ch, 3, stride=2, rng=rng) for _ in range(levels)]
        self.blocks = [ResidualBlock(ch, rng, random_init=random_init) for _ in range(blocks)]
        self.ups = [Conv2d(ch, ch, 3, rng=rng) for _ in range(levels)]

    def __call__(self, x: Tensor) -> Tensor:
        skips = [x]
        for down in self.downs:
            h, w = x.data.shape[2:]
            if h % 2 or w % 2:
                raise ShapeError(f"enhancer: cannot halve {h}x{w} features")
            x = ad.conv2d(x, down.w, down.b, stride=2, padding=1)
            skips.append(x)
        for blk in self.blocks:
            x = blk(x)
        for up, skip in zip(self.ups, reversed(skips[:-1])):
            x = up(ad.upsample_nearest(x)) + skip
        return x

    def named(self, prefix: str):
        for i, d in enumerate(self.downs):
            yield from d.named(f"{prefix}.down{i}")
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"{prefix}.rb{i}")
        for i, u in enumerate(self.ups):
            yield from u.named(f"{prefix}.up{i}")


class Phase:
    """One unrolled iteration: gradient step + cross-phase refinement."""

    def __init__(self, cfg: RecoveryConfig, index: int, rng: np.random.Generator,
                 *, random_init: bool = False):
        c, n = cfg.C, cfg.N
        self.cfg = cfg
        self.index = index
        self.sense_stack = FeatureStack(c, rng, random_init=random_init)
        self.project_stack = FeatureStack(c, rng, random_init=random_init)
        self.step = StepScale(c, cfg.theta, rng)
        self.conv1 = Conv2d(c, n, 3, rng=rng)
        fuse_in = (index + 2) * n if cfg.use_fusion else n
        self.conv2 = Conv2d(fuse_in, n, 1, rng=rng)
        self.enh = Enhancer(n, cfg.enc_levels, cfg.res_blocks, rng, random_init=random_init)
        self.conv3 = Conv2d(n, n, 3, rng=rng)
        self.conv4 = Conv2d(n, c, 3, rng=rng, init="he" if random_init else "zero")
        self.conv5 = Conv2d(c, n, 3, rng=rng)

    # gradient step ----------------------------------------------------------

    def sense(self, x: Tensor, mask, rule) -> Tensor:
        """Learned surrogate of the sensing operator: feature stack then physics."""
        c = self.cfg.C
        h, w = x.data.shape[2:]
        fx = self.sense_stack(x)
        return optics.disperse_sum(optics.modulate(ad.reshape(fx, (c, h, w)), mask), rule)

    def backproject(self, e: Tensor, mask, rule) -> Tensor:
        """Learned surrogate of the transpose: physics adjoint then feature stack."""
        c = self.cfg.C
        back = optics.adjoint(e, mask, rule)
        h, w = back.data.shape[1:]
        return self.project_stack(ad.reshape(back, (1, c, h, w)))

    def gradient_step(self, x: Tensor, y: Tensor, mask, rule) -> Tensor:
        """r = x - step(x) * Ht(H(x) - y), with a per-band broadcast step."""
        resid = self.sense(x, mask, rule) - y
        corr = self.backproject(resid, mask, rule)
        return x - self.step(x) * corr

    # refinement ---------------------------------------------------------------

    def refine(self, r: Tensor, x0: Tensor, hidden: list[Tensor]) -> tuple[Tensor, Tensor | None]:
        """Fuse r with the hidden-state stack and emit (x_k, h_k).

        ``hidden`` is ordered newest first. Without fusion this degenerates
        to a plain encoder/decoder prior on r and h_k is None.
        """
        f = self.conv1(r)
        if self.cfg.use_fusion:
            feat = self.conv2(ad.concat([*hidden, f], axis=1))
        else:
            feat = self.conv2(f)
        enhanced = self.enh(feat)
        x_k = self.conv4(enhanced) + x0
        if not self.cfg.use_fusion:
            return x_k, None
        h_k = self.conv3(enhanced) * ad.sigmoid(self.conv5(x_k)) + enhanced
        return x_k, h_k

    def named(self, prefix: str):
        yield from self.sense_stack.named(f"{prefix}.sense")
        yield from self.project_stack.named(f"{prefix}.project")
        yield from self.step.named(f"{prefix}.step")
        for i in (1, 2, 3, 4, 5):
            yield from getattr(self, f"conv{i}").named(f"{prefix}.conv{i}")


class RecoveryNet:
    """The full K-phase recovery subnet."""

    def __init__(self, cfg: RecoveryConfig, seed: int = 0, *, random_init: bool = False):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.init_conv = Conv2d(cfg.C, cfg.N, 3, rng=rng)
        self.phases = [Phase(cfg, k, rng, random_init=random_init) for k in range(cfg.K)]

    def reconstruct(self, y, mask, rule=None, *, clamp: bool = False):
        """Run all phases on a measurement.

        Returns the list of per-phase estimates as (1, C, H, W) tensors
        (the last entry is the final reconstruction), or a clamped (C, H, W)
        ndarray when ``clamp`` is set (evaluation mode).
        """
        cfg = self.cfg
        mask_arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        h, w = mask_arr.shape
        cfg.check_geometry(h, w)
        y_t = y if isinstance(y, Tensor) else Tensor(y)
        if y_t.data.shape != (h, w + cfg.C - 1):
            raise ShapeError(
                f"measurement shape {y_t.data.shape} != expected ({h}, {w + cfg.C - 1})")
        rule = rule if rule is not None else optics.DispersionRule.unit(cfg.C)

        x0_cube = optics.init_split(y_t, rule)
        x0 = ad.reshape(x0_cube, (1, cfg.C, h, w))
        hidden = [self.init_conv(x0)] if cfg.use_fusion else []
        x = x0
        outs: list[Tensor] = []
        for phase in self.phases:
            r = phase.gradient_step(x, y_t, mask, rule)
            x, h_k = phase.refine(r, x0, hidden)
            if cfg.use_fusion:
                hidden.insert(0, h_k)
            outs.append(x)
        if clamp:
            return np.clip(outs[-1].data.reshape(cfg.C, h, w), 0.0, 1.0)
        return outs

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = list(self.init_conv.named("init_conv"))
        for k, phase in enumerate(self.phases):
            out.extend(phase.named(f"phase{k}"))
        return out

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_params()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite all parameters from a name -> array mapping (exact match)."""
        params = dict(self.named_params())
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ShapeError(f"parameter set mismatch: missing {missing[:4]}, unexpected {extra[:4]}")
        for name, t in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} != expected {t.data.shape}")
            t.data = arr
