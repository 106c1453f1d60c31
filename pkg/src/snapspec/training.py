"""Joint optimization of the mask latent and the recovery network.

Includes the supervised loss over the last three phase outputs, a
self-contained Adam implementation, the staircase learning-rate schedule,
the epoch loop with CSV logging and resumable checkpoints, and the
experiment drivers (single-sample overfit, mask comparison, ablations).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import META_FUSION, load_checkpoint, save_checkpoint
from .errors import ShapeError, UsageError
from .metrics import psnr as psnr_of
from .metrics import ssim as ssim_of
from .network import RecoveryConfig, RecoveryNet
from .optics import DispersionRule, forward
from .sensing import MaskPair, binarize_ste, init_latent, save_mask

METRICS_HEADER = "epoch,lr,train_loss,val_psnr,val_ssim"


@dataclass
class TrainConfig:
    """Trainer knobs. Ablation flags mirror the architecture switches:
    MO gates mask optimization, HFIM the cross-phase fusion, RM the
    enhancer's residual module, DyRho the dynamic step size."""

    epochs: int = 100
    lr0: float = 1e-4
    decay: float = 0.9
    beta_loss: float = 0.5
    batch: int = 4
    seed: int = 0
    noise_sigma: float = 0.0
    mask_mode: str = "learned"
    MO: bool = True
    HFIM: bool = True
    RM: bool = True
    DyRho: bool = True
    grad_clip: float = 0.0
    beta_applies_to_both: bool = True

    def __post_init__(self):
        if self.mask_mode not in ("learned", "fixed"):
            raise UsageError(f"mask_mode must be 'learned' or 'fixed', got {self.mask_mode!r}")

    @property
    def learn_mask(self) -> bool:
        return self.MO and self.mask_mode == "learned"


def apply_ablations(rcfg: RecoveryConfig, tcfg: TrainConfig) -> RecoveryConfig:
    """Fold the trainer's ablation flags into an architecture config."""
    return dataclasses.replace(
        rcfg,
        use_fusion=rcfg.use_fusion and tcfg.HFIM,
        res_blocks=rcfg.res_blocks if tcfg.RM else 0,
        theta=rcfg.theta if tcfg.DyRho else 0.0,
    )


def lr_at(epoch: int, lr0: float = 1e-4, decay: float = 0.9) -> float:
    """Staircase schedule: lr0 * decay^floor(epoch / 10)."""
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    return lr0 * decay ** (epoch // 10)


def loss(x_K: Tensor, x_Km1: Tensor | None, x_Km2: Tensor | None, gt,
         beta: float = 0.5, beta_applies_to_both: bool = True) -> Tensor:
    """Supervised loss for one sample: squared error of the final estimate
    plus beta times the squared errors of the two preceding phases.

    Convention: sum of squares over all pixels and bands of a sample (the
    trainer averages over the samples of a batch). Missing intermediate
    phases (K < 3) simply drop their terms.
    """
    gt_t = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=np.float64))

    def sq(est: Tensor) -> Tensor:
        d = est - ad.reshape(gt_t, est.data.shape)
        return ad.tsum(d * d)

    total = sq(x_K)
    if beta_applies_to_both:
        penalty = None
        for est in (x_Km1, x_Km2):
            if est is not None:
                penalty = sq(est) if penalty is None else penalty + sq(est)
        if penalty is not None:
            total = total + beta * penalty
    else:
        # Alternative precedence: beta scales only the K-1 term.
        if x_Km1 is not None:
            total = total + beta * sq(x_Km1)
        if x_Km2 is not None:
            total = total + sq(x_Km2)
    return total


class Adam:
    """Standard bias-corrected Adam over named parameter tensors.

    Parameters with no gradient on a given step are skipped. The moment
    buffers and step counter round-trip through checkpoints, so resumed
    runs continue the same trajectory.
    """

    def __init__(self, params: list[tuple[str, Tensor]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"adam: gradient shape {g.shape} != parameter {name} shape {p.data.shape}")
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[name] / b1c
            vhat = self.v[name] / b2c
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{k}": v for k, v in self.m.items()}
        out.update({f"optim.v.{k}": v for k, v in self.v.items()})
        out["optim.t"] = np.array([float(self.t)])
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.m:
            if f"optim.m.{k}" in arrays:
                self.m[k] = arrays[f"optim.m.{k}"]
                self.v[k] = arrays[f"optim.v.{k}"]
        if "optim.t" in arrays:
            self.t = int(arrays["optim.t"][0])


def clip_gradients(params: list[tuple[str, Tensor]], max_norm: float) -> None:
    """Scale all gradients so their joint 2-norm is at most max_norm."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.vdot(p.grad, p.grad))
    total = np.sqrt(total)
    if total > max_norm > 0:
        scale = max_norm / total
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * scale


# -- the training loop --------------------------------------------------------


@dataclass
class TrainResult:
    net: RecoveryNet
    mask: np.ndarray                # deployed binary mask
    maskpair: MaskPair | None       # present when the mask was learnable
    rows: list[str]                 # metrics CSV rows (without header)
    val_psnr: float
    val_ssim: float


def split_dataset(n: int, seed: int) -> tuple[list[int], list[int]]:
    """Fixed seeded 80/20 train/validation split; a singleton dataset
    validates on its own training sample."""
    if n == 1:
        return [0], [0]
    rng = np.random.default_rng(seed)
    perm = [int(i) for i in rng.permutation(n)]
    n_val = max(1, int(round(0.2 * n)))
    return perm[n_val:], perm[:n_val]


def _check_dataset(dataset) -> tuple[int, int, int]:
    if not dataset:
        raise UsageError("dataset is empty")
    shape = dataset[0].shape
    if len(shape) != 3:
        raise ShapeError(f"dataset cubes must be (C, H, W), got {shape}")
    for i, cube in enumerate(dataset):
        if cube.shape != shape:
            raise ShapeError(f"cube {i} has shape {cube.shape}, expected {shape}")
    return shape


def evaluate(net: RecoveryNet, mask: np.ndarray, cubes, rule: DispersionRule) -> tuple[float, float]:
    """Mean PSNR/SSIM of clamped reconstructions over a list of cubes."""
    ps, ss = [], []
    with ad.no_grad():
        for cube in cubes:
            y = forward(cube, mask, rule)
            rec = net.reconstruct(y, mask, rule, clamp=True)
            ps.append(psnr_of(rec, cube))
            ss.append(ssim_of(rec, cube))
    return float(np.mean(ps)), float(np.mean(ss))


def _csv_row(epoch: int, lr: float, train_loss: float, vp: float, vs: float) -> str:
    return f"{epoch},{lr:.10g},{train_loss:.8f},{vp:.4f},{vs:.4f}"


def train(dataset, tcfg: TrainConfig, rcfg: RecoveryConfig,
          out_dir=None, fixed_mask: np.ndarray | None = None,
          resume: bool = False, log=None) -> TrainResult:
    """Joint training loop.

    ``dataset`` is a list of (C, H, W) cubes in [0, 1]. When the mask is
    learnable the latent is optimized through the straight-through path;
    otherwise ``fixed_mask`` (or a seeded Bernoulli(0.5) pattern) is used as
    a constant. Writes ``metrics.csv``, ``checkpoint.hwt`` and ``mask.txt``
    into ``out_dir`` when given; with ``resume`` the run continues from the
    checkpoint's epoch counter.
    """
    c, h, w = _check_dataset(dataset)
    net_cfg = apply_ablations(rcfg, tcfg)
    if net_cfg.C != c:
        raise ShapeError(f"config C={net_cfg.C} but dataset cubes have {c} bands")
    net_cfg.check_geometry(h, w)
    rule = DispersionRule.unit(c)

    train_idx, val_idx = split_dataset(len(dataset), tcfg.seed)
    net = RecoveryNet(net_cfg, seed=tcfg.seed)

    maskpair: MaskPair | None = None
    if tcfg.learn_mask:
        maskpair = init_latent(h, w, seed=tcfg.seed)
        if fixed_mask is not None:
            raise UsageError("fixed_mask given but mask optimization is enabled")
    else:
        if fixed_mask is None:
            fixed_mask = init_latent(h, w, seed=tcfg.seed).mask
        if fixed_mask.shape != (h, w):
            raise ShapeError(f"fixed mask shape {fixed_mask.shape} != cube spatial extents ({h}, {w})")

    params = net.named_params()
    if maskpair is not None:
        params = params + [("mask.latent", maskpair.latent)]
    opt = Adam(params)

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_dir / "checkpoint.hwt" if out_dir else None
    csv_path = out_dir / "metrics.csv" if out_dir else None
    start_epoch = 0
    if resume and ckpt_path is not None and ckpt_path.exists():
        _, arrays = load_checkpoint(ckpt_path)
        net.load_arrays({k: v for k, v in arrays.items()
                         if not k.startswith(("meta.", "mask.", "optim."))})
        if maskpair is not None and "mask.latent" in arrays:
            maskpair.latent.data = arrays["mask.latent"]
        opt.load_state(arrays)
        start_epoch = int(arrays["meta.epoch"][0]) + 1
    elif out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if csv_path.exists():
            csv_path.unlink()

    rows: list[str] = []
    vp = vs = float("nan")
    for epoch in range(start_epoch, tcfg.epochs):
        rng = np.random.default_rng((tcfg.seed, epoch))
        order = [train_idx[int(i)] for i in rng.permutation(len(train_idx))]
        lr = lr_at(epoch, tcfg.lr0, tcfg.decay)
        epoch_loss = 0.0
        for lo in range(0, len(order), tcfg.batch):
            batch = order[lo:lo + tcfg.batch]
            total = None
            mask_t = binarize_ste(maskpair.latent, maskpair.mu_b) if maskpair is not None else fixed_mask
            for idx in batch:
                cube = dataset[idx]
                y = forward(cube, mask_t, rule, noise_sigma=tcfg.noise_sigma, rng=rng)
                outs = net.reconstruct(y, mask_t, rule)
                sample_loss = loss(outs[-1],
                                   outs[-2] if len(outs) >= 2 else None,
                                   outs[-3] if len(outs) >= 3 else None,
                                   cube, tcfg.beta_loss, tcfg.beta_applies_to_both)
                total = sample_loss if total is None else total + sample_loss
            total = (1.0 / len(batch)) * total
            ad.backward(total)
            if tcfg.grad_clip > 0:
                clip_gradients(params, tcfg.grad_clip)
            opt.step(lr)
            epoch_loss += float(total.data) * len(batch)
        epoch_loss /= max(1, len(order))

        deployed = maskpair.mask if maskpair is not None else fixed_mask
        vp, vs = evaluate(net, deployed, [dataset[i] for i in val_idx], rule)
        row = _csv_row(epoch, lr, epoch_loss, vp, vs)
        rows.append(row)
        if log is not None:
            log(row)
        if out_dir is not None:
            arrays = dict(net.param_arrays())
            arrays[META_FUSION] = np.array([1.0 if net_cfg.use_fusion else 0.0])
            arrays["meta.epoch"] = np.array([float(epoch)])
            if maskpair is not None:
                arrays["mask.latent"] = maskpair.latent.data
            arrays.update(opt.state_arrays())
            save_checkpoint(ckpt_path, net_cfg, arrays)
            save_mask(out_dir / "mask.txt", deployed)
            new_file = not csv_path.exists()
            with open(csv_path, "a") as fh:
                if new_file:
                    fh.write(METRICS_HEADER + "\n")
                fh.write(row + "\n")

    deployed = maskpair.mask if maskpair is not None else fixed_mask
    return TrainResult(net=net, mask=deployed, maskpair=maskpair,
                       rows=rows, val_psnr=vp, val_ssim=vs)


# -- experiment drivers -------------------------------------------------------


def overfit_single(cube: np.ndarray, rcfg: RecoveryConfig, steps: int = 3000,
                   lr: float = 1e-3, seed: int = 0, beta: float = 0.5,
                   target_psnr: float | None = None, log_every: int = 0,
                   log=None) -> tuple[RecoveryNet, np.ndarray, list[tuple[int, float]]]:
    """Memorization run: one sample, fixed seeded Bernoulli mask, constant lr.

    Returns (net, mask, trace of (step, psnr)). Stops early once
    ``target_psnr`` is reached, if given.
    """
    c, h, w = cube.shape
    rcfg.check_geometry(h, w)
    rule = DispersionRule.unit(c)
    mask = init_latent(h, w, seed=seed).mask
    net = RecoveryNet(rcfg, seed=seed)
    opt = Adam(net.named_params())
    y = forward(cube, mask, rule)

    trace: list[tuple[int, float]] = []
    check_every = log_every if log_every > 0 else 50
    for step in range(1, steps + 1):
        outs = net.reconstruct(y, mask, rule)
        total = loss(outs[-1],
                     outs[-2] if len(outs) >= 2 else None,
                     outs[-3] if len(outs) >= 3 else None,
                     cube, beta)
        ad.backward(total)
        opt.step(lr)
        if step % check_every == 0 or step == steps:
            rec = net.reconstruct(y, mask, rule, clamp=True)
            p = psnr_of(rec, cube)
            trace.append((step, p))
            if log is not None:
                log(f"step {step}: loss {float(total.data):.3e} psnr {p:.2f} dB")
            if target_psnr is not None and p >= target_psnr:
                break
    return net, mask, trace


def run_mask_study(dataset, tcfg: TrainConfig, rcfg: RecoveryConfig,
                   log=None) -> list[tuple[str, float, float]]:
    """Train under three mask regimes and report held-out PSNR/SSIM.

    Regimes: all-ones (uniform), fixed seeded Bernoulli(0.5), and jointly
    learned binary. Rows come back sorted by PSNR descending.
    """
    c, h, w = _check_dataset(dataset)
    bern = init_latent(h, w, seed=tcfg.seed + 7919).mask
    regimes = [
        ("uniform", dataclasses.replace(tcfg, mask_mode="fixed"), np.ones((h, w))),
        ("bernoulli", dataclasses.replace(tcfg, mask_mode="fixed"), bern),
        ("learned", dataclasses.replace(tcfg, mask_mode="learned", MO=True), None),
    ]
    rows = []
    for name, cfg_i, mask_i in regimes:
        res = train(dataset, cfg_i, rcfg, fixed_mask=mask_i)
        rows.append((name, res.val_psnr, res.val_ssim))
        if log is not None:
            log(f"{name}: psnr={res.val_psnr:.2f} ssim={res.val_ssim:.4f}")
    return sorted(rows, key=lambda r: -r[1])


def run_ablation_study(dataset, tcfg: TrainConfig, rcfg: RecoveryConfig,
                       seeds=(0, 1, 2), log=None) -> dict[str, float]:
    """Mean held-out PSNR of the full model vs. single-switch ablations.

    Variants: full, no_fusion (cross-phase fusion off), static_step
    (dynamic step size off). Seeds are shared across variants so the
    comparison is paired.
    """
    variants = {
        "full": {},
        "no_fusion": {"HFIM": False},
        "static_step": {"DyRho": False},
    }
    means: dict[str, float] = {}
    for name, flags in variants.items():
        scores = []
        for seed in seeds:
            cfg_i = dataclasses.replace(tcfg, seed=seed, **flags)
            res = train(dataset, cfg_i, rcfg)
            scores.append(res.val_psnr)
        means[name] = float(np.mean(scores))
        if log is not None:
            log(f"{name}: mean psnr {means[name]:.3f} over seeds {tuple(seeds)}")
    return means


# -- flat key=value config files ----------------------------------------------


def parse_config(path) -> tuple[TrainConfig, RecoveryConfig]:
    """Parse a flat key=value file into (TrainConfig, RecoveryConfig).

    Keys must exactly match the dataclass field names; unknown keys raise a
    UsageError naming all of them. Blank lines and '#' comments allowed.
    """
    t_fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    r_fields = {f.name: f.type for f in dataclasses.fields(RecoveryConfig)}
    t_kwargs, r_kwargs, unknown = {}, {}, []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in t_fields:
            t_kwargs[key] = _coerce(key, value, t_fields[key])
        elif key in r_fields:
            r_kwargs[key] = _coerce(key, value, r_fields[key])
        else:
            unknown.append(key)
    if unknown:
        raise UsageError(f"{path}: unknown config keys: {', '.join(sorted(unknown))}")
    return TrainConfig(**t_kwargs), RecoveryConfig(**r_kwargs)


def _coerce(key: str, value: str, typ) -> object:
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if name == "bool":
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"config key {key}: expected a boolean, got {value!r}")
    if name == "int":
        return int(value)
    if name == "float":
        return float(value)
    return value
