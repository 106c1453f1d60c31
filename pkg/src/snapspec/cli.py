"""Command-line surface.

Exit codes: 0 success, 2 file/config format errors, 3 geometry mismatches.
Error messages name the offending field. All commands are deterministic
under fixed seeds.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_net
from .datasets import make_dataset
from .errors import FileFormatError, ShapeError, UsageError
from .fileio import export_band_pngs, read_cube, read_meas, write_cube, write_meas
from .gradcheck import check_network
from .metrics import psnr, ssim
from .optics import DispersionRule, forward
from .sensing import init_latent, load_mask
from .training import parse_config, train


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snapspec",
                                description="snapshot spectral compressive imaging toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="compress a cube file into a measurement")
    sim.add_argument("--cube", required=True)
    group = sim.add_mutually_exclusive_group(required=True)
    group.add_argument("--mask")
    group.add_argument("--mask-random", type=int, metavar="SEED")
    sim.add_argument("--noise", type=float, default=0.0, metavar="SIGMA")
    sim.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train on a directory of cube files")
    tr.add_argument("--data", required=True)
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True)

    rec = sub.add_parser("reconstruct", help="recover a cube from a measurement")
    rec.add_argument("--meas", required=True)
    rec.add_argument("--mask", required=True)
    rec.add_argument("--checkpoint", required=True)
    rec.add_argument("--out", required=True)
    rec.add_argument("--png", default=None, metavar="DIR")

    ev = sub.add_parser("eval", help="PSNR/SSIM of one cube file against another")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--ref", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    gc.add_argument("--config", required=True)

    mk = sub.add_parser("make-dataset", help="generate synthetic cubes")
    mk.add_argument("--out", required=True)
    mk.add_argument("--count", type=int, required=True)
    mk.add_argument("--geometry", required=True, metavar="HxWxC")
    mk.add_argument("--seed", type=int, default=0)
    return p


def _cmd_simulate(args) -> int:
    cube = read_cube(args.cube)
    c, h, w = cube.shape
    if args.mask is not None:
        mask = load_mask(args.mask)
        seed = 0
    else:
        mask = init_latent(h, w, seed=args.mask_random).mask
        seed = args.mask_random
    if mask.shape != (h, w):
        raise ShapeError(f"mask extents {mask.shape} != cube spatial extents ({h}, {w})")
    rule = DispersionRule.unit(c)
    meas = forward(cube, mask, rule, noise_sigma=args.noise,
                   rng=np.random.default_rng(seed))
    write_meas(args.out, meas)
    print(f"cube {h}x{w}x{c} -> measurement {meas.shape[0]}x{meas.shape[1]} "
          f"(noise sigma {args.noise})")
    return 0


def _cmd_train(args) -> int:
    tcfg, rcfg = parse_config(args.config)
    data_dir = Path(args.data)
    files = sorted(data_dir.glob("*.hsc"))
    if not files:
        raise FileFormatError(f"{data_dir}: no .hsc cube files found")
    dataset = [read_cube(f) for f in files]
    variant = "base (fixed mask)" if not tcfg.learn_mask else "joint mask optimization"
    print(f"training on {len(dataset)} cubes; variant: {variant}")
    res = train(dataset, tcfg, rcfg, out_dir=args.out, resume=True, log=print)
    print(f"final val_psnr={res.val_psnr:.4f} val_ssim={res.val_ssim:.4f}")
    return 0


def _cmd_reconstruct(args) -> int:
    meas = read_meas(args.meas)
    mask = load_mask(args.mask)
    net, _ = load_net(args.checkpoint)
    c = net.cfg.C
    h, w = mask.shape
    if meas.shape != (h, w + c - 1):
        raise ShapeError(f"measurement shape {meas.shape} != expected "
                         f"({h}, {w + c - 1}) for checkpoint C={c} and mask {h}x{w}")
    cube = net.reconstruct(meas, mask, DispersionRule.unit(c), clamp=True)
    write_cube(args.out, cube)
    if args.png:
        paths = export_band_pngs(cube, args.png)
        print(f"wrote {len(paths)} band images to {args.png}")
    print(f"reconstructed cube {h}x{w}x{c} -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    pred = read_cube(args.pred)
    ref = read_cube(args.ref)
    if pred.shape != ref.shape:
        raise ShapeError(f"cube shapes differ: pred {pred.shape} vs ref {ref.shape}")
    print(f"psnr={psnr(pred, ref):.4f} ssim={ssim(pred, ref):.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    _, rcfg = parse_config(args.config)
    report = check_network(rcfg)
    tol = 1e-3
    worst_name, worst = max(report.items(), key=lambda kv: kv[1])
    failed = False
    for name, err in report.items():
        status = "PASS" if err <= tol else "FAIL"
        failed = failed or err > tol
        print(f"{status} {name}: rel_err={err:.3e}")
    print(f"worst group: {worst_name} rel_err={worst:.3e} (tolerance {tol})")
    return 1 if failed else 0


def _cmd_make_dataset(args) -> int:
    try:
        h, w, c = (int(t) for t in args.geometry.lower().split("x"))
    except ValueError:
        raise UsageError(f"--geometry must be HxWxC, got {args.geometry!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cubes = make_dataset(args.count, h, w, c, seed=args.seed)
    for i, cube in enumerate(cubes):
        write_cube(out / f"cube_{i:04d}.hsc", cube)
    if h % 4 or w % 4:
        print(f"warning: extents {h}x{w} not divisible by 4; "
              "deeper enhancer settings will reject this geometry")
    print(f"wrote {len(cubes)} cubes ({h}x{w}x{c}) to {out}")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "reconstruct": _cmd_reconstruct,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "make-dataset": _cmd_make_dataset,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (FileFormatError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
