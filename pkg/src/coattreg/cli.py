"""Command-line entry point: ``coattreg <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, NumericError, RegError
from .gradcheck import DEFAULT_TOL, run_gradcheck
from .metrics import evaluate_registration
from .network import NetworkConfig, RegistrationNet, init_params
from .phantom import DEFAULT_SHAPE, DEFAULT_SPACING, generate_gt_pair
from .tensor import clear_grad_mutations, no_grad, set_grad_mutation
from .train import (Adam, TrainConfig, aggregate, load_cases, load_checkpoint, save_checkpoint, train,
                    training_samples)
from .volio import Volume, read_volume, write_volume

logger = logging.getLogger("coattreg")


# ---------------------------------------------------------------------------
# argument types
# ---------------------------------------------------------------------------

def parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        dims = ()
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected WxHxD with three positive integers, got {text!r}")
    return dims


def parse_spacing(text: str) -> tuple[float, float, float]:
    try:
        values = tuple(float(p) for p in text.split(","))
    except ValueError:
        values = ()
    if len(values) != 3 or min(values) <= 0:
        raise argparse.ArgumentTypeError(f"expected sx,sy,sz with three positive numbers, got {text!r}")
    return values


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def case_seed(seed: int, index: int) -> int:
    """Per-case seed derived from the run seed and the case index."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint32)[0])


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record) + "\n")
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        seed = case_seed(args.seed, k)
        case = generate_gt_pair(seed, args.dims, args.spacing, args.max_disp)
        case_dir = out / f"case_{k}"
        case_dir.mkdir(exist_ok=True)
        write_volume(case.moving, case_dir / "moving")
        write_volume(case.fixed, case_dir / "fixed")
        labels = np.stack([case.moving_labels.labels, case.fixed_labels.labels]).astype(np.float32)
        write_volume(Volume(labels, args.spacing), case_dir / "labels")
        write_volume(Volume(case.gt_flow.disp.data, args.spacing), case_dir / "gt_flow")
        report = evaluate_registration(case.moving_labels, case.fixed_labels, np.zeros((3,) + tuple(args.dims)))
        _emit({"case": case_dir.name, "seed": seed, "dims": list(args.dims),
               "pre_avg_dice": round(report.avg_dice, 6)})
    return 0


def _network_config(args, in_shape) -> NetworkConfig:
    return NetworkConfig(in_shape=tuple(in_shape), unet_depth=args.unet_depth,
                         unet_channels=tuple(args.unet_channels), seed=args.seed)


def cmd_init(args) -> int:
    config = _network_config(args, args.dims)
    net = RegistrationNet(config, init_params(config, args.scheme, dtype=np.float32))
    save_checkpoint(args.out, net, None, {"iteration": 0, "scheme": args.scheme})
    _emit({"checkpoint": str(args.out), "config_hash": config.digest(), "scheme": args.scheme})
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig(iters=args.iters, lr=args.lr, batch=args.batch, lambda_sim=args.lambda_sim,
                      lambda_kl=args.lambda_kl, prior_lambda=args.prior_lambda, kl_reduction=args.kl_reduction,
                      seed=args.seed, save_every=args.save_every)
    cases = load_cases(args.data)
    shapes = {c.moving.shape for c in cases} | {c.fixed.shape for c in cases}
    if len(shapes) != 1:
        raise DataError(f"all training volumes must share one shape, found {sorted(shapes)}")
    in_shape = shapes.pop()
    samples = training_samples(cases)

    start, adam = 0, None
    if args.resume:
        net, tensors, meta = load_checkpoint(args.resume, NetworkConfig(in_shape=in_shape))
        start = int(meta.get("iteration", 0))
        adam = Adam(net.params, cfg.lr)
        if start > 0:
            adam.load_state(tensors, start)
    elif args.init_checkpoint:
        net, _, _ = load_checkpoint(args.init_checkpoint, NetworkConfig(in_shape=in_shape))
    else:
        config = _network_config(args, in_shape)
        net = RegistrationNet(config, init_params(config, args.init, dtype=np.float32))

    if start >= cfg.iters:
        logger.warning("checkpoint is already at iteration %d >= --iters %d; nothing to do", start, cfg.iters)
        return 0
    for _ in train(net, samples, cfg, adam=adam, start_iter=start, on_record=_emit, checkpoint_path=args.out):
        pass
    return 0


def _read_image(path, what: str) -> Volume:
    volume = read_volume(path)
    if volume.channels != 1:
        raise DataError(f"{what} image must have 1 channel, {path} has {volume.channels}")
    return volume


def _load_pair(args):
    net, _, _ = load_checkpoint(args.ckpt)
    moving = _read_image(args.moving, "moving")
    fixed = _read_image(args.fixed, "fixed")
    for what, vol in (("moving", moving), ("fixed", fixed)):
        if vol.shape != net.config.in_shape:
            raise DataError(f"{what} image shape {vol.shape} does not match checkpoint config {net.config.in_shape}")
    return net, moving, fixed


def cmd_register(args) -> int:
    net, moving, fixed = _load_pair(args)
    rng = np.random.default_rng(args.seed) if args.mode == "sample" else None
    with no_grad():
        reg = net.forward(moving.data, fixed.data, mode=args.mode, rng=rng)
    write_volume(Volume(reg.warped.data, moving.spacing_mm), args.out_warped)
    write_volume(Volume(reg.flow.disp.data, moving.spacing_mm), args.out_flow)
    return 0


def cmd_evaluate(args) -> int:
    net, _, _ = load_checkpoint(args.ckpt)
    cases = load_cases(args.data, with_labels=True)
    records = []
    for case in cases:
        if case.moving.shape != net.config.in_shape:
            raise DataError(f"{case.name}: shape {case.moving.shape} does not match checkpoint config")
        with no_grad():
            reg = net.forward(case.moving.data, case.fixed.data, mode="mean")
        report = evaluate_registration(case.moving_labels, case.fixed_labels, reg.flow)
        records.append({"case": case.name, **report.as_record()})
    result = {"n_cases": len(records), "aggregate": aggregate(records), "cases": records}
    Path(args.report).write_text(json.dumps(result, indent=2) + "\n")
    _emit({"report": str(args.report), "n_cases": len(records),
           "avg_dice": result["aggregate"]["avg_dice"]["mean"]})
    return 0


def cmd_gradcheck(args) -> int:
    if args.perturb_op:
        set_grad_mutation(args.perturb_op, args.perturb_factor)
    try:
        results = run_gradcheck(seed=args.seed, tol=args.tol)
    finally:
        clear_grad_mutations()
    for r in results:
        print(r.line())
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return NumericError.exit_code
    return 0


def cmd_dump_attention(args) -> int:
    net, moving, fixed = _load_pair(args)
    with no_grad():
        f_mov, f_fix = net.extract_features(moving.data, fixed.data)
        att = net.co_attention(f_mov, f_fix)
    scale = [s * (n // q) for s, n, q in zip(moving.spacing_mm, net.config.in_shape, net.config.quarter_shape)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("gate_mov", "gate_fix", "o_mov", "o_fix"):
        write_volume(Volume(getattr(att, name).data, scale), out / name)
    alpha_mov = float(net.params["coatt.alpha_mov"].data.reshape(-1)[0])
    alpha_fix = float(net.params["coatt.alpha_fix"].data.reshape(-1)[0])
    (out / "alpha.txt").write_text(f"alpha_mov {alpha_mov!r}\nalpha_fix {alpha_fix!r}\n")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_arch(p) -> None:
    p.add_argument("--unet-depth", type=_positive_int, default=NetworkConfig.unet_depth)
    p.add_argument("--unet-channels", type=_positive_int, nargs="+", default=list(NetworkConfig.unet_channels),
                   help="channels per U-Net level (depth + 1 values)")


def _add_pair(p) -> None:
    p.add_argument("--ckpt", required=True, help="checkpoint path (with or without .json)")
    p.add_argument("--moving", required=True, help="moving image (RVOL1 stem)")
    p.add_argument("--fixed", required=True, help="fixed image (RVOL1 stem)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coattreg", description="Co-attention guided deformable registration.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic phantom pairs with ground-truth flows")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=_positive_int, default=1)
    p.add_argument("--dims", type=parse_dims, default=DEFAULT_SHAPE, help="WxHxD (default 32x32x16)")
    p.add_argument("--spacing", type=parse_spacing, default=DEFAULT_SPACING, help="sx,sy,sz in mm")
    p.add_argument("--max-disp", type=float, default=3.0, help="peak velocity magnitude in half-resolution voxels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init", help="write a freshly initialised checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=parse_dims, default=DEFAULT_SHAPE)
    p.add_argument("--scheme", choices=("default", "zeros"), default="default")
    p.add_argument("--seed", type=int, default=0)
    _add_arch(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="train with Adam; one JSON record per iteration on stdout")
    p.add_argument("--data", required=True, help="directory of case_<k> folders")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--iters", type=_positive_int, default=500)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=_positive_int, default=2)
    p.add_argument("--lambda-sim", type=float, default=20.0)
    p.add_argument("--lambda-kl", type=float, default=0.1)
    p.add_argument("--prior-lambda", type=float, default=10.0)
    p.add_argument("--kl-reduction", choices=("sum", "voxel_mean"), default="sum")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-every", type=_non_negative_int, default=0)
    source = p.add_mutually_exclusive_group()
    source.add_argument("--resume", help="continue from this checkpoint (weights and optimizer state)")
    source.add_argument("--init-checkpoint", help="start from these weights with a fresh optimizer")
    source.add_argument("--init", choices=("default", "zeros"), default="default", help="initialisation scheme")
    _add_arch(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register one pair with a checkpoint")
    _add_pair(p)
    p.add_argument("--out-warped", required=True)
    p.add_argument("--out-flow", required=True)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--mean", dest="mode", action="store_const", const="mean", help="use the mean velocity (default)")
    mode.add_argument("--sample", dest="mode", action="store_const", const="sample", help="sample the velocity")
    p.set_defaults(mode="mean")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score a checkpoint on labelled cases")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output JSON report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite in double precision")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--perturb-op", help=argparse.SUPPRESS)
    p.add_argument("--perturb-factor", type=float, default=1.001, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-attention", help="export co-attention gate and output maps")
    _add_pair(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except RegError as exc:
        print(f"coattreg {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"coattreg {args.command}: file not found: {exc.filename}", file=sys.stderr)
        return DataError.exit_code
    except OSError as exc:
        print(f"coattreg {args.command}: I/O failure: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
