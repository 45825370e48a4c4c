"""Command-line front end.

Exit codes: 0 success, 2 validation failure, 3 I/O or file-format failure,
4 a training run that must stay finite diverged.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import harness
from .container import load_quantized, save_quantized
from .qlinalg import matmul_sweep
from .quantizer import QuantConfig, quantize_tensor
from .sparsifier import SparsityConfig, bits_per_element, sparsify, ternarize
from .tensor import Tensor, TensorFormatError, load_tensor, save_tensor

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_ASSERTION = 0, 2, 3, 4
MODES = {"toward-mean": "toward-mean", "zero": "zero-mask-baseline", "structured": "structured-mn"}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _parse_mn(text: str) -> tuple[int, int]:
    try:
        m, n = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected M:N, got {text!r}") from None
    return m, n


def sparsity_from_args(mode, fraction, mn):
    """Build a SparsityConfig from --mode/--sparsity/--mn, or None."""
    if mn is not None and (mode in (None, "structured")):
        return SparsityConfig.structured(*mn)
    if mode == "structured":
        raise ValueError("--mode structured needs --mn M:N")
    if fraction is None:
        if mode is not None or mn is not None:
            raise ValueError(f"--mode {mode} needs --sparsity FRACTION")
        return None
    return SparsityConfig(MODES[mode or "toward-mean"], fraction=fraction)


def _quant_config(args, bits=None, block=None, lam=None) -> QuantConfig:
    return QuantConfig(
        bits=bits if bits is not None else args.bits,
        block_size=block if block is not None else args.block_size,
        lam=lam if lam is not None else args.lam,
        epsilon=args.epsilon,
        rounding=args.rounding,
        coeff_precision=args.coeff_precision,
    )


def _dump(obj, path=None, echo=None):
    text = json.dumps(obj, indent=2)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    print(text if echo is None else json.dumps(echo, indent=2))


def _add_quant_flags(p, multi=False):
    nargs = "+" if multi else None
    p.add_argument("--bits", type=int, nargs=nargs, default=[4] if multi else 4)
    p.add_argument("--block-size", type=int, nargs=nargs, default=[128] if multi else 128)
    p.add_argument("--lambda", dest="lam", type=float, nargs=nargs, default=[0.01] if multi else 0.01)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--rounding", choices=["half-to-even", "half-away-from-zero"], default="half-to-even")
    p.add_argument("--coeff-precision", choices=["full", "e5m2-simulated"], default="full")
    p.add_argument("--axis", type=int, default=-1)


def _add_sparsity_flags(p, multi=False):
    p.add_argument("--mode", choices=sorted(MODES))
    if multi:
        p.add_argument("--sparsity", nargs="+", default=["none"],
                       help="entries: none, a fraction (uses --mode), or M:N")
    else:
        p.add_argument("--sparsity", type=float, help="fraction of entries to replace")
        p.add_argument("--mn", type=_parse_mn, help="structured sparsity, e.g. 2:4")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denoq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="quantize a DQT1 tensor into a DQZ1 container")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    _add_quant_flags(p)
    _add_sparsity_flags(p)

    p = sub.add_parser("dequantize", help="reconstruct a DQZ1 container into a DQT1 tensor")
    p.add_argument("input")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sparsify", help="sparsify a DQT1 tensor block by block")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--block-size", type=int, default=128)
    p.add_argument("--axis", type=int, default=-1)
    p.add_argument("--ternary", action="store_true", help="with --mn: report sign codes and bias-free scale")
    p.add_argument("--lambda", dest="lam", type=float, default=0.01)
    _add_sparsity_flags(p)

    p = sub.add_parser("sweep", help="reconstruction metrics over a config grid (CSV)")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    _add_quant_flags(p, multi=True)
    _add_sparsity_flags(p, multi=True)

    p = sub.add_parser("matmul", help="blockwise quantized matmul error sweep (JSON)")
    p.add_argument("x")
    p.add_argument("w")
    p.add_argument("--report")
    _add_quant_flags(p, multi=True)

    p = sub.add_parser("train", help="desk-scale lambda stability experiment (JSON)")
    p.add_argument("--task", choices=harness.TASKS, default="synthetic-regression")
    p.add_argument("--bits", type=int, nargs="+", default=[1, 1],
                   help="weight bits, or ACT WEIGHT")
    p.add_argument("--act-bits", type=int)
    p.add_argument("--lambda", dest="lam", type=float, nargs="+", default=[0.0, 0.01, 1.0])
    p.add_argument("--block-size", type=int, default=128)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.add_argument("--losses-csv")
    return parser


def _load(path) -> Tensor:
    try:
        return load_tensor(path)
    except TensorFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from None
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror or exc}", EXIT_IO) from None


def cmd_quantize(args) -> int:
    cfg = _quant_config(args)
    sparsity = sparsity_from_args(args.mode, args.sparsity, args.mn)
    t = _load(args.input)
    qt, summary = quantize_tensor(t, args.axis, cfg, sparsity)
    save_quantized(qt, args.out)
    metrics = summary.to_dict()
    metrics.update(config=_config_dict(cfg), sparsity=sparsity.label() if sparsity else None)
    _dump(metrics, args.report)
    return EXIT_OK


def _config_dict(cfg: QuantConfig) -> dict:
    return dict(bits=cfg.bits, block_size=cfg.block_size, lam=cfg.lam, epsilon=cfg.epsilon,
                rounding=cfg.rounding.value, coeff_precision=cfg.coeff_precision.value)


def cmd_dequantize(args) -> int:
    try:
        qt = load_quantized(args.input)
    except TensorFormatError as exc:
        raise CliError(f"{args.input}: {exc}", EXIT_IO) from None
    save_tensor(Tensor.from_array(qt.dequantize()), args.out)
    return EXIT_OK


def cmd_sparsify(args) -> int:
    from .quantizer import join_blocks, split_blocks
    from .tensor import from_rows, normalize_axis, partition, to_rows

    sparsity = sparsity_from_args(args.mode, args.sparsity, args.mn)
    if sparsity is None:
        raise ValueError("sparsify needs --sparsity FRACTION or --mn M:N")
    if args.ternary and sparsity.m is None:
        raise ValueError("--ternary requires --mn")
    t = _load(args.input)
    arr = np.asarray(t, dtype=np.float64).reshape(t.shape or (1,))
    axis = normalize_axis(args.axis, arr.ndim)
    rows, moved = to_rows(arr, axis)
    part = partition(rows.shape[1], args.block_size)
    ys, kept, recon = [], [], []
    for piece in split_blocks(rows, part):
        y, pattern = sparsify(piece, sparsity)
        ys.append(y)
        kept.append(pattern.kept)
        if args.ternary:
            q, a, _ = ternarize(y, args.lam)
            recon.append(np.asarray(a)[..., None] * q)
    y = join_blocks(ys)
    result = join_blocks(recon) if args.ternary else y
    save_tensor(Tensor.from_array(from_rows(result, moved, axis)), args.out)
    metrics = dict(
        sparsity=sparsity.label(),
        replaced=int(join_blocks(kept).size - np.count_nonzero(join_blocks(kept))),
        elements=int(y.size),
        delta_sq=float(np.sum((y - rows) ** 2)),
        mse=float(np.mean((result - rows) ** 2)),
    )
    if sparsity.m is not None:
        metrics["bits_per_element"] = bits_per_element(sparsity, 1 if args.ternary else 8)
    _dump(metrics, args.report)
    return EXIT_OK


def _sweep_sparsity(entry: str, mode):
    if entry == "none":
        return None
    if ":" in entry:
        return SparsityConfig.structured(*_parse_mn(entry))
    return sparsity_from_args(mode if mode != "structured" else None, float(entry), None)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("DQ_NUM_THREADS", os.cpu_count() or 1)))
    except ValueError:
        raise ValueError("DQ_NUM_THREADS must be an integer") from None


SWEEP_FIELDS = ["bits", "block_size", "lambda", "sparsity", "mse", "max_abs_err",
                "effective_bits", "mean_kappa", "max_kappa", "degenerate_blocks"]


def sweep_rows(arr, grid, axis, base: QuantConfig):
    def run(point):
        bits, block, lam, sparsity = point
        _, s = quantize_tensor(arr, axis, base.replace(bits=bits, block_size=block, lam=lam), sparsity)
        return dict(bits=bits, block_size=block, **{"lambda": lam},
                    sparsity=sparsity.label() if sparsity else "none",
                    mse=s.mse, max_abs_err=s.max_abs_err, effective_bits=s.effective_bits,
                    mean_kappa=s.mean_kappa, max_kappa=s.max_kappa,
                    degenerate_blocks=s.degenerate_blocks)

    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        # map preserves grid order regardless of completion order
        return list(pool.map(run, grid))


def cmd_sweep(args) -> int:
    sparsities = [_sweep_sparsity(s, args.mode) for s in args.sparsity]
    base = _quant_config(args, bits=args.bits[0], block=args.block_size[0], lam=args.lam[0])
    for bits, block, lam in itertools.product(args.bits, args.block_size, args.lam):
        base.replace(bits=bits, block_size=block, lam=lam)  # validate every grid point up front
    t = _load(args.input)
    grid = list(itertools.product(args.bits, args.block_size, args.lam, sparsities))
    rows = sweep_rows(np.asarray(t, dtype=np.float64), grid, args.axis, base)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return EXIT_OK


def cmd_matmul(args) -> int:
    x, w = _load(args.x), _load(args.w)
    base = _quant_config(args, bits=args.bits[0], block=args.block_size[0], lam=args.lam[0])
    try:
        reports = matmul_sweep(x, w, args.bits, args.block_size, args.lam, base)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_VALIDATION) from None
    _dump([r.to_dict() for r in reports], args.report)
    return EXIT_OK


def cmd_train(args) -> int:
    if len(args.bits) == 2:
        act_bits, weight_bits = args.bits
    elif len(args.bits) == 1:
        weight_bits = args.bits[0]
        act_bits = args.act_bits if args.act_bits is not None else weight_bits
    else:
        raise ValueError("--bits takes WEIGHT or ACT WEIGHT")
    if args.steps < 1:
        raise ValueError("--steps must be >= 1")
    reports = harness.run_experiment(
        task=args.task, precision=(act_bits, weight_bits), lambda_values=args.lam,
        steps=args.steps, seed=args.seed, block_size=args.block_size, lr=args.lr,
    )
    summary = [dict(label=r.label, finite=r.finite, initial_loss=r.initial_loss,
                    final_loss=r.to_dict()["final_loss"]) for r in reports]
    _dump([r.to_dict() for r in reports], args.report, echo=summary)
    if args.losses_csv:
        harness.losses_to_csv(reports, args.losses_csv)
    unstable = [r.label for r in reports if not r.finite and (r.config["lam"] or 0) > 0]
    if unstable or not reports[0].finite:
        print(f"non-finite training: {unstable or [reports[0].label]}", file=sys.stderr)
        return EXIT_ASSERTION
    return EXIT_OK


COMMANDS = {
    "quantize": cmd_quantize,
    "dequantize": cmd_dequantize,
    "sparsify": cmd_sparsify,
    "sweep": cmd_sweep,
    "matmul": cmd_matmul,
    "train": cmd_train,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
