"""``splitprec`` command line: error-bench, absorb, train-toy, memory-model.

Exit status: 0 on success, 2 on a configuration or dataset error, 3 on
an I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

from . import __version__
from .floatbits import FORMATS, RoundMode, max_extra_bits
from .experiments import (
    DEFAULT_SCENARIOS,
    DatasetError,
    absorb,
    error_bench,
    load_dataset,
    memory_table,
    rows_to_csv,
    train_toy,
)
from .memory import OPTIMIZER_STATE_BYTES

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3
SPLIT_FORMATS = ("fp16", "bf16", "fp8e5m2")
# flags that change how a run executes but not what it outputs
_NOT_FINGERPRINTED = {"out", "emit", "jobs", "func"}


class ConfigError(ValueError):
    pass


def _positive(kind):
    def parse(text):
        try:
            v = kind(float(text)) if kind is int else kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
        if kind is int and float(text) != v:
            raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
        if not v > 0 or v != v or v == float("inf"):
            raise argparse.ArgumentTypeError(f"must be positive and finite: {text!r}")
        return v

    parse.__name__ = f"positive {kind.__name__}"
    return parse


def _list_of(item):
    def parse(text):
        parts = [p for p in text.split(",") if p.strip()]
        if not parts:
            raise argparse.ArgumentTypeError("empty list")
        return [item(p.strip()) for p in parts]

    parse.__name__ = "comma-separated list"
    return parse


def _non_negative_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0: {text!r}")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=_non_negative_int, default=None,
                   help="RNG seed (required whenever stochastic rounding is used)")
    p.add_argument("--out", metavar="PATH", help="write results here instead of stdout")
    p.add_argument("--emit", choices=("csv", "json"), default="csv")
    p.add_argument("--jobs", type=_positive(int), default=1, help="run variants in N worker processes")


def _precision(p: argparse.ArgumentParser, k_default) -> None:
    p.add_argument("--format", choices=SPLIT_FORMATS, default="fp16")
    p.add_argument("--extra-bits", type=_non_negative_int, default=k_default, metavar="K")
    p.add_argument("--round", choices=("rtz", "stochastic"), default=None,
                   help="rounding of the split storage (default: both)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitprec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("error-bench", help="accumulation error of split storage variants")
    _precision(p, 8)
    p.add_argument("--n", type=_list_of(_positive(int)), default=[10, 100, 1000, 10_000, 100_000],
                   help="element counts, comma separated")
    p.add_argument("--cond", type=_list_of(float), default=[], help="condition numbers for the conditioned panel")
    p.add_argument("--cond-n", type=_positive(int), default=10_000, help="elements per conditioned sum")
    p.add_argument("--trials", type=_positive(int), default=30)
    _common(p)
    p.set_defaults(func=cmd_error_bench)

    p = sub.add_parser("absorb", help="repeated small increments onto 1.0")
    _precision(p, None)
    p.add_argument("--n", type=_positive(int), default=1000, help="number of increments")
    p.add_argument("--increment", type=float, default=1e-4)
    p.add_argument("--start", type=float, default=1.0)
    _common(p)
    p.set_defaults(func=cmd_absorb)

    p = sub.add_parser("train-toy", help="train a small MLP under several precision variants")
    _precision(p, None)
    p.add_argument("--variants", type=_list_of(str), default=["fp32", "amp", "fp16", "fp16+8", "fp16+13", "bf16+16"],
                   help="precision variants, e.g. fp32,amp,fp16,fp16+8,bf16+16-rstoc")
    p.add_argument("--data", metavar="CSV", help="dataset file (x1,...,xd,label); default: synthetic blobs")
    p.add_argument("--samples", type=_positive(int), default=2000, help="synthetic dataset size (<= 10000)")
    p.add_argument("--hidden", type=_positive(int), default=32)
    p.add_argument("--iters", type=_positive(int), default=10, help="epochs")
    p.add_argument("--batch", type=_positive(int), default=64)
    p.add_argument("--lr", type=_positive(float), default=0.05)
    p.add_argument("--optimizer", choices=sorted(OPTIMIZER_STATE_BYTES), default="sgdm")
    p.add_argument("--grad-precision", choices=("fp32", "fmt"), default="fp32")
    p.add_argument("--fused-backward", choices=("on", "off"), default="on")
    p.add_argument("--forward", choices=("low", "full"), default="low",
                   help="forward reads the high words through the format (low) or full float32 values")
    p.add_argument("--warm-start", type=_non_negative_int, default=0, metavar="EPOCHS",
                   help="start every variant from float32 weights pre-trained for EPOCHS")
    p.add_argument("--warm-lr", type=_positive(float), default=0.05, help="learning rate of the warm start")
    _common(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("memory-model", help="closed-form bytes per parameter")
    p.add_argument("--scenarios", type=_list_of(str), default=list(DEFAULT_SCENARIOS))
    p.add_argument("--optimizer", type=_list_of(str), default=["sgdm", "adam"],
                   help=f"any of {','.join(sorted(OPTIMIZER_STATE_BYTES))}")
    p.add_argument("--params", type=_positive(int), default=2_000_000_000)
    p.add_argument("--layers", type=_positive(int), default=24)
    p.add_argument("--grad-precision", choices=("fp32", "fmt"), default="fp32")
    p.add_argument("--activation-bytes", type=_non_negative_int, default=0, help="total activation bytes")
    p.add_argument("--baseline", default="amp")
    _common(p)
    p.set_defaults(func=cmd_memory_model)
    return parser


# ---------------------------------------------------------------------------


def _modes(args):
    if args.round is None:
        return (RoundMode.RTZ, RoundMode.STOCHASTIC)
    return (RoundMode(args.round),)


def _require_seed(args, stochastic: bool) -> int:
    if stochastic and args.seed is None:
        raise ConfigError("--seed is required for runs that use stochastic rounding")
    return 0 if args.seed is None else args.seed


def cmd_error_bench(args):
    modes = _modes(args)
    seed = _require_seed(args, RoundMode.STOCHASTIC in modes)
    return error_bench(FORMATS[args.format], args.extra_bits, modes, seed, sorted(set(args.n)),
                       args.cond, args.trials, args.cond_n, args.jobs)


def cmd_absorb(args):
    modes = _modes(args)
    seed = _require_seed(args, RoundMode.STOCHASTIC in modes)
    fmt = FORMATS[args.format]
    ks = sorted({0, 8, max_extra_bits(fmt)} | ({args.extra_bits} if args.extra_bits is not None else set()))
    return absorb(fmt, ks, modes, seed, args.n, args.increment, args.start)


def cmd_train_toy(args):
    variants = list(args.variants)
    if args.extra_bits is not None:
        suffix = "-rstoc" if args.round == "stochastic" else ("-rtz" if args.extra_bits == 0 else "")
        token = f"{args.format}+{args.extra_bits}{suffix}"
        if token not in variants:
            variants.append(token)
    seed = _require_seed(args, any("rstoc" in v for v in variants))
    data = None
    if args.data:
        data = load_dataset(args.data)
    return train_toy(variants, data, args.samples, args.hidden, args.iters, args.batch, args.lr,
                     args.optimizer, seed, args.fused_backward == "on", args.grad_precision,
                     args.forward, args.warm_start, args.warm_lr, args.jobs)


def cmd_memory_model(args):
    for o in args.optimizer:
        if o not in OPTIMIZER_STATE_BYTES:
            raise ConfigError(f"unknown optimizer {o!r}")
    return memory_table(args.scenarios, args.optimizer, args.params, args.layers,
                        args.grad_precision, args.activation_bytes, args.baseline)


# ---------------------------------------------------------------------------


def fingerprint(args) -> tuple[dict, str]:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_FINGERPRINTED}
    blob = json.dumps(config, sort_keys=True, default=str)
    return config, hashlib.sha256(blob.encode()).hexdigest()[:16]


def render(args, rows) -> str:
    config, digest = fingerprint(args)
    if args.emit == "json":
        doc = {"command": args.command, "fingerprint": digest, "config": config, "rows": rows}
        return json.dumps(doc, indent=2, default=str) + "\n"
    comment = f"splitprec {__version__} {args.command} fingerprint={digest} config={json.dumps(config, sort_keys=True, default=str)}"
    return rows_to_csv(rows, comment)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        rows = args.func(args)
    except OSError as exc:
        where = exc.filename or getattr(args, "data", None) or "?"
        print(f"splitprec: I/O error: {where}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DatasetError, ValueError) as exc:
        print(f"splitprec: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    text = render(args, rows)
    if args.out:
        try:
            with open(args.out, "w", newline="") as f:
                f.write(text)
        except OSError as exc:
            print(f"splitprec: I/O error: {args.out}: {exc.strerror or exc}", file=sys.stderr)
            return EXIT_IO
    else:
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
