"""Command-line front end.

Subcommands: run, sweep, theory, parse-check, extract.
Exit codes: 0 success, 2 divergence, 3 config error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from .core import ConfigError
from .harness import (
    DEFAULT_ALPHA_GRID,
    DivergenceError,
    RunConfig,
    export_csv,
    export_json,
    extract_xy,
    grid_search,
    load_config,
    read_csv,
    run_experiment,
)
from .optim import THEORY_FIELDS, TheoryInputs, theorem_constants
from .problems import ParseError, parse_libsvm

EXIT_OK = 0
EXIT_DIVERGED = 2
EXIT_CONFIG = 3
EXIT_IO = 4

_CONFIG_KEYS = tuple(("lambda" if f.name == "lam" else f.name) for f in fields(RunConfig))


def _add_override_flags(parser):
    for key in _CONFIG_KEYS:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}",
                            metavar="V", help=argparse.SUPPRESS)


def _collect_overrides(args):
    out = {}
    for key in _CONFIG_KEYS:
        value = getattr(args, f"cfg_{key}", None)
        if value is not None:
            out[key] = value
    return out


def _print_summary(result):
    cfg = result.config
    last = result.rows[-1]
    print(f"{cfg.algorithm} compressor={cfg.compressor} n={cfg.n_workers} "
          f"T={cfg.T} alpha={cfg.alpha}")
    status = "DIVERGED" if result.diverged else "ok"
    print(f"status={status} iterations_logged={len(result.rows)} "
          f"final_loss={last.loss:.6g} final_grad_norm={last.grad_norm:.6g}")
    print(f"bits_up={last.bits_up} bits_down={last.bits_down} "
          f"total={last.bits_up + last.bits_down}")
    pi_range = result.measured_pi_range()
    if pi_range is not None and pi_range != (0.0, 0.0):
        print(f"measured_pi range: [{pi_range[0]:.6g}, {pi_range[1]:.6g}]")
    if result.diverged:
        print(f"divergence: {result.error}")


def _cmd_run(args) -> int:
    config = load_config(args.config, _collect_overrides(args))
    result = run_experiment(config)
    if config.output:
        export_csv(result.rows, config.output)
        print(f"wrote {config.output}")
    if args.json:
        export_json(result.rows, config, args.json)
        print(f"wrote {args.json}")
    _print_summary(result)
    return EXIT_DIVERGED if result.diverged else EXIT_OK


def _parse_grid(text):
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"bad grid {text!r}; expected comma-separated numbers") from None


def _cmd_sweep(args) -> int:
    config = load_config(args.config, _collect_overrides(args))
    alphas = _parse_grid(args.grid) if args.grid else list(DEFAULT_ALPHA_GRID)
    search = grid_search(config, alphas)
    for alpha, result in search.results:
        status = "diverged" if result.diverged else f"min_grad_norm={result.min_grad_norm():.6g}"
        print(f"alpha={alpha}: {status}")
        if config.output:
            path = Path(config.output)
            out = path.with_name(f"{path.stem}_alpha{alpha}{path.suffix or '.csv'}")
            export_csv(result.rows, out)
    print(f"best alpha={search.best_alpha} "
          f"min_grad_norm={search.best.min_grad_norm():.6g}")
    return EXIT_OK


def _cmd_theory(args) -> int:
    values = {}
    for token in args.inputs:
        if "=" not in token:
            raise ConfigError(f"expected key=value, got {token!r}")
        key, val = token.split("=", 1)
        values[key.strip()] = val.strip()
    try:
        inp = TheoryInputs(
            pi=float(values.pop("pi")),
            L=float(values.pop("L")),
            G=float(values.pop("G")),
            G_inf=float(values.pop("G_inf")),
            sigma=float(values.pop("sigma")),
            nu=float(values.pop("nu")),
            beta1=float(values.pop("beta1")),
            n=int(values.pop("n")),
            N=int(values.pop("N")),
            d=int(values.pop("d")),
            delta_f=float(values.pop("delta_f")),
            epsilon=float(values.pop("epsilon")),
        )
    except KeyError as exc:
        raise ConfigError(f"missing theory input {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if values:
        raise ConfigError(f"unknown theory inputs: {sorted(values)}")
    out = theorem_constants(inp)
    width = max(len(name) for name in THEORY_FIELDS)
    for name in THEORY_FIELDS:
        value = out[name]
        rendered = f"{value}" if isinstance(value, int) else f"{value:.10g}"
        print(f"{name:<{width}}  {rendered}")
    return EXIT_OK


def _cmd_parse_check(args) -> int:
    dataset = parse_libsvm(Path(args.file))
    pos = int((dataset.labels > 0).sum())
    print(f"{args.file}: {dataset.n_samples} samples, d={dataset.dim}, "
          f"+1={pos}, -1={dataset.n_samples - pos}")
    return EXIT_OK


def _cmd_extract(args) -> int:
    rows = read_csv(Path(args.csv))
    pairs = extract_xy(rows, args.x, args.y)
    out = sys.stdout if args.output is None else open(args.output, "w")
    try:
        out.write(f"# {args.x} {args.y}\n")
        for x, y in pairs:
            out.write(f"{x} {y!r}\n" if isinstance(y, float) else f"{x} {y}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdadam",
        description="Deterministic parameter-server simulator with exact bit accounting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--json", metavar="PATH", help="also export rows+config as JSON")
    _add_override_flags(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="grid-search the step size")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--grid", metavar="alpha=A,B,...",
                         help="comma-separated alphas (default: 0.001,0.003,...,0.01)")
    _add_override_flags(p_sweep)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_theory = sub.add_parser("theory", help="print the convergence-constant table")
    p_theory.add_argument("inputs", nargs="+", metavar="key=value",
                          help="pi L G G_inf sigma nu beta1 n N d delta_f epsilon")
    p_theory.set_defaults(func=_cmd_theory)

    p_parse = sub.add_parser("parse-check", help="validate a LibSVM file")
    p_parse.add_argument("file")
    p_parse.set_defaults(func=_cmd_parse_check)

    p_extract = sub.add_parser("extract", help="two-column extract of a metrics CSV")
    p_extract.add_argument("csv")
    p_extract.add_argument("--x", default="bits_up",
                           choices=("iter", "bits_up", "bits_down", "bits_total"))
    p_extract.add_argument("--y", default="grad_norm")
    p_extract.add_argument("--output", metavar="PATH")
    p_extract.set_defaults(func=_cmd_extract)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # accept both --grid alpha=0.001,0.003 and --grid 0.001,0.003
    if getattr(args, "grid", None) and args.grid.startswith("alpha="):
        args.grid = args.grid[len("alpha="):]
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
