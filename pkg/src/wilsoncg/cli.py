"""Command line front end for the benchmark harness.

Subcommands: run, sweep, validate-paper, predict, fit-model.  A config
file of key=value lines (keys named like the long flags) can preload any
flag; explicit flags win.  Exit codes: 0 success, 1 usage, 2 solve or
consistency failure, 3 watchdog timeout.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bench, geometry, solver
from .bench import (DEFAULT_BYTES_PER_SITE, FLOP_CONVENTION, BenchError,
                    ModelParams, SweepConfig, Timeout)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2
EXIT_TIMEOUT = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; the contract here is 1
    def error(self, message):
        raise UsageError(message)


def _dims(text: str) -> tuple[int, int, int, int]:
    return geometry.parse_dims(text)


def _grid_list(text: str) -> list[tuple[int, int, int, int]]:
    return [geometry.parse_dims(part) for part in text.split(",") if part]


def _model(text: str) -> ModelParams:
    values = {}
    for part in text.split(","):
        key, sep, val = part.partition("=")
        key = key.strip()
        if not sep or key not in ("r", "alpha", "beta"):
            raise UsageError(f"--model expects r=..,alpha=..,beta=.., got "
                             f"{text!r}")
        try:
            values[key] = float(val)
        except ValueError as exc:
            raise UsageError(f"--model value for {key}: {exc}") from exc
    if set(values) != {"r", "alpha", "beta"}:
        raise UsageError(f"--model needs all of r, alpha, beta, got {text!r}")
    try:
        return ModelParams(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _add_run_flags(p: _Parser) -> None:
    p.add_argument("--global", dest="global_dims", default=None,
                   help="global lattice, e.g. 8x8x8x16")
    p.add_argument("--kappa", default=None)
    p.add_argument("--tol", default=None)
    p.add_argument("--max-iter", dest="max_iter", default=None)
    p.add_argument("--seed", default=None)
    p.add_argument("--transport", default=None,
                   help="serial (1 rank) or concurrent (threaded ranks)")
    p.add_argument("--width", default=None,
                   help="in-rank data-parallel lane count")
    p.add_argument("--out", default=None, help="report file path")
    p.add_argument("--format", dest="fmt", default=None,
                   help="csv, md, or json")
    p.add_argument("--timeout-s", dest="timeout_s", default=None,
                   help="enable the transport watchdog")
    p.add_argument("--config", default=None,
                   help="key=value file preloading these flags")


def build_parser() -> _Parser:
    top = _Parser(prog="bench", description=__doc__.splitlines()[0])
    sub = top.add_subparsers(dest="command", required=True)

    # subparsers inherit _Parser, so their errors raise UsageError too
    run = sub.add_parser("run", help="one timed solve")
    _add_run_flags(run)
    run.add_argument("--grid", default=None, help="process grid, e.g. 2x2x1x2")

    sweep = sub.add_parser("sweep", help="timed solves over several grids")
    _add_run_flags(sweep)
    sweep.add_argument("--grids", default=None,
                       help="comma-separated process grids")

    vp = sub.add_parser("validate-paper",
                        help="consistency-check a measurement table")
    vp.add_argument("--table", required=True, help="table CSV path")

    pr = sub.add_parser("predict", help="evaluate the scaling model")
    pr.add_argument("--model", required=True, help="r=..,alpha=..,beta=..")
    pr.add_argument("--global", dest="global_dims", required=True)
    pr.add_argument("--grid", required=True)
    pr.add_argument("--iters", required=True, type=int)
    pr.add_argument("--bytes-per-site", dest="bytes_per_site", type=int,
                    default=DEFAULT_BYTES_PER_SITE)

    fit = sub.add_parser("fit-model", help="fit the scaling model to rows")
    fit.add_argument("--rows", required=True, help="rows CSV path")
    fit.add_argument("--iters", required=True, type=int)
    fit.add_argument("--bytes-per-site", dest="bytes_per_site", type=int,
                     default=DEFAULT_BYTES_PER_SITE)
    return top


# config-file keys use the long flag names; values reparse like flag text
_CONFIG_DESTS = {
    "global": "global_dims", "grid": "grid", "grids": "grids",
    "kappa": "kappa", "tol": "tol", "max-iter": "max_iter", "seed": "seed",
    "transport": "transport", "width": "width", "out": "out",
    "format": "fmt", "timeout-s": "timeout_s",
}

_RUN_DEFAULTS = {
    "kappa": "0.15", "tol": "1e-8", "max_iter": "10000", "seed": "7",
    "transport": "serial", "width": "1", "fmt": "csv",
}


def _load_config(path: str) -> dict:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        key = key.strip().replace("_", "-")
        if not sep or key not in _CONFIG_DESTS:
            raise UsageError(f"config line {lineno}: bad key in {raw!r}")
        out[_CONFIG_DESTS[key]] = val.strip()
    return out


def _merge_run_args(args) -> dict:
    """Config file under flags under defaults, then typed."""
    merged = dict(_RUN_DEFAULTS)
    if args.config:
        merged.update(_load_config(args.config))
    for dest in ("global_dims", "grid", "grids", "kappa", "tol", "max_iter",
                 "seed", "transport", "width", "out", "fmt", "timeout_s"):
        val = getattr(args, dest, None)
        if val is not None:
            merged[dest] = val
    if merged.get("global_dims") is None:
        raise UsageError("--global is required (flag or config)")
    try:
        out = {
            "global_dims": _dims(merged["global_dims"]),
            "kappa": float(merged["kappa"]),
            "tol": float(merged["tol"]),
            "max_iter": int(merged["max_iter"]),
            "seed": int(merged["seed"]),
            "transport": str(merged["transport"]),
            "width": int(merged["width"]),
            "out": merged.get("out"),
            "fmt": str(merged["fmt"]),
            "timeout_s": (float(merged["timeout_s"])
                          if merged.get("timeout_s") is not None else None),
        }
        if merged.get("grid") is not None:
            out["grid"] = _dims(merged["grid"])
        if merged.get("grids") is not None:
            grids = merged["grids"]
            out["grids"] = (_grid_list(grids) if isinstance(grids, str)
                            else grids)
    except (ValueError, geometry.GeometryError) as exc:
        raise UsageError(str(exc)) from exc
    if out["fmt"] not in ("csv", "md", "json"):
        raise UsageError(f"--format must be csv, md, or json, "
                         f"got {out['fmt']!r}")
    if out["transport"] not in ("serial", "concurrent"):
        raise UsageError(f"--transport must be serial or concurrent, "
                         f"got {out['transport']!r}")
    return out


def _cmd_run(args, stdout) -> int:
    opts = _merge_run_args(args)
    if "grid" not in opts:
        raise UsageError("--grid is required (flag or config)")
    record = bench.run_benchmark(
        opts["global_dims"], opts["grid"], kappa=opts["kappa"],
        tol=opts["tol"], max_iter=opts["max_iter"], seed=opts["seed"],
        transport=opts["transport"], width=opts["width"],
        timeout_s=opts["timeout_s"])
    stdout.write(bench.render_table([record]))
    if opts["out"]:
        Path(opts["out"]).write_text(bench.render([record], opts["fmt"]))
    return EXIT_OK


def _cmd_sweep(args, stdout) -> int:
    opts = _merge_run_args(args)
    if "grids" not in opts or not opts["grids"]:
        raise UsageError("--grids is required (flag or config)")
    cfg = SweepConfig(
        global_dims=opts["global_dims"], grids=opts["grids"],
        kappa=opts["kappa"], tol=opts["tol"], max_iter=opts["max_iter"],
        seed=opts["seed"], transport=opts["transport"],
        width_per_rank=opts["width"], timeout_s=opts["timeout_s"],
        out=opts["out"], fmt=opts["fmt"])
    result = bench.scaling_sweep(cfg)
    stdout.write(result.table_text())
    if result.errors:
        if any(isinstance(e, Timeout) for e in result.errors.values()):
            return EXIT_TIMEOUT
        return EXIT_FAILURE
    return EXIT_OK


def _cmd_validate(args, stdout) -> int:
    report = bench.validate_paper(args.table)
    stdout.write(report.summary() + "\n")
    return EXIT_OK


def _cmd_predict(args, stdout) -> int:
    model = _model(args.model)
    try:
        gdims = _dims(args.global_dims)
        grid = _dims(args.grid)
    except geometry.GeometryError as exc:
        raise UsageError(str(exc)) from exc
    pred = bench.predict(model, gdims, grid, args.iters,
                         args.bytes_per_site)
    stdout.write(
        f"tasks            {pred.tasks}\n"
        f"surface sites    {pred.surface_sites}\n"
        f"time [s]         {pred.time_s:.6g}\n"
        f"  compute        {pred.compute_s:.6g}\n"
        f"  latency        {pred.latency_s:.6g}\n"
        f"  bandwidth      {pred.bandwidth_s:.6g}\n"
        f"efficiency       {pred.efficiency:.4f}\n")
    return EXIT_OK


def _sniff_rows(path: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise bench.ParseError(f"cannot read {path}: {exc}") from exc
    header = text.splitlines()[0] if text else ""
    if header == bench.PAPER_CSV_HEADER:
        return bench.parse_paper_table(text)
    if header == bench.RUN_CSV_HEADER:
        return bench.records_from_csv(text)
    raise bench.ParseError(f"{path}: unrecognized header {header!r}")


def _cmd_fit(args, stdout) -> int:
    rows = _sniff_rows(args.rows)
    fit = bench.fit_model(rows, args.iters, args.bytes_per_site)
    p = fit.params
    stdout.write(f"r     = {p.r:.6e} flop/s per task\n"
                 f"alpha = {p.alpha:.6e} s per message\n"
                 f"beta  = {p.beta:.6e} s per byte\n")
    for i, (t, resid) in enumerate(zip(fit.predicted_s, fit.residuals),
                                   start=1):
        stdout.write(f"row {i}: predicted {t:.6g} s "
                     f"({100 * resid:+.2f}% vs measured)\n")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "validate-paper": _cmd_validate,
    "predict": _cmd_predict,
    "fit-model": _cmd_fit,
}


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args, stdout)
    except UsageError as exc:
        stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except Timeout as exc:
        stderr.write(f"timeout: {exc}\n")
        return EXIT_TIMEOUT
    except (BenchError, geometry.GeometryError, solver.SolverError) as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_FAILURE
    except SystemExit as exc:
        # argparse --help exits 0; anything else is a usage problem
        code = exc.code if isinstance(exc.code, int) else EXIT_USAGE
        return EXIT_OK if code == 0 else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
