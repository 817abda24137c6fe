#!/usr/bin/env python3
"""Strong-scaling sweep of the threaded CG solver on one machine.

Runs the same seeded solve on a fixed global lattice over a list of
process grids, checks that the flop totals agree bit for bit across
rank counts, and prints the aligned report (speedup and efficiency are
derived from the first row).  On a laptop the speedups are modest; the
point is the bookkeeping, not the records.
"""

import argparse
import sys

from wilsoncg import bench


def parse_grid(text):
    grid = tuple(int(d) for d in text.split("x"))
    if len(grid) != 4:
        raise argparse.ArgumentTypeError(f"need 4 extents, got {text!r}")
    return grid


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--global", dest="global_dims", type=parse_grid,
                    default=(8, 8, 8, 16))
    ap.add_argument("--grids", type=lambda s: [parse_grid(g)
                                               for g in s.split(",")],
                    default=[(1, 1, 1, 1), (2, 1, 1, 1), (2, 2, 1, 1)])
    ap.add_argument("--tol", type=float, default=1e-8)
    ap.add_argument("--out", help="also write the rows as CSV")
    args = ap.parse_args()

    records = []
    for grid in args.grids:
        rec = bench.run_benchmark(args.global_dims, grid, tol=args.tol,
                                  transport="concurrent")
        records.append(rec)
        print(f"grid {'x'.join(map(str, grid))}: {rec.iterations} iters, "
              f"{rec.total_time_s:.3f} s, {rec.flops_total} flops",
              file=sys.stderr)

    totals = {rec.flops_total for rec in records}
    if len(totals) != 1:
        sys.exit(f"flop totals differ across grids: {sorted(totals)}")
    print(f"\nflop total identical on every grid: {totals.pop()}\n")
    print(bench.render_table(records))

    if args.out:
        with open(args.out, "w") as fh:
            fh.write(bench.records_to_csv(records))
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
