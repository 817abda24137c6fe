#!/usr/bin/env python3
"""Fit the alpha-beta communication model to the bundled 64^3 x 96 runs.

The three smallest configurations of the bundled strong-scaling table
pin down per-task compute rate r, message latency alpha, and inverse
bandwidth beta.  Extrapolating to the largest configuration then shows
why doubling the task count past the sweet spot made the measured solve
slower: the latency term grows linearly with tasks while the remaining
compute per task is already tiny.
"""

import argparse

from wilsoncg import bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=1000,
                    help="iteration count behind the measured times")
    args = ap.parse_args()

    rows = bench.validate_paper(bench.load_bundled_table(2))
    print(rows.summary())

    table = bench.load_bundled_table(2)
    fit = bench.fit_model(table[:3], iterations=args.iters)
    p = fit.params
    print(f"\nfitted on rows 1-3: r = {p.r:.4e} flop/s per task, "
          f"alpha = {p.alpha:.4e} s, beta = {p.beta:.4e} s/byte")
    for row, resid in zip(table[:3], fit.residuals):
        print(f"  {row.cores:>6} cores: measured {row.total_time_s:7.2f} s, "
              f"residual {resid:+.2e}")

    gdims = (64, 64, 64, 96)
    near = bench.predict(p, gdims, (4, 8, 16, 16), args.iters)
    far = bench.predict(p, gdims, (8, 8, 16, 16), args.iters)
    print(f"\npredicted, same lattice:")
    for label, pred, row in (("near", near, table[2]), ("far", far, table[3])):
        print(f"  {pred.tasks:>6} tasks ({row.cores:>6} cores): "
              f"{pred.time_s:6.2f} s predicted vs {row.total_time_s:5.2f} s "
              f"measured, comm share {100 * pred.comm_share:.0f}%")
    if far.time_s > near.time_s:
        print("doubling the tasks is predicted to be slower, matching the "
              "measurement.")


if __name__ == "__main__":
    main()
