"""Compare the trained model against kriging, natural neighbor and IDW
across a range of sparsity levels on one held-out synthetic tile.

Writes a CSV with one row per (level, method) that can be plotted directly.
"""

import argparse
import sys

from terrafill.evaluate import baseline_interpolators, sparsity_sweep
from terrafill.model import infer
from terrafill.raster import synth_terrain
from terrafill.train import load_checkpoint


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--tile-seed", type=int, default=999999)
    ap.add_argument("--tile-size", type=int, default=32)
    ap.add_argument(
        "--levels",
        default="0.3,0.5,0.7,0.9,0.95",
        help="comma-separated fractions of cells to remove",
    )
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="sparsity_sweep.csv")
    args = ap.parse_args()

    params = load_checkpoint(args.checkpoint).params
    ref = synth_terrain(seed=args.tile_seed, size=args.tile_size)
    levels = tuple(float(s) for s in args.levels.split(","))

    methods = {"model": lambda tile: infer(tile, params)}
    methods.update(baseline_interpolators())
    rows = sparsity_sweep(ref, levels, methods, seed=args.seed)

    lines = ["level,method,rmse,mae,mean"]
    for row in rows:
        lines.append(
            f"{row['level']!r},{row['method']},{row['rmse']!r},"
            f"{row['mae']!r},{row['mean']!r}"
        )
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")

    print(f"{'level':>6}  {'method':<6}  {'rmse_m':>10}")
    for row in rows:
        print(f"{row['level']:>6g}  {row['method']:<6}  {row['rmse']:>10.3f}")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
