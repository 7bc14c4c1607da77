"""First-order residual variance against Monte Carlo across focal lengths.

    python scripts/variance_sweep.py [--samples 1000000]
"""

import argparse

from pnec.montecarlo import VarianceSweepConfig, sweep_csv, variance_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--samples", type=int, default=1_000_000)
    ap.add_argument("--points", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--plain", action="store_true", help="plain Monte Carlo, no antithetic / moment matching")
    args = ap.parse_args()
    cfg = VarianceSweepConfig(n_samples=args.samples, n_points=args.points, seed=args.seed,
                              moment_matching=not args.plain)
    print(sweep_csv(variance_sweep(cfg)), end="")


if __name__ == "__main__":
    main()
