"""Outlier robustness of the multi-stage estimator, for several RANSAC scoring variants.

    python scripts/robustness.py [--seeds 20] [--fraction 0.3]
"""

import argparse
import time

from pnec.experiments import ROBUST_SOLVER, robustness_study
from pnec.solver import SolverConfig

VARIANTS = {
    "nec-count-1e-6": SolverConfig(),
    "nec-count-1e-5": SolverConfig(ransac_threshold=1e-5),
    "sampson-count-1e-5": SolverConfig(ransac_threshold=1e-5, ransac_residual="sampson"),
    "sampson-msac-1e-5": ROBUST_SOLVER,
}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--fraction", type=float, default=0.3)
    ap.add_argument("--variant", choices=sorted(VARIANTS), action="append")
    args = ap.parse_args()
    print("variant,recall,precision,clean_e_rot,outlier_e_rot,error_ratio,seconds")
    for name in args.variant or VARIANTS:
        t0 = time.perf_counter()
        r = robustness_study(args.seeds, args.fraction, cfg=VARIANTS[name])
        print(f"{name},{r.mean_recall:.4f},{r.mean_precision:.4f},{r.clean_error.mean():.3e},"
              f"{r.outlier_error.mean():.3e},{r.error_ratio:.3f},{time.perf_counter() - t0:.1f}")


if __name__ == "__main__":
    main()
