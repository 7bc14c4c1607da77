"""All derivative checks at full size, with per-problem implicit-gradient details.

    python scripts/gradcheck.py [--seed 0]
"""

import argparse

from pnec.verification import CheckReport, check_implicit_gradient, eigen_angle_entropies, run_gradcheck


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    report = run_gradcheck(args.seed)
    print("\n".join(report.lines()))
    details = []
    check_implicit_gradient(20, 20, args.seed, report=CheckReport(), details=details)
    print("problem,rel_err_cov,rel_err_covp,pairing,loss")
    for d in details:
        print(f"{d['problem']},{d['rel_err_cov']:.3e},{d['rel_err_covp']:.3e},{d['pairing']:.3e},{d['loss']:.3e}")
    ent = eigen_angle_entropies(1000, seed=args.seed)
    print(f"eigen-angle entropy: fixed {ent['fixed']:.4f}, random {ent['random']:.4f}")
    print("PASS" if report.passed and ent["random"] > ent["fixed"] else "FAIL")


if __name__ == "__main__":
    main()
