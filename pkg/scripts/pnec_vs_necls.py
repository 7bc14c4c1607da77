"""How often the symmetric PNEC beats NEC-LS on the same noisy problems.

Both start from the true pose without RANSAC, so the comparison isolates the
energy rather than initialization.

    python scripts/pnec_vs_necls.py [--seeds 200]
"""

import argparse

import numpy as np

from pnec.metrics import e_rot
from pnec.solver import estimate_pose_multistage
from pnec.synthgen import SceneConfig, generate_problem


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=200)
    ap.add_argument("--points", type=int, default=100)
    args = ap.parse_args()
    wins, pnec, nec = 0, [], []
    for s in range(args.seeds):
        sp = generate_problem(SceneConfig(n_points=args.points, seed=s))
        rep = estimate_pose_multistage(sp.bearing_problem(), init=sp.pose, use_ransac=False)
        a, b = e_rot(rep.pose.R, sp.R), e_rot(rep.stage_poses["nec_ls"].R, sp.R)
        wins += a <= b
        pnec.append(a)
        nec.append(b)
    print(f"PNEC <= NEC-LS on {wins}/{args.seeds} problems ({100 * wins / args.seeds:.1f}%)")
    print(f"mean e_rot: PNEC {np.mean(pnec):.3e} rad, NEC-LS {np.mean(nec):.3e} rad")


if __name__ == "__main__":
    main()
