"""Escape rate of the doubling map through holes [0, h): spectral versus Monte Carlo.

Usage: python scripts/escape_rate.py [--bins 4096] [--particles 1e6]
"""

import argparse
import math

from openevt.interval_maps import IntervalSet, OpenSystem, doubling_map
from openevt.open_dynamics import estimate_alpha_mc
from openevt.ulam import build_partition, spectral_solution

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--bins", type=int, default=4096)
    ap.add_argument("--particles", type=float, default=1e6)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    print("hole       alpha_op       alpha_mc   stderr   escape_rate")
    for h in (1 / 64, 1 / 16, 1 / 8, 1 / 4, 0.3):
        sys_ = OpenSystem(doubling_map(), IntervalSet.of((0.0, h)))
        sol = spectral_solution(sys_, build_partition(sys_, args.bins, markov_mode=True))
        horizon = min(40, int(math.log(1e3 / args.particles) / math.log(sol.alpha)))
        a, se = estimate_alpha_mc(sys_, sol, int(args.particles), horizon, args.seed)
        print(f"[0,{h:.4f}) {sol.alpha:.10f} {a:.6f} {se:.6f} {sol.escape_rate:.6f}")
