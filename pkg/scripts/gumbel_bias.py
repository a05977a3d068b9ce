"""Finite-n bias of the Gumbel regression estimate of the extremal index.

Fits -log P(M_n <= u_n(tau)) against tau using the exact operator EVD curve
for the golden-mean instance, and the Monte Carlo estimate at n = 32.

Usage: python scripts/gumbel_bias.py [--particles 1e7]
"""

import argparse
import math
from fractions import Fraction

import numpy as np

from openevt.extremes import boundary_levels, operator_evd, theta_gumbel
from openevt.interval_maps import IntervalSet, OpenSystem, doubling_map
from openevt.ulam import build_partition, spectral_solution

TAU = [0.5, 1.0, 2.0]


def operator_slope(sys_, sol, part, z, n):
    y = []
    for t in TAU:
        lv = boundary_levels(sol, part, z, t, [n])
        y.append(-math.log(operator_evd(sys_, sol, part, z, lv)[0]))
    return np.polyfit(TAU, y, 1)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--particles", type=float, default=1e7)
    ap.add_argument("--seed", type=int, default=1234)
    args = ap.parse_args()
    sys_ = OpenSystem(doubling_map(), IntervalSet.of((0.0, 0.25)))
    part = build_partition(sys_, 4096, markov_mode=True)
    sol = spectral_solution(sys_, part)
    z = Fraction(1, 3)
    print(f"theta = {(math.sqrt(5) - 1) / 2:.6f}")
    print("n        slope      intercept")
    for n in (16, 32, 64, 128, 256, 1024, 4096, 16384):
        slope, icpt = operator_slope(sys_, sol, part, z, n)
        print(f"{n:<8d} {slope:.6f}   {icpt:+.6f}")
    g = theta_gumbel(sys_, sol, z, 32, TAU, int(args.particles), args.seed)
    print(f"monte carlo n=32: {g.theta:.4f} +- {g.stderr:.4f} ({g.survivors} survivors)")
