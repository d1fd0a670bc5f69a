"""Tour of the finite-k forecast-error decomposition.

For several distribution families at one (fit, deploy, k) cell, splits
the mean forecast error into rank + curvature - occupancy + residual in
units of the local quantile slope, and shows the sign flip of the rank
coefficient as k grows. Run with::

    python3 demos/decomposition_tour.py        (about a minute)
"""

import numpy as np

from tailcast import decomposition as dc
from tailcast.distributions import parse_distribution
from tailcast.rng import stream

M, N, K = 2000, 20_000, 10

FAMILIES = (
    "exp:rate=1",
    "uniform:lo=0,hi=1",
    "pareto:alpha=3",
    "gaussian:mu=0,sigma=1",
    "mixture:bulk=exp:rate=1,rare=expshift:rate=1,shift=4,eps=1e-3",
)


def main():
    print(f"cell: fit {M}, deploy {N}, top-{K}  (all components in q' units)\n")
    print(f"{'family':<44} {'rank':>7} {'curv':>7} {'occ':>7} {'resid':>7} {'total':>7}")
    for i, spec in enumerate(FAMILIES):
        rep = dc.empirical_decomposition(parse_distribution(spec), M, N, K,
                                         trials=1500, rng=stream(1, i),
                                         rank_trials=300_000)
        print(f"{spec:<44} {rep.rank:>+7.3f} {rep.curvature:>+7.3f} "
              f"{rep.occupancy:>+7.3f} {rep.residual:>+7.3f} {rep.empirical_total:>+7.3f}")
    print("\nreading the table:")
    print(" * exponential: pure rank bias, curvature and residual near zero")
    print(" * uniform: bounded support, large positive curvature + residual")
    print(" * pareto: convex tail, negative curvature pulls the forecast down")
    print(" * mixture: a rare mode hides from the fit sample (occupancy > 0)")

    print("\nrank coefficient vs k at deploy/fit ratio 10:")
    for k in (5, 10, 50, 200, 500):
        mc = dc.rank_coefficient_mc(k, 10.0, 200_000, stream(1, 100 + k))
        print(f"  k={k:>3}: {mc['b_inv']:+.3f} (se {mc['se']:.3f})")
    print("small k overshoots (positive), large k flips negative: more of the")
    print("fitted window sits below the extrapolation anchor as k grows.")


if __name__ == "__main__":
    main()
