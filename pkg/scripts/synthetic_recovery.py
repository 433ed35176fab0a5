"""Refit cones generated from known parameters and report how well they come back.

    python scripts/synthetic_recovery.py --seeds 10 --dims 2 3 4
"""

import argparse

import numpy as np

from stabcon.scenarios import StabilityDataset, partition
from stabcon.surrogate import SocSurrogate, fit_soc_boundary, verify


def known_cone(rng, n, j):
    return SocSurrogate(
        "syn", 0.6 * rng.standard_normal((j, n)), 0.3 * rng.standard_normal(j), rng.standard_normal(n),
        float(rng.standard_normal()), tuple(f"v{k}" for k in range(n)), 0.0,
    )


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--dims", type=int, nargs="+", default=[2, 3, 4])
    ap.add_argument("--samples", type=int, default=400)
    args = ap.parse_args()

    print(f"{'n':>3} {'seed':>5} {'accuracy':>9} {'omega2 rms':>11} {'gram error':>11}")
    for n in args.dims:
        for seed in range(args.seeds):
            rng = np.random.default_rng(seed)
            truth = known_cone(rng, n, n)
            X = rng.uniform(-1, 1, (args.samples, n))
            g = truth.value(X)
            lim = float(np.median(g))
            ds = partition(StabilityDataset("syn", truth.variables, X, g, lim), lim, float(np.percentile(g, 80) - lim))
            sur = fit_soc_boundary(ds, j=n)
            acc = float(np.mean(sur.accepts(X) == (g >= lim)))
            # the cone is identifiable only up to row order and an orthogonal mix of rows, so compare A^T A
            gram = np.max(np.abs(sur.A.T @ sur.A - truth.A.T @ truth.A))
            print(f"{n:>3} {seed:>5} {acc:>9.1%} {verify(sur, ds).omega2_rms:>11.2e} {gram:>11.2e}")


if __name__ == "__main__":
    main()
