"""Compile the bundled 9-bus case, then check the constraints out of sample.

The fit uses the configured n_c midpoints.  The held-out check evaluates
every metric again on a different grid (``--nc-test``, default 5) whose
availability levels never appear in the training set, and counts how often
each exported cone accepts an infeasible point or rejects a feasible one.

    python scripts/run_ninebus.py --out out/ninebus
"""

import argparse
import logging
from pathlib import Path

from stabcon.io import bundled_path, load, load_constraint
from stabcon.pipeline import run_pipeline, slug
from stabcon.scenarios import enumerate_scenarios, evaluate_metric_dataset, metric_targets, nadir_dataset, partition
from stabcon.surrogate import SocSurrogate, verify

logger = logging.getLogger("run_ninebus")


def held_out_datasets(config, model, n_c, seed):
    scenarios = list(enumerate_scenarios(model, n_c, config.budget, seed, config.power_factor))
    for metric in config.metrics:
        if metric.startswith("h"):
            continue
        if metric == "g6":
            yield "g6", nadir_dataset(config.frequency, config.g6_samples, seed)
            continue
        for t in metric_targets(metric, model, gscr_limit=config.gscr_limit, scc_limit=config.scc_limit,
                                dv_limit=config.dv_limit, fault_buses=config.fault_buses):
            yield t.name, evaluate_metric_dataset(t, scenarios, model)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/ninebus")
    ap.add_argument("--nc-test", type=int, default=5)
    ap.add_argument("--seed", type=int, default=11, help="seed for the held-out draws")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    config, model = load(bundled_path("ninebus_config.json"), bundled_path("ninebus.json"))
    bundle = run_pipeline(config.replace(out=args.out), model)
    print((bundle.out_dir / "report.txt").read_text())

    print(f"held-out check: n_c={args.nc_test}, seed={args.seed}")
    print(f"{'target':<16} {'n':>6} {'accepts infeasible':>19} {'rejects feasible':>17} {'band rejects':>13}")
    for name, ds in held_out_datasets(config, model, args.nc_test, args.seed):
        path = Path(args.out) / "constraints" / f"{slug(name)}.json"
        if not path.exists():
            print(f"{name:<16} no constraint (see report)")
            continue
        sur = SocSurrogate.from_dict(load_constraint(path))
        rep = verify(sur, partition(ds, sur.g_lim, sur.nu or 0.0))
        c = rep.counts
        print(f"{name:<16} {rep.n_samples:>6} {c['omega1']['misclassified']:>19} "
              f"{c['omega3']['misclassified']:>17} {c['omega2']['misclassified']:>13}")
    return bundle.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
