"""Per-run correlation between the stopping metric and test RMSE.

    python3 scripts/run_correlation.py --kpis arr_delay,pax_delay --out results/corr.csv
"""

import argparse
import csv
import logging

import numpy as np

from xalm.experiments import ExperimentConfig, run_experiment, uncertainty_rmse_correlation


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--oracle", default="mercury6")
    p.add_argument("--kpis", default="arr_delay")
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV of per-repeat correlations")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO)

    rows = []
    for kpi in args.kpis.split(","):
        cfg = ExperimentConfig(oracle={"kind": "synthetic", "id": args.oracle}, kpi=kpi,
                               strategies=("uncertainty",), budget=args.budget, repeats=args.repeats,
                               base_seed=args.seed)
        result = run_experiment(cfg)
        r = [uncertainty_rmse_correlation(rep.histories["uncertainty"]) for rep in result.repeats]
        rows += [(kpi, rep.repeat, v) for rep, v in zip(result.repeats, r)]
        vals = np.array([np.nan if v is None else v for v in r])
        print(f"{kpi:10s} mean {np.nanmean(vals):.3f} std {np.nanstd(vals):.3f}")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kpi", "repeat", "pearson"])
        w.writerows([k, r, "" if v is None else repr(v)] for k, r, v in rows)


if __name__ == "__main__":
    main()
