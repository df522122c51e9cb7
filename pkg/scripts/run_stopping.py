"""Stopping criterion: labels used and final RMSE vs a full-budget run.

    python3 scripts/run_stopping.py --oracle linear6 --kpi y --threshold 0.001 --out results/stop
"""

import argparse
import logging
from dataclasses import replace

import numpy as np

from xalm.experiments import ExperimentConfig, run_experiment, run_stopping_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--oracle", default="linear6")
    p.add_argument("--kpi", default="y")
    p.add_argument("--threshold", type=float, default=0.001)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO)

    base = ExperimentConfig(oracle={"kind": "synthetic", "id": args.oracle}, kpi=args.kpi,
                            strategies=("uncertainty",), budget=args.budget, repeats=args.repeats,
                            base_seed=args.seed)
    stopped = run_stopping_experiment(
        replace(base, stopping={"threshold": args.threshold, "patience": args.patience}), f"{args.out}/stopped"
    )
    full = run_experiment(base, f"{args.out}/full")
    n = np.array([o.n_simulations for o in stopped])
    rmse = np.array([o.rmse_test for o in stopped])
    rmse_full = np.array([r.final["uncertainty"].rmse for r in full.repeats])
    print(f"simulations used  {n.mean():.1f} ({n.std():.1f}) of {args.budget}")
    print(f"RMSE at stop      {rmse.mean():.3f} ({rmse.std():.3f})")
    print(f"RMSE full budget  {rmse_full.mean():.3f} ({rmse_full.std():.3f})")


if __name__ == "__main__":
    main()
