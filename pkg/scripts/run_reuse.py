"""Active learning on one KPI, then refit every other KPI on the same simulations.

    python3 scripts/run_reuse.py --anchor holding --budget 100 --repeats 30 --out results/reuse
"""

import argparse
import logging

from xalm.experiments import ExperimentConfig, run_reuse_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--oracle", default="mercury6")
    p.add_argument("--anchor", default="holding")
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO)

    cfg = ExperimentConfig(oracle={"kind": "synthetic", "id": args.oracle}, strategies=("uncertainty",),
                           budget=args.budget, repeats=args.repeats, base_seed=args.seed, jobs=args.jobs)
    result = run_reuse_experiment(cfg, args.anchor, args.out)
    print(f"{'kpi':10s} {'reused':>6s} {'rmse':>10s} {'mean pred':>10s} {'rrse':>6s}")
    for r in result.rows:
        print(f"{r.kpi:10s} {str(r.reused):>6s} {r.rmse_mean:10.4g} {r.mean_predictor_rmse:10.4g} {r.rrse_mean:6.3f}")
    print(f"oracle calls per repeat: {sorted(set(result.oracle_calls))}")


if __name__ == "__main__":
    main()
