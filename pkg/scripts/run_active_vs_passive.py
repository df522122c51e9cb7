"""Uncertainty sampling vs random sampling on one KPI, with SHAP tracking.

    python3 scripts/run_active_vs_passive.py --kpi pax_delay --budget 30 --repeats 30 --out results/avp
"""

import argparse
import logging

import numpy as np

from xalm.experiments import ExperimentConfig, ShapReferenceConfig, run_experiment
from xalm.svg import render_svg


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--oracle", default="mercury6")
    p.add_argument("--kpi", default="pax_delay")
    p.add_argument("--init-size", type=int, default=10)
    p.add_argument("--budget", type=int, default=30)
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shap-every", type=int, default=5)
    p.add_argument("--no-shap", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO)

    cfg = ExperimentConfig(
        oracle={"kind": "synthetic", "id": args.oracle},
        kpi=args.kpi,
        init_size=args.init_size,
        budget=args.budget,
        repeats=args.repeats,
        base_seed=args.seed,
        shap_reference=None if args.no_shap else ShapReferenceConfig(every=args.shap_every),
        jobs=args.jobs,
    )
    result = run_experiment(cfg, args.out)
    curves = [f"{args.out}/curves_{s}.csv" for s in cfg.strategies]
    render_svg(curves, f"{args.out}/curves.svg")
    if cfg.shap_reference is not None:
        render_svg(curves, f"{args.out}/curves_shap.svg", metric="shap_rmse")

    for s in cfg.strategies:
        final = np.array([r.final[s].rmse for r in result.repeats])
        print(f"{s:12s} final test RMSE {final.mean():.3f} ({final.std():.3f})")
        if cfg.shap_reference is not None:
            shap = np.array([r.histories[s].rmse_shap[-1] for r in result.repeats])
            print(f"{'':12s} final SHAP RMSE {shap.mean():.3f} ({shap.std():.3f})")


if __name__ == "__main__":
    main()
