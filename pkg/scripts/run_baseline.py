"""GP on a space-filling design vs the training-mean predictor, every KPI.

    python3 scripts/run_baseline.py --n-train 100 --out results/baseline.csv
"""

import argparse
import csv

import numpy as np

from xalm.core import REFERENCE_SPACE, LabeledDataset, format_float, latin_hypercube, make_design
from xalm.experiments import TEST_STREAM, compute_metrics, mean_predictor
from xalm.gbm import GridSearchSpec, fit_gbm, grid_search
from xalm.gp import fit_gp, predict_mean
from xalm.oracle import SyntheticOracle


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--oracle", default="mercury6")
    p.add_argument("--n-train", type=int, default=100)
    p.add_argument("--test-size", type=int, default=2000)
    p.add_argument("--gbm", action="store_true", help="also fit a grid-searched GBM (slow)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    args = p.parse_args()

    oracle = SyntheticOracle(args.oracle)
    x = latin_hypercube(args.n_train, REFERENCE_SPACE, args.seed)
    y = oracle(x)
    tx = make_design(args.test_size, REFERENCE_SPACE, [args.seed, 1], "uniform")
    ty = oracle(tx, row_ids=np.arange(len(tx)), stream=TEST_STREAM)
    rows = []
    for k, kpi in enumerate(oracle.kpis):
        data = LabeledDataset(x, y[:, k])
        models = {"gp": predict_mean(fit_gp(data, REFERENCE_SPACE), tx), "mean_predictor": mean_predictor(y[:, k])(tx)}
        if args.gbm:
            best = grid_search(data, GridSearchSpec(), seed=args.seed).best
            models["gbm"] = fit_gbm(data, None, *best)(tx)
        for name, pred in models.items():
            m = compute_metrics(pred, ty[:, k])
            rows.append([kpi, name, format_float(m.rmse), format_float(m.rrse),
                         "" if m.pearson is None else format_float(m.pearson)])
            print(f"{kpi:10s} {name:15s} rmse {m.rmse:10.4g} rrse {m.rrse:.3f}")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kpi", "model", "rmse", "rrse", "pearson"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
