"""Command-line entry point: ``xalm <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every file a
command writes lands under its ``--out`` directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .core import REFERENCE_SPACE, DatasetError, make_design, read_csv_matrix
from .experiments import (
    ExperimentConfig,
    run_experiment,
    run_reuse_experiment,
    run_stopping_experiment,
)
from .gbm import GBMModel
from .gp import TrainedGP
from .oracle import SYNTHETIC_IDS, OracleError, SyntheticOracle, make_oracle
from .shapley import MAX_EXACT_DIM, default_background, explain_set, summary_export
from .svg import RenderError, render_svg

log = logging.getLogger("xalm")

SEED_ENV = "XALM_SEED"


class UsageError(Exception):
    """Bad flag combination detected after parsing; maps to exit code 2."""


# -- argument parsing -----------------------------------------------------------


def _csv_list(text: str) -> list[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return items


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _add_oracle_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--oracle", help=f"synthetic oracle id ({', '.join(SYNTHETIC_IDS)})")
    g.add_argument("--oracle-cmd", help="external simulator command speaking the CSV protocol")
    p.add_argument("--kpis", type=_csv_list, help="KPI names produced by --oracle-cmd")
    p.add_argument("--noise-seed", type=int, help="noise seed for synthetic oracles")
    p.add_argument("--oracle-timeout", type=float, help="seconds per external oracle call")


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    _add_oracle_flags(p)
    p.add_argument("--kpi", help="KPI to learn")
    p.add_argument("--strategies", type=_csv_list, help="comma-separated: uncertainty,random")
    p.add_argument("--budget", type=_positive_int, help="total labelled points per run")
    p.add_argument("--init-size", type=_positive_int, help="initial random design size")
    p.add_argument("--repeats", type=_positive_int)
    p.add_argument("--seed", type=int, help=f"base seed (overridden by ${SEED_ENV})")
    p.add_argument("--pool-size", type=_positive_int)
    p.add_argument("--test-size", type=_positive_int)
    p.add_argument("--jobs", type=_positive_int, help="concurrent repeats (default 1)")
    p.add_argument("--config", help="JSON config or a previous manifest.json; flags take precedence")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--quiet", action="store_true", help="no summary on stdout")
    p.add_argument("--shap-reference", action="store_true", default=None,
                   help="track SHAP RMSE against a GBM reference")
    p.add_argument("--shap-train-size", type=_positive_int)
    p.add_argument("--shap-eval-size", type=_positive_int)
    p.add_argument("--shap-background", type=_positive_int)
    p.add_argument("--shap-every", type=_positive_int, help="SHAP RMSE every k iterations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xalm", description="Explainable active learning metamodels.")
    parser.add_argument("--version", action="version", version=f"xalm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="active vs passive learning curves")
    _add_experiment_flags(p)

    p = sub.add_parser("stop-run", help="active learning with the uncertainty stopping criterion")
    _add_experiment_flags(p)
    p.add_argument("--threshold", type=float, help="stopping threshold on metric changes")
    p.add_argument("--patience", type=_positive_int, help="consecutive small changes required")

    p = sub.add_parser("reuse", help="learn one KPI actively, refit the others on its simulations")
    _add_experiment_flags(p)
    p.add_argument("--anchor", help="KPI driving the acquisition")

    p = sub.add_parser("explain", help="SHAP values of a saved GP or GBM")
    p.add_argument("--model", required=True, help="model JSON written by run or fit")
    p.add_argument("--data", required=True, help="CSV of rows to explain (header required)")
    p.add_argument("--background", help="CSV of background rows (default: training inputs, max 100)")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--exact", action="store_true", help="enumerate all coalitions")
    mode.add_argument("--samples", type=_positive_int, help="coalition budget per row")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--svg", action="store_true", help="also render a summary chart")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("render", help="SVG chart from a curves or SHAP summary CSV")
    p.add_argument("inputs", nargs="+", help="curves_<strategy>.csv files or one SHAP summary CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--name", help="output file name (default: <input stem>.svg)")
    p.add_argument("--metric", choices=("rmse", "shap_rmse"), default="rmse")
    p.add_argument("--title")

    p = sub.add_parser("oracle-check", help="probe an oracle and validate its answers")
    _add_oracle_flags(p)
    p.add_argument("--probe", type=_positive_int, default=4, help="rows in the probe batch")
    p.add_argument("--seed", type=int, default=0)
    return parser


# -- configuration merge ----------------------------------------------------------


def _load_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    # a manifest carries the merged config under "config"
    return dict(data["config"]) if "config" in data and isinstance(data["config"], dict) else data


def _resolve_seed(flag_seed):
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return flag_seed


def _oracle_spec(args, base: dict | None) -> dict:
    if args.oracle_cmd:
        if not args.kpis:
            raise UsageError("--oracle-cmd needs --kpis")
        spec = {"kind": "external", "command": args.oracle_cmd, "kpis": list(args.kpis),
                "feature_names": list(REFERENCE_SPACE.names)}
        if args.oracle_timeout is not None:
            spec["timeout"] = args.oracle_timeout
        return spec
    if args.oracle is not None:
        spec = {"kind": "synthetic", "id": args.oracle}
    else:
        spec = dict(base) if base else {"kind": "synthetic", "id": "mercury6"}
    if spec.get("kind", "synthetic") == "synthetic":
        if spec.get("id") not in SYNTHETIC_IDS:
            raise UsageError(f"unknown oracle {spec.get('id')!r}; valid ids: {', '.join(SYNTHETIC_IDS)}")
        if args.noise_seed is not None:
            spec["noise_seed"] = args.noise_seed
    return spec


def merged_config(args) -> tuple[ExperimentConfig, dict]:
    """Defaults < config file < flags. Returns the config and extra mode settings."""
    file_cfg = _load_config_file(args.config) if getattr(args, "config", None) else {}
    file_cfg.pop("mode", None)
    extra = {k: file_cfg.pop(k) for k in ("anchor",) if k in file_cfg}
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = sorted(set(file_cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    oracle = _oracle_spec(args, file_cfg.get("oracle"))
    file_cfg["oracle"] = oracle
    overrides = {
        "kpi": args.kpi,
        "strategies": args.strategies,
        "budget": args.budget,
        "init_size": args.init_size,
        "repeats": args.repeats,
        "base_seed": _resolve_seed(args.seed),
        "pool_size": args.pool_size,
        "test_size": args.test_size,
        "jobs": args.jobs,
    }
    for key, value in overrides.items():
        if value is not None:
            file_cfg[key] = value

    shap = file_cfg.get("shap_reference")
    shap_flags = {
        "train_size": args.shap_train_size,
        "eval_size": args.shap_eval_size,
        "background_size": args.shap_background,
        "every": args.shap_every,
    }
    if args.shap_reference or any(v is not None for v in shap_flags.values()):
        shap = dict(shap or {})
        shap.update({k: v for k, v in shap_flags.items() if v is not None})
    file_cfg["shap_reference"] = shap

    if args.command == "stop-run":
        stopping = dict(file_cfg.get("stopping") or {"threshold": 0.001, "patience": 3})
        if args.threshold is not None:
            stopping["threshold"] = args.threshold
        if args.patience is not None:
            stopping["patience"] = args.patience
        file_cfg["stopping"] = stopping
    if args.command == "reuse" and args.anchor is not None:
        extra["anchor"] = args.anchor

    try:
        config = ExperimentConfig.from_dict(file_cfg)
        config.criterion()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    for s in config.strategies:
        if s not in ("uncertainty", "random"):
            raise UsageError(f"unknown strategy {s!r}; valid: uncertainty, random")
    kpis = _oracle_kpis(config.oracle)
    if args.command == "reuse":
        anchor = extra.get("anchor", config.kpi)
        if anchor not in kpis:
            raise UsageError(f"unknown anchor KPI {anchor!r}; valid: {', '.join(kpis)}")
        extra["anchor"] = anchor
    elif config.kpi not in kpis:
        if args.kpi is None and len(kpis) == 1:
            config = replace(config, kpi=kpis[0])
        else:
            raise UsageError(f"unknown KPI {config.kpi!r}; valid: {', '.join(kpis)}")
    return config, extra


def _oracle_kpis(spec: dict) -> list[str]:
    if spec.get("kind", "synthetic") == "external":
        return list(spec["kpis"])
    return SyntheticOracle(spec["id"]).kpis


# -- manifest ---------------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _artifacts(out: Path) -> list[str]:
    return sorted(
        p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"
    )


def write_manifest(out: Path, command: str, config: dict, seeds: dict, started: str) -> Path:
    manifest = {
        "tool": "xalm",
        "version": __version__,
        "command": command,
        "config": config,
        "seeds": seeds,
        "artifacts": _artifacts(out),
        "started": started,
        "finished": _now(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _echo(path: Path, quiet: bool) -> None:
    if not quiet:
        sys.stdout.write(path.read_text(encoding="utf-8"))


# -- commands -----------------------------------------------------------------------


def _save_model(model, path: Path, feature_names) -> None:
    doc = model.to_dict()
    doc["feature_names"] = list(feature_names)
    path.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def _seeds(config: ExperimentConfig) -> dict:
    return {"base_seed": config.base_seed,
            "repeat_seeds": [config.base_seed + r for r in range(config.repeats)]}


def cmd_run(args) -> int:
    config, _ = merged_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    log.info("run: %s on %s, %d repeats", config.kpi, config.oracle.get("id", "external"), config.repeats)
    result = run_experiment(config, out)
    models = out / "models"
    models.mkdir(exist_ok=True)
    names = getattr(make_oracle(config.oracle), "space", REFERENCE_SPACE).names
    for s, h in result.repeats[0].histories.items():
        _save_model(h.gp, models / f"gp_{s}.json", names)
    curve_files = [out / f"curves_{s}.csv" for s in config.strategies]
    render_svg(curve_files, out / "curves.svg")
    if config.shap_reference is not None:
        render_svg(curve_files, out / "curves_shap.svg", metric="shap_rmse")
    write_manifest(out, "run", {"mode": "run", **config.to_dict()}, _seeds(config), started)
    _echo(out / "summary.csv", args.quiet)
    return 0


def cmd_stop_run(args) -> int:
    config, _ = merged_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    run_stopping_experiment(config, out)
    write_manifest(out, "stop-run", {"mode": "stop-run", **config.to_dict()}, _seeds(config), started)
    _echo(out / "stopping.csv", args.quiet)
    return 0


def cmd_reuse(args) -> int:
    config, extra = merged_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    result = run_reuse_experiment(config, extra["anchor"], out)
    with open(out / "oracle_calls.csv", "w", encoding="utf-8") as fh:
        fh.write("repeat,oracle_calls\n")
        for r, n in enumerate(result.oracle_calls):
            fh.write(f"{r},{n}\n")
    snapshot = {"mode": "reuse", **config.to_dict(), "anchor": extra["anchor"]}
    write_manifest(out, "reuse", snapshot, _seeds(config), started)
    _echo(out / "reuse.csv", args.quiet)
    return 0


def _load_model(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"model file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None
    kind = doc.get("model")
    if kind == "gp":
        model = TrainedGP.from_dict(doc)
    elif kind == "gbm":
        model = GBMModel.from_dict(doc)
    else:
        raise ValueError(f"{path}: field 'model' must be 'gp' or 'gbm', got {kind!r}")
    names = doc.get("feature_names")
    return model, kind, names


def _feature_columns(header: list[str], matrix: np.ndarray, names, dim: int | None, path: str) -> np.ndarray:
    if names is not None:
        for i, name in enumerate(names):
            if i >= len(header):
                raise DatasetError(f"{path}: missing feature column {name!r}")
            if header[i] != name:
                raise DatasetError(f"{path}: column {i + 1} is {header[i]!r}, model expects feature {name!r}")
        return matrix[:, : len(names)]
    if dim is not None:
        if len(header) < dim:
            raise DatasetError(f"{path}: {len(header)} columns, model expects {dim} features")
        return matrix[:, :dim]
    return matrix


def cmd_explain(args) -> int:
    model, kind, names = _load_model(args.model)
    dim = model.dim if kind == "gp" else (len(names) if names else None)
    header, matrix = read_csv_matrix(args.data)
    if matrix.shape[0] == 0:
        raise DatasetError(f"{args.data}: no rows to explain")
    x = _feature_columns(header, matrix, names, dim, args.data)
    names = list(names) if names else header[: x.shape[1]]
    if args.background:
        bh, bm = read_csv_matrix(args.background)
        background = _feature_columns(bh, bm, names, x.shape[1], args.background)
    elif kind == "gp":
        background = default_background(model.input_transform.inverse(model.train_inputs))
    else:
        background = default_background(x)
    if args.samples is None and x.shape[1] > MAX_EXACT_DIM:
        raise UsageError(f"{x.shape[1]} features: exact enumeration limited to {MAX_EXACT_DIM}; use --samples")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    expl = explain_set(model, x, background, n_coalitions=args.samples, seed=args.seed, feature_names=names)
    summary, ranking = summary_export(expl, out / "shap.csv")
    if args.svg:
        render_svg(summary, out / "shap.svg")
    snapshot = {
        "mode": "explain",
        "model": os.path.abspath(args.model),
        "data": os.path.abspath(args.data),
        "background": os.path.abspath(args.background) if args.background else None,
        "samples": args.samples,
        "exact": args.samples is None,
    }
    write_manifest(out, "explain", snapshot, {"seed": args.seed}, started)
    _echo(ranking, args.quiet)
    return 0


def cmd_render(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = args.name or Path(args.inputs[0]).stem + ".svg"
    if Path(name).name != name:
        raise UsageError("--name must be a plain file name inside --out")
    render_svg(args.inputs, out / name, metric=args.metric, title=args.title)
    return 0


def cmd_oracle_check(args) -> int:
    spec = _oracle_spec(args, None)
    oracle = make_oracle(spec)
    x = make_design(args.probe, REFERENCE_SPACE, args.seed, "lhs")
    y = np.atleast_2d(oracle(x))
    if y.shape != (args.probe, len(oracle.kpis)):
        raise OracleError(f"expected {args.probe}x{len(oracle.kpis)} outputs, got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise OracleError("oracle returned non-finite values")
    print(f"ok: {args.probe} rows, KPIs {','.join(oracle.kpis)}")
    return 0


COMMANDS = {
    "run": cmd_run,
    "stop-run": cmd_stop_run,
    "reuse": cmd_reuse,
    "explain": cmd_explain,
    "render": cmd_render,
    "oracle-check": cmd_oracle_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "quiet", False) and not args.verbose:
        logging.getLogger().setLevel(logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"xalm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, RenderError, OracleError) as exc:
        print(f"xalm {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
