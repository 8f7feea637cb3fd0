"""Command-line surface: evaluate, select, simulate, reproduce-figure, folds.

Exit codes: 0 success, 2 configuration/usage error, 3 numerical failure.
Every artifact written embeds the resolved configuration and master seed;
pass --no-timestamp for byte-identical reruns.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .covmodel import NumericalError, PredictionScenario
from .dataio import TableSchema, load_csv, parse_covariance, parse_predictor
from .estimators import cvc_score, select_model
from .predictors import make_folds
from .simharness import (
    SimDesign,
    run_density_experiment,
    run_selection_experiment,
)

_FIGURE_SIZES = {300: 6, 400: 8, 500: 10}  # n -> cluster count


def _parse_k(text: str, n: int) -> int:
    if text.strip().lower() == "loo":
        return n
    try:
        k = int(text)
    except ValueError:
        raise ValueError(f"--k must be an integer or 'loo', got {text!r}") from None
    return k


def _parse_models(text: str) -> list[tuple[int, ...]]:
    models = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        try:
            models.append(tuple(int(c) for c in part.split(",")))
        except ValueError:
            raise ValueError(f"malformed model column list {part!r}") from None
    if not models:
        raise ValueError("--models must name at least one covariate subset")
    return models


def _load_dataset(args):
    schema = TableSchema.from_json_file(args.schema)
    return load_csv(args.data, schema, add_intercept=args.add_intercept)


def _emit(args, payload: dict):
    if getattr(args, "out", None):
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _cmd_evaluate(args) -> int:
    data = _load_dataset(args)
    cov = parse_covariance(args.cov)
    pred = parse_predictor(args.pred)
    scenario = PredictionScenario.parse(args.scenario)
    folds = make_folds(data.n, _parse_k(args.k, data.n), seed=args.seed)
    est = cvc_score(data, pred, folds, cov, scenario)
    record = {
        "n": data.n,
        "p": data.p,
        "K": folds.K,
        "seed": args.seed,
        "scenario": scenario.tag,
        "predictor": pred.kind,
        "cv": est.cv,
        "correction": est.correction,
        "cv_c": est.cv_c,
    }
    print(json.dumps(record, sort_keys=True))
    print(f"CV         = {est.cv:.6f}")
    print(f"correction = {est.correction:.6f}")
    print(f"CV_c       = {est.cv_c:.6f}   (K={folds.K}, scenario={scenario.tag})")
    config = {
        "mode": "evaluate",
        "data": str(args.data),
        "schema": str(args.schema),
        "cov": args.cov,
        "pred": args.pred,
        "scenario": scenario.tag,
        "k": args.k,
        "add_intercept": args.add_intercept,
    }
    _emit(args, {"config": config, "seed": args.seed, "record": record})
    return 0


def _cmd_select(args) -> int:
    data = _load_dataset(args)
    cov = parse_covariance(args.cov)
    pred = parse_predictor(args.pred)
    scenario = PredictionScenario.parse(args.scenario)
    models = _parse_models(args.models)
    folds = make_folds(data.n, _parse_k(args.k, data.n), seed=args.seed)
    estimates = []
    for cols in models:
        sub = data.subset_columns(cols)
        estimates.append(cvc_score(sub, pred, folds, cov, scenario))
    best = select_model(estimates)
    table = []
    print(f"{'model':>10s} {'cv':>14s} {'correction':>14s} {'cv_c':>14s}")
    for cols, est in zip(models, estimates):
        label = ",".join(map(str, cols))
        table.append(
            {
                "model": label,
                "cv": est.cv,
                "correction": est.correction,
                "cv_c": est.cv_c,
            }
        )
        print(f"{label:>10s} {est.cv:14.6f} {est.correction:14.6f} {est.cv_c:14.6f}")
    print(f"selected: model index {best} (columns {','.join(map(str, models[best]))})")
    config = {
        "mode": "select",
        "data": str(args.data),
        "schema": str(args.schema),
        "cov": args.cov,
        "pred": args.pred,
        "scenario": scenario.tag,
        "k": args.k,
        "models": [list(m) for m in models],
        "add_intercept": args.add_intercept,
    }
    _emit(args, {"config": config, "seed": args.seed, "table": table, "selected": best})
    return 0


def _design_for_n(n: int, args) -> SimDesign:
    if n % 50 != 0:
        raise ValueError("sample size must be a multiple of 50 (I clusters of 50)")
    return SimDesign(I=n // 50)


def _write_report(report, out_dir: Path, stem: str, timestamp: bool):
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_json(out_dir / f"{stem}.json", timestamp=timestamp)
    report.write_csv(out_dir / f"{stem}.csv")
    print(f"wrote {out_dir / (stem + '.csv')}")


def _cmd_simulate(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    mode = cfg.get("mode")
    if mode not in ("simulate-density", "simulate-selection"):
        raise ValueError(
            "config mode must be simulate-density or simulate-selection"
        )
    if "seed" not in cfg:
        raise ValueError("config must pin a master seed (no entropy defaults)")
    design_cfg = cfg.get("design", {})
    if "I" not in design_cfg:
        raise ValueError("config design must set the cluster count I")
    design = SimDesign(
        I=int(design_cfg["I"]),
        J=int(design_cfg.get("J", 5)),
        R=int(design_cfg.get("R", 10)),
    )
    scenario = PredictionScenario.parse(cfg.get("scenario", "all-new"))
    models = [tuple(m) for m in cfg["models"]] if "models" in cfg else None
    common = dict(
        design=design,
        models=models,
        scenario=scenario,
        replications=int(cfg.get("replications", 200)),
        seed=int(cfg["seed"]),
        estimate_variance=bool(cfg.get("estimate_variance", True)),
        gen_reps=int(cfg.get("gen_reps", 200)),
        gen_points=int(cfg.get("gen_points", 200)),
    )
    if mode == "simulate-density":
        report = run_density_experiment(
            pred=parse_predictor(cfg.get("predictor", "gls")), **common
        )
    else:
        preds = [parse_predictor(p) for p in cfg.get("predictors", ["blup", "gls"])]
        report = run_selection_experiment(predictors=preds, **common)
    _write_report(
        report, Path(cfg.get("out_dir", ".")), cfg.get("stem", mode), not args.no_timestamp
    )
    if report.agreement:
        print(json.dumps({"agreement": report.agreement}, sort_keys=True))
    return 0


def _cmd_reproduce_figure(args) -> int:
    out_dir = Path(args.out_dir)
    timestamp = not args.no_timestamp
    sizes = [args.n] if args.n else [300, 400, 500]
    for n in sizes:
        if n not in _FIGURE_SIZES:
            raise ValueError(f"supported sizes are {sorted(_FIGURE_SIZES)}, got {n}")
    saturated = [tuple(range(9))]
    estimate = not args.known_only

    if args.figure == 1:
        n = sizes[-1] if args.n is None else args.n
        report = run_density_experiment(
            _design_for_n(n, args),
            models=saturated,
            scenario=PredictionScenario.all_new(),
            replications=args.reps,
            seed=args.seed,
            estimate_variance=estimate,
            gen_reps=args.gen_reps,
            gen_points=args.gen_points,
        )
        _write_report(report, out_dir, f"figure1_n{n}", timestamp)
    elif args.figure == 2:
        for n in sizes:
            report = run_density_experiment(
                _design_for_n(n, args),
                models=saturated,
                scenario=PredictionScenario.all_new(),
                replications=args.reps,
                seed=args.seed,
                estimate_variance=estimate,
                gen_reps=args.gen_reps,
                gen_points=args.gen_points,
            )
            _write_report(report, out_dir, f"figure2_n{n}", timestamp)
    elif args.figure == 3:
        n = sizes[-1] if args.n is None else args.n
        for kind in ("blup", "gls"):
            report = run_density_experiment(
                _design_for_n(n, args),
                models=saturated,
                scenario=PredictionScenario.share("u"),
                replications=args.reps,
                seed=args.seed,
                pred=parse_predictor(kind),
                estimate_variance=estimate,
                gen_reps=args.gen_reps,
                gen_points=args.gen_points,
            )
            _write_report(report, out_dir, f"figure3_{kind}_n{n}", timestamp)
    elif args.figure == 4:
        for n in sizes:
            report = run_selection_experiment(
                _design_for_n(n, args),
                scenario=PredictionScenario.share("u"),
                replications=args.reps,
                seed=args.seed,
                estimate_variance=estimate,
                gen_reps=args.gen_reps,
                gen_points=args.gen_points,
            )
            _write_report(report, out_dir, f"figure4_n{n}", timestamp)
            print(json.dumps({"n": n, "agreement": report.agreement}, sort_keys=True))
    else:
        raise ValueError("figure must be 1, 2, 3 or 4")
    return 0


def _cmd_folds(args) -> int:
    folds = make_folds(args.n, _parse_k(args.k, args.n), seed=args.seed)
    record = {
        "n": folds.n,
        "K": folds.K,
        "seed": folds.seed,
        "fold_of": folds.fold_of.tolist(),
    }
    print(json.dumps(record, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvcorrect",
        description="Bias-corrected cross-validation for correlated data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_flags(p):
        p.add_argument("--data", required=True, help="input CSV path")
        p.add_argument("--schema", required=True, help="table schema JSON path")
        p.add_argument("--cov", required=True, help="covariance spec, e.g. diagonal:sigma2=1")
        p.add_argument("--pred", required=True, help="ols|gls|ridge[:lambda=..]|blup|gpr")
        p.add_argument("--scenario", required=True, help="all-shared|all-new|share:<names>")
        p.add_argument("--k", default="loo", help="fold count or 'loo'")
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--add-intercept", action="store_true")
        p.add_argument("--out", default=None, help="write a JSON artifact here")
        p.add_argument("--no-timestamp", action="store_true")

    p_eval = sub.add_parser("evaluate", help="CV and corrected CV for one model")
    add_data_flags(p_eval)
    p_eval.set_defaults(func=_cmd_evaluate)

    p_sel = sub.add_parser("select", help="sweep covariate subsets, pick argmin cv_c")
    add_data_flags(p_sel)
    p_sel.add_argument(
        "--models",
        required=True,
        help="semicolon-separated column lists, e.g. '0,1;0,1,2'",
    )
    p_sel.set_defaults(func=_cmd_select)

    p_sim = sub.add_parser("simulate", help="run an experiment from a JSON config")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--no-timestamp", action="store_true")
    p_sim.set_defaults(func=_cmd_simulate)

    p_fig = sub.add_parser(
        "reproduce-figure", help="rerun a clustered-simulation experiment"
    )
    p_fig.add_argument("figure", type=int, choices=(1, 2, 3, 4))
    p_fig.add_argument("--n", type=int, default=None, help="sample size (300/400/500)")
    p_fig.add_argument("--reps", type=int, default=200)
    p_fig.add_argument("--gen-reps", type=int, default=200)
    p_fig.add_argument("--gen-points", type=int, default=200)
    p_fig.add_argument("--seed", type=int, required=True)
    p_fig.add_argument("--out-dir", default=".")
    p_fig.add_argument("--known-only", action="store_true",
                       help="skip the estimated-variance variant")
    p_fig.add_argument("--no-timestamp", action="store_true")
    p_fig.set_defaults(func=_cmd_reproduce_figure)

    p_folds = sub.add_parser("folds", help="print a fold assignment for audit")
    p_folds.add_argument("--n", type=int, required=True)
    p_folds.add_argument("--k", default="loo")
    p_folds.add_argument("--seed", type=int, required=True)
    p_folds.set_defaults(func=_cmd_folds)
    return parser


def run_cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
