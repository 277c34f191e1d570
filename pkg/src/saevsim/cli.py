"""Command-line front end.

Every subcommand reads a scenario config, runs one stage of the
workflow, and drops deterministic artifacts (JSON, CSV, PNG) into the
--out directory: no clocks, no hostnames, so identical inputs give
identical bytes.  Exit codes: 0 on success, 2 for configuration
problems, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import report as rpt
from .demand import bin_demand
from .design import SystemDesign, load_station_plan, save_station_plan, \
    station_plan, system_cost, vehicle_perf
from .fleetsim import RandomMotion, Relocation, Simulation, run_simulation
from .optimize import (DesignSpace, SearchBudget, generate_training_data,
                       load_training_records, optimize_params,
                       optimize_system, save_training_records,
                       sensitivity_sweep)
from .relocation import ModelingParams
from .scenario import (ScenarioBundle, load_scenario, example_station_weights,
                       write_example_scenario)
from .surrogate import (extract_features, load_model, predict_params,
                        save_model, train_surrogate)


class ConfigError(Exception):
    """Bad or missing configuration; maps to exit code 2."""


# ======================================================================
# helpers
# ======================================================================

def _load_bundle(args) -> ScenarioBundle:
    if not args.config:
        raise ConfigError("--config is required for this command")
    try:
        bundle = load_scenario(args.config)
    except (FileNotFoundError, json.JSONDecodeError, KeyError,
            ValueError) as exc:
        raise ConfigError(f"cannot load scenario: {exc}") from exc
    return bundle


def _seed(args, bundle: ScenarioBundle | None = None) -> int:
    if args.seed is not None:
        return int(args.seed)
    return bundle.seed if bundle is not None else 0


def _outdir(args) -> Path:
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _meta(bundle: ScenarioBundle | None, seed: int) -> dict:
    return {"config_digest": bundle.digest if bundle else "",
            "seed": seed, "tool_version": __version__}


def _budget(args) -> SearchBudget:
    return SearchBudget(population=args.population,
                        generations=args.generations,
                        local_evals=args.local_evals)


def _int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v != ""]


def _station_weights(bundle: ScenarioBundle) -> np.ndarray:
    scn = bundle.scenario
    if scn.intensity is not None:
        return example_station_weights(scn.net, scn.grid, scn.intensity)
    counts = bin_demand(scn.fixed_events, scn.grid, scn.net,
                        bin_minutes=scn.bin_minutes,
                        horizon_bins=int(np.ceil(
                            scn.duration_min / scn.bin_minutes)))
    fake_intensity = counts.astype(float)
    return example_station_weights(scn.net, scn.grid, fake_intensity)


def _write_report_artifacts(out: Path, stem: str, result, bundle, seed,
                            want_csv: bool) -> None:
    scn = bundle.scenario
    rep = result.report
    rpt.write_json(out / f"{stem}.json",
                   {**_meta(bundle, seed), "report": rep})
    if want_csv:
        rpt.write_report_csv(out / f"{stem}.csv", rep)
        if result.log:
            rpt.write_event_log_csv(out / f"{stem}_events.csv", result.log)
    rpt.fig_wait_histogram(rep, out / f"{stem}_wait_hist.png")
    rpt.fig_wait_by_bin(rep, out / f"{stem}_wait_by_bin.png",
                        bin_minutes=scn.bin_minutes)
    rpt.fig_station_map(scn.net, scn.station_nodes,
                        out / f"{stem}_stations.png", grid=scn.grid)


# ======================================================================
# subcommands
# ======================================================================

def cmd_simulate(args) -> int:
    bundle = _load_bundle(args)
    seed = _seed(args, bundle)
    out = _outdir(args)
    result = run_simulation(bundle.scenario, bundle.strategy, seed=seed,
                            config_digest=bundle.digest,
                            tool_version=__version__)
    _write_report_artifacts(out, "report", result, bundle, seed,
                            want_csv=args.format == "csv")
    rep = result.report
    print(f"simulate: {rep.served}/{rep.requests_total} served, "
          f"mean wait {rep.mean_wait_min:.2f} min, "
          f"effective {rep.effective_mean_wait_min:.2f} min, "
          f"{rep.total_vehicle_km:.0f} veh-km -> {out}")
    return 0


def cmd_baseline(args) -> int:
    bundle = _load_bundle(args)
    seed = _seed(args, bundle)
    out = _outdir(args)
    result = run_simulation(bundle.scenario, RandomMotion(), seed=seed,
                            config_digest=bundle.digest,
                            tool_version=__version__)
    _write_report_artifacts(out, "baseline", result, bundle, seed,
                            want_csv=args.format == "csv")
    rep = result.report
    print(f"baseline: {rep.served}/{rep.requests_total} served, "
          f"mean wait {rep.mean_wait_min:.2f} min, "
          f"effective {rep.effective_mean_wait_min:.2f} min -> {out}")
    return 0


def cmd_optimize_params(args) -> int:
    bundle = _load_bundle(args)
    seed = _seed(args, bundle)
    out = _outdir(args)
    eval_seeds = _int_list(args.eval_seeds) if args.eval_seeds else [seed]
    mask = bundle.strategy.mask if isinstance(bundle.strategy, Relocation) \
        else None
    res = optimize_params(bundle.scenario, mask=mask, budget=_budget(args),
                          seed=seed, eval_seeds=eval_seeds,
                          workers=args.workers)
    rpt.write_json(out / "params.json",
                   {**_meta(bundle, seed), "params": res.params.to_dict(),
                    "wait_min": res.wait_min,
                    "evaluations": res.evaluations})
    if args.format == "csv":
        rpt.write_trace_csv(out / "trace.csv", res.trace)
    rpt.fig_search_trace(res.trace, out / "convergence.png")
    rpt.fig_function_shapes(res.params, out / "shape_functions.png")
    print(f"optimize-params: wait {res.wait_min:.3f} min after "
          f"{res.evaluations} evaluations -> {out}")
    return 0


def cmd_gen_data(args) -> int:
    bundle = _load_bundle(args)
    seed = _seed(args, bundle)
    out = _outdir(args)
    params = bundle.strategy.params \
        if isinstance(bundle.strategy, Relocation) else None
    mask = bundle.strategy.mask \
        if isinstance(bundle.strategy, Relocation) else None
    records = generate_training_data(
        bundle.scenario, days=args.days, budget=_budget(args), seed=seed,
        carrier_params=params, mask=mask, settle_min=args.settle_min,
        workers=args.workers)
    save_training_records(records, out / "training.jsonl")
    rpt.write_json(out / "training_meta.json",
                   {**_meta(bundle, seed), "records": len(records),
                    "degenerate": sum(r.degenerate for r in records),
                    "days": args.days})
    print(f"gen-data: {len(records)} windows "
          f"({sum(r.degenerate for r in records)} degenerate) -> "
          f"{out / 'training.jsonl'}")
    return 0


def cmd_train_surrogate(args) -> int:
    if not args.data:
        raise ConfigError("--data is required for train-surrogate")
    try:
        records = load_training_records(args.data)
    except (FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot load training data: {exc}") from exc
    out = _outdir(args)
    seed = args.seed if args.seed is not None else 0
    try:
        model = train_surrogate(records, k=args.k, seed=seed,
                                learner=args.learner,
                                aggregate=args.aggregate, alpha=args.alpha,
                                tool_version=__version__)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    save_model(model, out / "model.json")
    rpt.write_json(out / "model_metrics.json",
                   {"seed": seed, "tool_version": __version__,
                    "metrics": model.metrics})
    usable = [r for r in records if not r.degenerate]
    truth = np.array([r.target for r in usable])
    preds = np.array([model.predict_vector(extract_features(r.snapshot))
                      for r in usable])
    rpt.fig_prediction_scatter(
        truth, preds, out / "prediction_scatter.png",
        names=["f1 x1", "f1 x2", "f2 x1", "f2 x2"])
    print(f"train-surrogate: {model.metrics['n_train']} train / "
          f"{model.metrics['n_test']} test windows, "
          f"held-out RMSE {model.metrics['rmse_all']:.3f} -> {out}")
    return 0


def cmd_predict_params(args) -> int:
    if not args.model:
        raise ConfigError("--model is required for predict-params")
    try:
        model = load_model(args.model)
    except (FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot load model: {exc}") from exc
    out = _outdir(args)
    if args.snapshot:
        with open(args.snapshot, encoding="utf-8") as fh:
            snap = json.load(fh)
        seed = args.seed if args.seed is not None else 0
        meta = {"seed": seed, "tool_version": __version__}
    else:
        bundle = _load_bundle(args)
        seed = _seed(args, bundle)
        sim = Simulation(bundle.scenario, bundle.strategy, seed=seed,
                         record_log=False)
        t = args.at_bin * bundle.scenario.bin_minutes
        sim.run_to_min(t)
        snap = sim.capture(args.at_bin).to_jsonable()
        meta = _meta(bundle, seed)
    params = predict_params(model, snap)
    rpt.write_json(out / "predicted_params.json",
                   {**meta, "params": params.to_dict()})
    rpt.fig_function_shapes(params, out / "predicted_shapes.png")
    print(f"predict-params: f1={params.f1_params} f2={params.f2_params} "
          f"-> {out}")
    return 0


def cmd_plan_stations(args) -> int:
    bundle = _load_bundle(args)
    out = _outdir(args)
    weights = _station_weights(bundle)
    plan = station_plan(bundle.scenario.net, weights,
                        range(1, args.max_p + 1), method=args.method)
    save_station_plan(plan, out / "stations.json")
    p_show = min(bundle.scenario.design.n_cs, args.max_p)
    rpt.fig_station_map(bundle.scenario.net, plan[p_show],
                        out / "stations.png", grid=bundle.scenario.grid)
    print(f"plan-stations: plans for p=1..{args.max_p} -> "
          f"{out / 'stations.json'}")
    return 0


def cmd_optimize_system(args) -> int:
    bundle = _load_bundle(args)
    seed = _seed(args, bundle)
    out = _outdir(args)
    raw_space = bundle.config.get("design_space", {})

    def axis(name, default):
        flag = getattr(args, name, None)
        if flag:
            return tuple(_int_list(flag))
        if name in raw_space:
            return tuple(int(v) for v in raw_space[name])
        return default

    space = DesignSpace(n_cs=axis("n_cs", (2, 4, 6, 8)),
                        n_charger=axis("n_charger", (1, 2, 4)),
                        n_saev=axis("n_saev", (20, 30, 40, 60)),
                        n_series=axis("n_series", (100, 139, 180)),
                        n_parallel=axis("n_parallel", (1,)))

    stations_raw = bundle.config.get("stations", {})
    scn = bundle.scenario
    if "plan" in stations_raw:
        plan = load_station_plan(Path(args.config).parent
                                 / stations_raw["plan"])
    else:
        weights = _station_weights(bundle)
        plan = station_plan(scn.net, weights, sorted(set(space.n_cs)),
                            method="interchange")
    missing = [p for p in set(space.n_cs) if p not in plan]
    if missing:
        raise ConfigError(f"station plan lacks entries for p={missing}")

    def make_scenario(design: SystemDesign):
        return dataclasses.replace(
            scn, design=design,
            perf=vehicle_perf(design, scn.constants, scn.soc_trigger),
            station_nodes=[int(n) for n in plan[design.n_cs]])

    params = bundle.strategy.params \
        if isinstance(bundle.strategy, Relocation) else ModelingParams()
    mask = bundle.strategy.mask \
        if isinstance(bundle.strategy, Relocation) else None
    eval_seeds = _int_list(args.eval_seeds) if args.eval_seeds else [seed]
    res = optimize_system(make_scenario, space, wait_target=args.wait_target,
                          params=params, mask=mask, eval_seeds=eval_seeds,
                          constants=scn.constants,
                          stop_early=not args.no_early_stop)
    rpt.write_json(out / "design.json", {**_meta(bundle, seed),
                                         "wait_target": args.wait_target,
                                         "result": res})
    if args.format == "csv":
        rpt.write_csv(out / "design_rows.csv",
                      ("n_cs", "n_charger", "n_saev", "n_series",
                       "n_parallel", "cost", "wait_min", "feasible"),
                      [(r.design.n_cs, r.design.n_charger, r.design.n_saev,
                        r.design.n_series, r.design.n_parallel,
                        f"{r.cost:.2f}", f"{r.wait_min:.4f}", r.feasible)
                       for r in res.rows])
    if res.best is None:
        print("optimize-system: empty design space")
        return 1
    d = res.best
    tag = "meets target" if res.feasible_found else "least violation"
    print(f"optimize-system: {tag} with n_cs={d.n_cs} n_charger={d.n_charger}"
          f" n_saev={d.n_saev} n_series={d.n_series}, cost "
          f"{res.best_cost:,.0f}, wait {res.best_wait:.2f} min -> {out}")
    return 0


def cmd_sensitivity(args) -> int:
    bundle = _load_bundle(args)
    seed = _seed(args, bundle)
    out = _outdir(args)
    eval_seeds = _int_list(args.eval_seeds) if args.eval_seeds \
        else [101, 102, 103, 104, 105]
    rows = sensitivity_sweep(bundle.scenario, budget=_budget(args),
                             seed=seed, opt_seeds=[seed],
                             eval_seeds=eval_seeds,
                             workers=args.workers)
    rpt.write_json(out / "sensitivity.json",
                   {**_meta(bundle, seed),
                    "rows": [r.to_jsonable() for r in rows]})
    if args.format == "csv":
        rpt.write_sensitivity_csv(out / "sensitivity.csv", rows)
    rpt.fig_sensitivity(rows, out / "sensitivity.png")
    lines = ", ".join(f"{r.label}={r.mean_wait:.2f}" for r in rows)
    print(f"sensitivity: {lines} -> {out}")
    return 0


def cmd_make_scenario(args) -> int:
    out = Path(args.out or "example_city")
    design = SystemDesign(n_cs=args.n_cs, n_charger=args.n_charger,
                          n_saev=args.n_saev, n_series=args.n_series,
                          n_parallel=1)
    path = write_example_scenario(out, seed=_seed(args),
                                  total_per_day=args.total_per_day,
                                  design=design)
    cost = system_cost(design)
    print(f"make-scenario: wrote {path} (design cost {cost.total:,.0f})")
    return 0


# ======================================================================
# argument parsing
# ======================================================================

def _add_common(p, config=True):
    if config:
        p.add_argument("--config", help="scenario JSON file")
    p.add_argument("--seed", type=int, default=None,
                   help="seed override (defaults to the scenario's)")
    p.add_argument("--out", help="output directory (default ./out)")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel evaluation processes")
    p.add_argument("--format", choices=("json", "csv"), default="csv",
                   help="also write delimited tables (csv) or JSON only")


def _add_budget(p, population=24, generations=20, local_evals=100):
    p.add_argument("--population", type=int, default=population)
    p.add_argument("--generations", type=int, default=generations)
    p.add_argument("--local-evals", type=int, default=local_evals)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="saevsim",
        description="Shared autonomous electric vehicle fleet simulator "
                    "and system sizing toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one simulation and report")
    _add_common(p)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("baseline",
                       help="same scenario under aimless idle motion")
    _add_common(p)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("optimize-params",
                       help="tune relocation shape parameters")
    _add_common(p)
    _add_budget(p)
    p.add_argument("--eval-seeds", help="comma-separated simulation seeds")
    p.set_defaults(fn=cmd_optimize_params)

    p = sub.add_parser("gen-data",
                       help="harvest per-window tuned parameters")
    _add_common(p)
    _add_budget(p, population=8, generations=4, local_evals=16)
    p.add_argument("--days", type=int, default=1)
    p.add_argument("--settle-min", type=float, default=30.0)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-surrogate",
                       help="fit the window-parameter predictor")
    _add_common(p, config=False)
    p.add_argument("--data", help="training JSONL from gen-data")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--learner", choices=["knn", "ridge"], default="knn")
    p.add_argument("--aggregate", choices=["mean", "median"], default="mean",
                   help="neighbor combination for the knn learner")
    p.add_argument("--alpha", type=float, default=1.0,
                   help="ridge regularization strength")
    p.set_defaults(fn=cmd_train_surrogate)

    p = sub.add_parser("predict-params",
                       help="predict window parameters from a fleet state")
    _add_common(p)
    p.add_argument("--model", help="model JSON from train-surrogate")
    p.add_argument("--snapshot", help="fleet snapshot JSON")
    p.add_argument("--at-bin", type=int, default=0,
                   help="with --config: simulate to this window first")
    p.set_defaults(fn=cmd_predict_params)

    p = sub.add_parser("plan-stations",
                       help="site charging stations by weighted distance")
    _add_common(p)
    p.add_argument("--max-p", type=int, default=8)
    p.add_argument("--method", choices=("auto", "exact", "interchange"),
                   default="interchange")
    p.set_defaults(fn=cmd_plan_stations)

    p = sub.add_parser("optimize-system",
                       help="cheapest design meeting a wait target")
    _add_common(p)
    p.add_argument("--wait-target", type=float, default=5.0)
    p.add_argument("--eval-seeds", help="comma-separated simulation seeds")
    p.add_argument("--no-early-stop", action="store_true",
                   help="score every design instead of stopping at the "
                        "first feasible one")
    for axis in ("n_cs", "n_charger", "n_saev", "n_series", "n_parallel"):
        p.add_argument(f"--{axis.replace('_', '-')}", dest=axis,
                       help=f"comma-separated {axis} candidates")
    p.set_defaults(fn=cmd_optimize_system)

    p = sub.add_parser("sensitivity",
                       help="compare scoring-term subsets")
    _add_common(p)
    _add_budget(p, population=8, generations=5, local_evals=20)
    p.add_argument("--eval-seeds", help="comma-separated simulation seeds")
    p.set_defaults(fn=cmd_sensitivity)

    p = sub.add_parser("make-scenario",
                       help="write the bundled synthetic city scenario")
    _add_common(p, config=False)
    p.add_argument("--total-per-day", type=float, default=1000.0)
    p.add_argument("--n-cs", dest="n_cs", type=int, default=4)
    p.add_argument("--n-charger", dest="n_charger", type=int, default=2)
    p.add_argument("--n-saev", dest="n_saev", type=int, default=30)
    p.add_argument("--n-series", dest="n_series", type=int, default=139)
    p.set_defaults(fn=cmd_make_scenario)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
