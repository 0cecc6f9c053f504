"""Command-line front end.

Every sub-command prints one JSON object on stdout.  Exit codes: 0 for
success, 2 when the negotiation stops without converging, 3 for invalid
input or an infeasible problem.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import replace

import click
import numpy as np

from .bm import run_rolling, settle
from .dam import InfeasibleSchedule, solve_dam
from .grid import check_constraints
from .negotiation import AwardInfeasible
from .pipeline import emit_results, run_pipeline, summarize
from .scenario import (ParseError, Scenario, ValidationError, bm_price_forecaster,
                       default_scenario, load_scenario)

EXIT_OK = 0
EXIT_NO_CONVERGENCE = 2
EXIT_INFEASIBLE = 3


def _emit(obj: dict) -> None:
    click.echo(json.dumps(obj, sort_keys=True))


def _fail(message: str, code: int) -> None:
    _emit({"error": message, "exit_code": code})
    sys.exit(code)


def _load(scenario_path, seed, no_boc, no_rwo, force_te, max_iters) -> Scenario:
    try:
        scn = load_scenario(scenario_path) if scenario_path else default_scenario()
    except (ParseError, ValidationError) as exc:
        _fail(str(exc), EXIT_INFEASIBLE)
    if seed is not None:
        scn.seed = seed
    scn.flags = replace(scn.flags,
                        include_boc=scn.flags.include_boc and not no_boc,
                        use_rwo=scn.flags.use_rwo and not no_rwo,
                        force_te=scn.flags.force_te or force_te)
    if max_iters is not None:
        scn.negotiation = replace(scn.negotiation, max_iters=max_iters)
    return scn


def common_options(f):
    for opt in reversed([
        click.option("--scenario", "scenario_path", type=click.Path(),
                     help="Scenario JSON (bundled study case when omitted)."),
        click.option("--seed", type=int, default=None,
                     help="Override the scenario's forecast seed."),
        click.option("--no-boc", is_flag=True,
                     help="Drop battery wear from both market stages."),
        click.option("--no-rwo", is_flag=True,
                     help="Plan the balancing market in one shot instead of rolling."),
        click.option("--force-te", is_flag=True,
                     help="Negotiate even without predicted violations."),
        click.option("--max-iters", type=int, default=None,
                     help="Cap on negotiation rounds."),
    ]):
        f = opt(f)
    return f


@click.group()
def main() -> None:
    """EV-aggregator operating pipeline."""
    level = os.environ.get("GRIDROLL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@common_options
@click.option("--output-dir", type=click.Path(), default="gridroll-out",
              show_default=True, help="Directory for result files.")
@click.option("--emit-plots", is_flag=True, help="Also write SVG charts.")
def run(scenario_path, seed, no_boc, no_rwo, force_te, max_iters,
        output_dir, emit_plots) -> None:
    """Run all stages and write result files."""
    scn = _load(scenario_path, seed, no_boc, no_rwo, force_te, max_iters)
    try:
        report = run_pipeline(scn)
    except (InfeasibleSchedule, AwardInfeasible) as exc:
        _fail(str(exc), EXIT_INFEASIBLE)
    paths = emit_results(report, output_dir, emit_plots=emit_plots)
    summary = summarize(report)
    summary["timings_s"] = {k: round(v, 3) for k, v in report.timings.items()}
    summary["outputs"] = [str(p) for p in paths]
    code = EXIT_OK if report.converged else EXIT_NO_CONVERGENCE
    summary["exit_code"] = code
    _emit(summary)
    sys.exit(code)


@main.command()
@common_options
def dam(scenario_path, seed, no_boc, no_rwo, force_te, max_iters) -> None:
    """Solve only the day-ahead stage."""
    scn = _load(scenario_path, seed, no_boc, no_rwo, force_te, max_iters)
    try:
        sched = solve_dam(scn.fleet, scn.dam_prices, include_boc=scn.flags.include_boc)
    except InfeasibleSchedule as exc:
        _fail(str(exc), EXIT_INFEASIBLE)
    charged = sum(float(sched.charge_kw[e.ev_id].sum()) for e in scn.fleet)
    discharged = sum(float(sched.discharge_kw[e.ev_id].sum()) for e in scn.fleet)
    _emit({"scenario": scn.name, "dam_cost": round(sched.total_cost, 6),
           "charged_kwh": round(charged, 6), "discharged_kwh": round(discharged, 6),
           "include_boc": scn.flags.include_boc, "exit_code": EXIT_OK})


@main.command()
@common_options
def bm(scenario_path, seed, no_boc, no_rwo, force_te, max_iters) -> None:
    """Run the day-ahead and balancing stages."""
    scn = _load(scenario_path, seed, no_boc, no_rwo, force_te, max_iters)
    try:
        sched = solve_dam(scn.fleet, scn.dam_prices, include_boc=scn.flags.include_boc)
    except InfeasibleSchedule as exc:
        _fail(str(exc), EXIT_INFEASIBLE)
    if scn.flags.use_rwo:
        cfg = replace(scn.rolling, include_boc=scn.flags.include_boc)
    else:
        cfg = replace(scn.rolling, window_hours=scn.horizon,
                      step_hours=scn.horizon, include_boc=scn.flags.include_boc)
    forecaster = bm_price_forecaster(scn.bm_prices, seed=scn.seed,
                                     error_rate_per_hour=scn.forecast_error_rate)
    plan = run_rolling(scn.fleet, sched, forecaster, cfg)
    stl = settle(plan, scn.fleet, scn.bm_prices, include_boc=scn.flags.include_boc)
    fallbacks = sum(1 for w in plan.windows if w.fallback and all(w.fallback.values()))
    _emit({"scenario": scn.name, "dam_cost": round(sched.total_cost, 6),
           "bm_settlement": round(stl.total, 6),
           "bm_cashflow": round(stl.total_cashflow, 6),
           "rolling": scn.flags.use_rwo, "windows": len(plan.windows),
           "all_baseline_windows": fallbacks, "exit_code": EXIT_OK})


@main.command()
@common_options
@click.option("--output-dir", type=click.Path(), default="gridroll-out",
              show_default=True)
@click.option("--emit-plots", is_flag=True)
@click.pass_context
def te(ctx, scenario_path, seed, no_boc, no_rwo, force_te, max_iters,
       output_dir, emit_plots) -> None:
    """Run all stages with the negotiation forced on."""
    ctx.invoke(run, scenario_path=scenario_path, seed=seed, no_boc=no_boc,
               no_rwo=no_rwo, force_te=True, max_iters=max_iters,
               output_dir=output_dir, emit_plots=emit_plots)


@main.command()
@common_options
def check(scenario_path, seed, no_boc, no_rwo, force_te, max_iters) -> None:
    """Validate a scenario and its base-case network security."""
    try:
        scn = load_scenario(scenario_path) if scenario_path else default_scenario()
    except ParseError as exc:
        _fail(str(exc), EXIT_INFEASIBLE)
    except ValidationError as exc:
        _emit({"valid": False, "problems": exc.problems, "exit_code": EXIT_INFEASIBLE})
        sys.exit(EXIT_INFEASIBLE)
    net = scn.network.prepare()
    base_viol = check_constraints(net, np.zeros((net.n_bus, scn.horizon)))
    _emit({
        "valid": True,
        "scenario": scn.name,
        "horizon_hours": scn.horizon,
        "vehicles": len(scn.fleet),
        "aggregators": sorted(scn.aggregators),
        "base_case_violations": len(base_viol),
        "fleet_max_draw_kw": round(sum(e.p_max_ch_kw for e in scn.fleet), 3),
        "transformer_limit_kw": net.transformer_limit_kw,
        "exit_code": EXIT_OK,
    })


if __name__ == "__main__":
    main()
