"""Command-line front end.

Commands: simulate, solve, synthesize, robustness-sweep, reproduce-paper.
Scenario inputs are JSON files (see network.save_scenario) or the bundled
names ``bundled:table`` and ``bundled:robustness``. Every run writes its
artifacts plus a manifest.json listing each file with a sha256 digest;
outputs are deterministic. Exit codes: 0 ok, 2 configuration error,
3 solver failure, 4 simulation invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import multiprocessing
import sys
from pathlib import Path

import numpy as np

from . import ctm, program, robustness, scenarios, synthesis
from .ctm import CostSpec
from .network import load_scenario, save_scenario, validate
from .solver import (Residuals, Solution, SolverError, solve,
                     solve_max_outflow, verify_solution)

COST_KINDS = {"ttt": "TTT", "ttd": "TTD", "delay": "Delay", "quad": "QuadraticVolume"}
MODELS = ("fifo", "fifo-priority", "nonfifo")


class ConfigError(Exception):
    pass


def _scenario(path: str):
    if path == "bundled:table":
        return scenarios.table_scenario()
    if path == "bundled:robustness":
        return scenarios.robustness_scenario()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"scenario file not found: {path}")
    sc = load_scenario(p)
    report = validate(sc.network, sc)
    if not report.ok:
        raise ConfigError(f"invalid scenario {path}:\n{report}")
    return sc


def _cost(name: str) -> CostSpec:
    if name not in COST_KINDS:
        raise ConfigError(f"unknown cost {name!r}; choose from {sorted(COST_KINDS)}")
    return CostSpec(COST_KINDS[name])


def _sweep_grid(expr: str) -> np.ndarray:
    try:
        start, step, end = (float(v) for v in expr.split(":"))
    except ValueError as e:
        raise ConfigError(f"bad sweep expression {expr!r}, expected START:STEP:END") from e
    if step <= 0 or end < start:
        raise ConfigError("sweep grid must be increasing")
    n = int(round((end - start) / step)) + 1
    return np.round(start + step * np.arange(n), 10)


def _write_manifest(outdir: Path, files: list) -> None:
    manifest = {}
    for f in sorted(files):
        digest = hashlib.sha256(Path(f).read_bytes()).hexdigest()
        manifest[str(Path(f).relative_to(outdir))] = digest
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _solve_program(sc, kind: str, cost: CostSpec, eps: float, max_outflow=False):
    if not (0.0 <= eps < 1.0):
        raise ConfigError(f"epsilon must be in [0, 1), got {eps}")
    if kind == "fnc" and sc.routing is None:
        raise ConfigError("FNC needs a scenario with a routing schedule")
    if kind == "dta":
        prog = program.build_dta(sc, cost, eps)
    elif kind == "fnc":
        prog = program.build_fnc(sc, cost, eps)
    else:
        raise ConfigError(f"unknown kind {kind!r}; choose dta or fnc")
    sol = solve_max_outflow(prog) if max_outflow else solve(prog)
    if sol.status != "optimal":
        raise SolverError(f"{kind} solve ended with status {sol.status}")
    return prog, sol


def cmd_simulate(args) -> list:
    sc = _scenario(args.scenario)
    traj = ctm.simulate(sc, model=args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "trajectory.csv"
    ctm.trajectory_to_csv(traj, path)
    cost = ctm.evaluate_cost(traj, _cost(args.cost))
    summary = out / "summary.json"
    with open(summary, "w") as fh:
        json.dump({"command": "simulate", "model": args.model, "cost_kind": args.cost,
                   "cost": cost, "min_gamma": traj.min_gamma()}, fh, indent=2, sort_keys=True)
    print(f"simulate: cost[{args.cost}] = {cost:.6g}, min gamma = {traj.min_gamma():.6g}")
    return [path, summary]


def cmd_solve(args) -> list:
    sc = _scenario(args.scenario)
    prog, sol = _solve_program(sc, args.kind, _cost(args.cost), args.epsilon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lp_path = out / f"{args.kind}_{args.cost}.lp"
    program.export_lp(prog, lp_path)
    states = prog.states(sol.values, sc)
    traj_path = out / "optimal_states.csv"
    with open(traj_path, "w") as fh:
        fh.write("step,cell,x_veh\n")
        for t in range(sc.horizon + 1):
            for k, c in enumerate(sc.network.cells):
                fh.write(f"{t},{c.id},{states[t, k]:.12g}\n")
    summary = out / "summary.json"
    with open(summary, "w") as fh:
        json.dump({"command": "solve", "kind": args.kind, "cost_kind": args.cost,
                   "epsilon": args.epsilon, "objective": sol.objective,
                   "status": sol.status, "iterations": sol.iterations,
                   "primal_residual": sol.residuals.primal}, fh, indent=2, sort_keys=True)
    print(f"solve: {args.kind} {args.cost} eps={args.epsilon} -> {sol.objective:.6g} ({sol.status})")
    return [lp_path, traj_path, summary]


def cmd_synthesize(args) -> list:
    sc = _scenario(args.scenario)
    prog, sol = _solve_program(sc, args.kind, _cost(args.cost), args.epsilon)
    controls = synthesis.extract_controls(prog, sol, sc)
    ref = prog.states(sol.values, sc)
    report = synthesis.verify_realization(controls, sc, ref, model=args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    alpha_path = out / "controls_alpha.csv"
    routing_path = out / "controls_routing.csv"
    synthesis.controls_to_csv(controls, sc, alpha_path,
                              routing_path if controls.routing is not None else None)
    summary = out / "summary.json"
    with open(summary, "w") as fh:
        json.dump({"command": "synthesize", "kind": args.kind, "model": args.model,
                   "objective": sol.objective,
                   "replay_max_deviation": report.max_deviation,
                   "replay_tolerance": report.tolerance,
                   "always_freeflow": report.always_freeflow,
                   "realized": report.realized}, fh, indent=2, sort_keys=True)
    print(f"synthesize: replay deviation {report.max_deviation:.3g} "
          f"(tol {report.tolerance:.3g}), free-flow={report.always_freeflow}")
    files = [alpha_path, summary]
    if controls.routing is not None:
        files.append(routing_path)
    return files


def _fnc_optimum_t200(sc):
    """Nominal FNC optimum for the long-horizon robustness scenario.

    With the total-volume cost, identical slopes, and only ordinary, merge,
    and diverge junctions, the optimum coincides with the uncontrolled FIFO
    run; the embedded trajectory is asserted relaxation-feasible and
    free-flow, which is the structural content of that equality.
    """
    traj = ctm.simulate(sc)
    if not traj.is_freeflow():
        raise SolverError("structural shortcut needs a free-flow nominal run")
    prog = program.build_fnc(sc, CostSpec("TTT"))
    values = program.embed_trajectory(prog, traj)
    primal = verify_solution(prog, values)
    if primal > 1e-8:
        raise SolverError(f"embedded trajectory infeasible (residual {primal})")
    sol = Solution(values=values, objective=prog.objective_value(values),
                   status="optimal", residuals=Residuals(primal, 0.0, 0.0))
    return prog, sol, traj


def _sweep_point(payload):
    (sc_dict, delta, model, alphas, lam_hat, base_values) = payload
    from .network import scenario_from_dict
    sc = scenario_from_dict(sc_dict)
    controls = synthesis.ControlSchedule(alphas=np.asarray(alphas))
    pert = robustness.PerturbationSpec.inflow_shift(sc, float(delta))
    _, dpsi, _, _ = robustness.simulated_divergence(sc, pert, controls=controls, model=model)
    base = robustness.BoundCurve(values=np.asarray(base_values),
                                 provenance=["combined"] * len(base_values))
    curve = robustness.combined_bound(sc, pert, controls=controls, model=model,
                                      probe=False, lam_hat=lam_hat,
                                      overload_base=base)
    sens = robustness.sensitivity_bound(sc, pert)
    return float(delta), dpsi, curve.total(), float(np.minimum(sens.values, 1e300).sum())


def _run_sweep(sc, grid, model: str, controls, jobs: int):
    lam_hat = robustness.max_freeflow_inflow(sc, model=model)
    src = sc.network.index[sorted(sc.network.sources)[0]]
    at_hat = robustness.PerturbationSpec.inflow_shift(
        sc, lam_hat - float(sc.inflow_array()[0, src]))
    base = robustness.combined_bound(sc, at_hat, controls=controls, model=model,
                                     allow_overload=False, probe=False)
    from .network import scenario_to_dict
    payloads = [(scenario_to_dict(sc), float(d), model,
                 controls.alphas.tolist(), lam_hat, base.values.tolist()) for d in grid]
    if jobs > 1:
        with multiprocessing.Pool(jobs) as pool:
            rows = pool.map(_sweep_point, payloads)
    else:
        rows = [_sweep_point(p) for p in payloads]
    return sorted(rows, key=lambda r: r[0]), lam_hat


def cmd_robustness_sweep(args) -> list:
    sc = _scenario(args.scenario)
    grid = _sweep_grid(args.sweep)
    if args.epsilon == 0.0 and sc.horizon > 80:
        prog, sol, _ = _fnc_optimum_t200(sc)
    else:
        prog, sol = _solve_program(sc, "fnc", CostSpec("TTT"), args.epsilon)
    controls = synthesis.extract_controls(prog, sol, sc)
    rows, lam_hat = _run_sweep(sc, grid, args.model, controls, args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_{args.model}.csv"
    with open(path, "w") as fh:
        fh.write("delta_lambda_veh_per_step,simulated_cost_perturbation_veh_steps,"
                 "combined_bound_veh_steps,model,sensitivity_bound_veh_steps\n")
        for d, dpsi, bound, sens in rows:
            fh.write(f"{d:.12g},{dpsi:.12g},{bound:.12g},{args.model},{sens:.12g}\n")
    print(f"robustness-sweep: {len(rows)} points, lam_hat = {lam_hat:.4f} "
          f"(delta {lam_hat - sc.inflow_array()[0].max():.4f})")
    return [path]


def reproduce_paper(outdir: Path, jobs: int = 1) -> list:
    """Reproduce the benchmark tables and figure data sets."""
    outdir.mkdir(parents=True, exist_ok=True)
    files = []
    sc = scenarios.table_scenario()
    save_scenario(sc, outdir / "scenario_table.json")
    files.append(outdir / "scenario_table.json")

    # tables: FIFO simulation vs DTA/FNC optima, linear and quadratic costs
    fifo = ctm.simulate(sc)
    results = {}
    states_by = {}
    for cost_name, cost in (("TTT", CostSpec("TTT")), ("Quadratic", CostSpec("QuadraticVolume"))):
        results[("FIFO", cost_name)] = ctm.evaluate_cost(fifo, cost)
        states_by[("FIFO", cost_name)] = fifo.states
        for kind in ("dta", "fnc"):
            prog, sol = _solve_program(sc, kind, cost, 0.0)
            results[(kind.upper(), cost_name)] = sol.objective
            states_by[(kind.upper(), cost_name)] = prog.states(sol.values, sc)
    tables = outdir / "tables2_3.csv"
    with open(tables, "w") as fh:
        fh.write("scheme,cost_kind,cost_veh_steps\n")
        for (scheme, cost_name), value in sorted(results.items()):
            fh.write(f"{scheme},{cost_name},{value:.12g}\n")
    files.append(tables)

    for fig, cost_name in (("fig6", "TTT"), ("fig7", "Quadratic")):
        path = outdir / f"{fig}_trajectories.csv"
        with open(path, "w") as fh:
            fh.write("step,scheme,cell,x_veh\n")
            for scheme in ("FIFO", "DTA", "FNC"):
                states = states_by[(scheme, cost_name)]
                for t in range(sc.horizon + 1):
                    for cid in ("1", "2", "3", "4"):
                        fh.write(f"{t},{scheme},{cid},{states[t, sc.network.index[cid]]:.12g}\n")
        files.append(path)

    # robustness sweeps, T = 200
    rb_sc = scenarios.robustness_scenario()
    save_scenario(rb_sc, outdir / "scenario_robustness.json")
    files.append(outdir / "scenario_robustness.json")
    prog200, sol200, _ = _fnc_optimum_t200(rb_sc)
    controls200 = synthesis.extract_controls(prog200, sol200, rb_sc)
    grid = _sweep_grid("0:0.1:3")
    for fig, model in (("fig8", "fifo"), ("fig9", "nonfifo")):
        rows, lam_hat = _run_sweep(rb_sc, grid, model, controls200, jobs)
        path = outdir / f"{fig}_sweep_{model}.csv"
        with open(path, "w") as fh:
            fh.write("delta_lambda_veh_per_step,simulated_cost_perturbation_veh_steps,"
                     "combined_bound_veh_steps,model,sensitivity_bound_veh_steps\n")
            for d, dpsi, bound, sens in rows:
                fh.write(f"{d:.12g},{dpsi:.12g},{bound:.12g},{model},{sens:.12g}\n")
        files.append(path)

    # epsilon tradeoff on the short scenario
    fig10 = outdir / "fig10_epsilon_tradeoff.csv"
    with open(fig10, "w") as fh:
        fh.write("epsilon,delta_lambda_veh_per_step,cost_veh_steps,congestion_factor\n")
        for eps in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5):
            prog, sol = _solve_program(sc, "fnc", CostSpec("TTT"), eps)
            controls = synthesis.extract_controls(prog, sol, sc)
            for d in _sweep_grid("0:0.1:3"):
                pert = robustness.PerturbationSpec.inflow_shift(sc, float(d))
                traj = ctm.simulate(robustness.perturbed_scenario(sc, pert),
                                    controls=controls, model="fifo")
                cost = float(traj.states.sum())
                fh.write(f"{eps:.1f},{d:.12g},{cost:.12g},{traj.min_gamma():.12g}\n")
    files.append(fig10)
    return files


def cmd_reproduce(args) -> list:
    out = Path(args.out)
    files = reproduce_paper(out, jobs=args.jobs)
    print(f"reproduce-paper: wrote {len(files)} artifacts to {out}")
    return files


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ctmflow",
                                     description="CTM simulation, DTA/FNC relaxations, "
                                                 "control synthesis, robustness bounds")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("--scenario", required=True,
                           help="scenario JSON path or bundled:table / bundled:robustness")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--cost", default="ttt", choices=sorted(COST_KINDS))
        p.add_argument("--model", default="fifo", choices=MODELS)
        p.add_argument("--kind", default="fnc", choices=("dta", "fnc"))
        p.add_argument("--epsilon", type=float, default=0.0)
        p.add_argument("--sweep", default="0:0.1:3", help="START:STEP:END grid")
        p.add_argument("--jobs", type=int, default=1)

    for name in ("simulate", "solve", "synthesize", "robustness-sweep"):
        common(sub.add_parser(name))
    rep = sub.add_parser("reproduce-paper")
    rep.add_argument("--out", default="paper_out")
    rep.add_argument("--jobs", type=int, default=1)

    args = parser.parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "solve": cmd_solve,
        "synthesize": cmd_synthesize,
        "robustness-sweep": cmd_robustness_sweep,
        "reproduce-paper": cmd_reproduce,
    }
    try:
        files = handlers[args.command](args)
        _write_manifest(Path(args.out), [Path(f) for f in files])
        return 0
    except ConfigError as e:
        json.dump({"error": "config", "message": str(e)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except SolverError as e:
        json.dump({"error": "solver", "message": str(e)}, sys.stderr)
        sys.stderr.write("\n")
        return 3
    except ValueError as e:
        json.dump({"error": "invariant", "message": str(e)}, sys.stderr)
        sys.stderr.write("\n")
        return 4


if __name__ == "__main__":
    sys.exit(main())
