"""Open-loop control synthesis from relaxation solutions.

Any feasible point of the relaxed programs is realized exactly by the CTM
under the demand controls

    alpha_i(t) = z_i(t) / d_i(x_i(t))        non-sources (speed limit)
    alpha_i(t) = z_i(t) / C_i(t)             sources, cap binding (metering)

with the conventions alpha = 1 when z = d = 0, and, on sources whose cap
is slack (z already equals min{d(x), C}), alpha = 1 rather than z/C: both
realize the nominal trajectory, but the unrestrictive choice does not
throttle perturbed replays below the nominal plan. For the DTA the routing
is recovered as R_ij = f_ij / z_i (uniform across downstream cells where
z_i = 0). Replaying the controls keeps the trajectory in free-flow, so the
realized flows satisfy z_i = d_bar_i(x_i, alpha_i) at every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ctm import Trajectory, simulate
from .network import Scenario
from .program import ConvexProgram
from .solver import Solution

EXTRACT_TOL = 1e-7


@dataclass
class ControlSchedule:
    """Per-step demand controls and (optionally) routing matrices."""

    alphas: np.ndarray            # (T, n) in [0, 1]
    routing: tuple | None = None  # per-step (n, n) matrices, or None = exogenous

    def alpha_at(self, t: int) -> np.ndarray:
        return self.alphas[min(t, len(self.alphas) - 1)]

    def routing_at(self, t: int):
        if self.routing is None:
            return None
        return self.routing[min(t, len(self.routing) - 1)]


def extract_controls(program: ConvexProgram, solution: Solution,
                     scenario: Scenario) -> ControlSchedule:
    """Map a feasible relaxation solution to realizing demand controls and routing."""
    net = scenario.network
    T = scenario.horizon
    vals = solution.values
    alphas = np.ones((T, net.n))
    for t in range(T):
        for k, c in enumerate(net.cells):
            x = program.var(vals, "x", t, c.id)
            z = program.var(vals, "z", t, c.id)
            d_raw = c.diagram.demand_slope * max(x, 0.0)
            cap = c.diagram.capacity(t)
            if z > min(d_raw, cap) + 1e-6 * (1.0 + abs(z)):
                raise ValueError(
                    f"solution violates the demand constraint at cell {c.id}, step {t}: "
                    f"z={z} > min(d,C)={min(d_raw, cap)}")
            if c.diagram.is_source:
                if z >= min(d_raw, cap) - EXTRACT_TOL:
                    alphas[t, k] = 1.0
                elif cap > 0:
                    alphas[t, k] = min(max(z / cap, 0.0), 1.0)
                else:
                    alphas[t, k] = 1.0
            else:
                if d_raw <= EXTRACT_TOL:
                    if z > EXTRACT_TOL:
                        raise ValueError(
                            f"cell {c.id}, step {t}: z={z} with zero demand signals "
                            "an infeasible solution")
                    alphas[t, k] = 1.0
                else:
                    alphas[t, k] = min(max(z / d_raw, 0.0), 1.0)
    routing = None
    if program.kind == "DTA":
        mats = []
        for t in range(T):
            m = np.zeros((net.n, net.n))
            for k, c in enumerate(net.cells):
                downs = net.downstream(c.id)
                if not downs:
                    continue
                z = program.var(vals, "z", t, c.id)
                if z > EXTRACT_TOL:
                    row = np.array([program.var(vals, "f", t, c.id, j) for j in downs])
                    # solver noise can leave ~1e-10 flows pointing into cells
                    # with zero supply, which would zero the replay's FIFO
                    # coefficient; drop them before normalizing
                    row[row < 1e-8 * (1.0 + z)] = 0.0
                    total = row.sum()
                    row = row / total if total > 0 else np.full(len(downs), 1.0 / len(downs))
                else:
                    row = np.full(len(downs), 1.0 / len(downs))
                for j, r in zip(downs, row):
                    m[k, net.index[j]] = r
            mats.append(m)
        routing = tuple(mats)
    return ControlSchedule(alphas=alphas, routing=routing)


@dataclass
class RealizationReport:
    max_deviation: float          # max over t, i of |x_sim - x_ref|
    tolerance: float              # 1e-6 * (1 + max |x_ref|)
    freeflow_steps: np.ndarray    # bool per step: all gamma == 1 within 1e-9
    demand_identity: float        # max |z - d_bar(x, alpha)| over steps
    trajectory: Trajectory

    @property
    def realized(self) -> bool:
        return self.max_deviation <= self.tolerance

    @property
    def always_freeflow(self) -> bool:
        return bool(self.freeflow_steps.all())


def verify_realization(controls: ControlSchedule, scenario: Scenario,
                       reference_states: np.ndarray, model: str = "fifo") -> RealizationReport:
    """Replay controls through the CTM and compare against the reference."""
    from .network import demand as demand_fn

    traj = simulate(scenario, controls=controls, model=model)
    ref = np.asarray(reference_states, dtype=float)
    dev = float(np.max(np.abs(traj.states - ref)))
    tol = 1e-6 * (1.0 + float(np.max(np.abs(ref))))
    net = scenario.network
    ff = np.array([bool(r.gamma.min() >= 1.0 - 1e-9) for r in traj.rates])
    ident = 0.0
    for t, r in enumerate(traj.rates):
        for k, c in enumerate(net.cells):
            dbar = demand_fn(c, float(traj.states[t][k]), float(controls.alpha_at(t)[k]), t)
            ident = max(ident, abs(float(r.z[k]) - dbar))
    return RealizationReport(max_deviation=dev, tolerance=tol,
                             freeflow_steps=ff, demand_identity=ident,
                             trajectory=traj)


@dataclass
class StructureReport:
    fnc_cost: float
    fifo_cost: float
    cost_gap: float               # |fnc - fifo| / max(|fifo|, 1)
    max_flow_deviation: float     # worst |z* - rule(x*)| at ordinary/diverge cells
    checked_cells: int

    @property
    def ok(self) -> bool:
        return self.cost_gap <= 1e-3 and self.max_flow_deviation <= 1e-6


def check_fnc_structure(program: ConvexProgram, solution: Solution,
                        scenario: Scenario, fifo_cost: float,
                        tol: float = 1e-6) -> StructureReport:
    """Verify the no-speed-limit structure of the optimal FNC solution.

    Preconditions: total-volume cost, identical demand slopes across cells,
    affine supplies, and no general junctions; refused otherwise. At every
    cell heading into an ordinary or diverge junction the optimal outflow
    must equal the uncontrolled CTM sending rule evaluated at the optimal
    volumes:

        ordinary:  z* = min(d_bar(x*), s_downstream(x*))
        diverge:   z* = d_bar(x*) * min(1, min_k s_k(x*_k) / (R_ik d_bar(x*)))
    """
    from .network import classify_junctions, demand as demand_fn, supply as supply_fn

    net = scenario.network
    if program.kind != "FNC":
        raise ValueError("structure check applies to FNC programs")
    if program.cost_kind != "TTT":
        raise ValueError("structure check requires the total-volume cost")
    slopes = {c.diagram.demand_slope for c in net.cells}
    if max(slopes) - min(slopes) > 1e-12:
        raise ValueError("structure check requires identical demand slopes on all cells")
    kinds = classify_junctions(net)
    if any(k == "general" for k in kinds.values()):
        raise ValueError("structure check refuses networks with general junctions")

    vals = solution.values
    worst = 0.0
    checked = 0
    for t in range(scenario.horizon):
        R = scenario.routing.at(t)
        for k, c in enumerate(net.cells):
            downs = net.downstream(c.id)
            if not downs:
                continue
            # ordinary or diverge head <=> this cell is the junction's only input
            shared_input = any(len(net.upstream(j)) > 1 for j in downs)
            if shared_input:
                continue   # merge junction: priority structure, not checked here
            x_i = program.var(vals, "x", t, c.id)
            z_i = program.var(vals, "z", t, c.id)
            dbar = demand_fn(c, max(x_i, 0.0), 1.0, t)
            gamma = 1.0
            for j in downs:
                r = float(R[k, net.index[j]])
                s_j = supply_fn(net.cell(j),
                                min(program.var(vals, "x", t, j), net.cell(j).diagram.jam_volume), t)
                if r * dbar > 1e-15 and np.isfinite(s_j):
                    gamma = min(gamma, max(s_j / (r * dbar), 0.0))
            expected = gamma * dbar
            worst = max(worst, abs(z_i - expected))
            checked += 1
    gap = abs(solution.objective - fifo_cost) / max(abs(fifo_cost), 1.0)
    return StructureReport(fnc_cost=solution.objective, fifo_cost=fifo_cost,
                           cost_gap=gap, max_flow_deviation=worst,
                           checked_cells=checked)


def controls_to_csv(controls: ControlSchedule, scenario: Scenario,
                    alpha_path, routing_path=None) -> None:
    net = scenario.network
    with open(alpha_path, "w") as fh:
        fh.write("step,cell,alpha\n")
        for t in range(len(controls.alphas)):
            for k, c in enumerate(net.cells):
                fh.write(f"{t},{c.id},{controls.alphas[t, k]:.12g}\n")
    if routing_path is not None and controls.routing is not None:
        with open(routing_path, "w") as fh:
            fh.write("step,from_cell,to_cell,ratio\n")
            for t, m in enumerate(controls.routing):
                for (i, j) in net.adjacency:
                    fh.write(f"{t},{i},{j},{m[net.index[i], net.index[j]]:.12g}\n")
