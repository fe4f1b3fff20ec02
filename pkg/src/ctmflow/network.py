"""Network topology, cell parameters, fundamental diagrams, and routing.

Cells are directed links of a multigraph; junction nodes are implicit and
recovered from the adjacency relation

    A = {(i, j) : head(i) = tail(j) != external}.

Each cell carries a piecewise-affine fundamental diagram in per-step units:

    demand  d_i(x)    = demand_slope * x            (rising branch)
    supply  s_i(x, t) = min(supply_slope * (x_jam - x), C_i(t))

with demand saturated at the capacity schedule C_i(t) when evaluated as the
controllable demand

    d_bar_i(x, a) = min(a * d_i(x), C_i(t))   for non-sources (speed limit)
    d_bar_i(x, a) = min(d_i(x), a * C_i(t))   for sources     (ramp meter).

Sources have unbounded supply (math.inf sentinel). All flows are stored in
vehicles per step, so the discrete update x+ = x + y - z is exact.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

INF_SUPPLY = math.inf


@dataclass(frozen=True)
class FundamentalDiagram:
    """Piecewise-affine demand/supply relation of one cell, per-step units."""

    demand_slope: float            # v * tau / L, dimensionless
    supply_slope: float            # w * tau / L, dimensionless
    jam_volume: float              # veh
    capacity_schedule: tuple[float, ...]   # veh/step, constant-extended
    is_source: bool = False

    def __post_init__(self):
        if self.jam_volume <= 0:
            raise ValueError(f"jam_volume must be positive, got {self.jam_volume}")
        if self.demand_slope < 0 or self.supply_slope < 0:
            raise ValueError("diagram slopes must be nonnegative")
        if not self.capacity_schedule:
            raise ValueError("capacity_schedule must be nonempty")
        if any(c < 0 for c in self.capacity_schedule):
            raise ValueError("capacity_schedule entries must be nonnegative")

    def capacity(self, t: int) -> float:
        """C_i(t), constant-extending the last entry beyond the schedule."""
        sched = self.capacity_schedule
        return sched[t] if t < len(sched) else sched[-1]


@dataclass(frozen=True)
class Cell:
    """One road segment with physical parameters and its diagram."""

    id: str
    free_flow_speed: float     # length/time
    wave_speed: float          # length/time
    length: float              # length
    lanes: int
    diagram: FundamentalDiagram

    def __post_init__(self):
        if self.free_flow_speed <= 0 or self.wave_speed <= 0 or self.length <= 0:
            raise ValueError(f"cell {self.id}: v, w, L must be positive")
        if self.lanes < 1:
            raise ValueError(f"cell {self.id}: lanes must be >= 1")


def make_cell(cell_id: str, v: float, w: float, length: float, lanes: int,
              jam: float, capacity: list[float] | tuple[float, ...], tau: float,
              is_source: bool = False) -> Cell:
    """Build a cell from physical units; slopes are premultiplied by tau/L."""
    return Cell(
        id=cell_id,
        free_flow_speed=v,
        wave_speed=w,
        length=length,
        lanes=lanes,
        diagram=FundamentalDiagram(
            demand_slope=v * tau / length,
            supply_slope=w * tau / length,
            jam_volume=jam,
            capacity_schedule=tuple(capacity),
            is_source=is_source,
        ),
    )


@dataclass(frozen=True)
class Network:
    """Directed multigraph of cells with sources, sinks, and junctions."""

    cells: tuple[Cell, ...]
    adjacency: tuple[tuple[str, str], ...]
    sources: frozenset[str]
    sinks: frozenset[str]

    index: dict = field(init=False, repr=False, compare=False)
    _down: dict = field(init=False, repr=False, compare=False)
    _up: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {c.id: k for k, c in enumerate(self.cells)})
        if len(self.index) != len(self.cells):
            raise ValueError("duplicate cell ids")
        down = {c.id: [] for c in self.cells}
        up = {c.id: [] for c in self.cells}
        for (i, j) in self.adjacency:
            if i not in self.index or j not in self.index:
                raise ValueError(f"adjacency pair ({i},{j}) references unknown cell")
            down[i].append(j)
            up[j].append(i)
        object.__setattr__(self, "_down", down)
        object.__setattr__(self, "_up", up)

    @property
    def n(self) -> int:
        return len(self.cells)

    def cell(self, cell_id: str) -> Cell:
        return self.cells[self.index[cell_id]]

    def downstream(self, cell_id: str) -> list[str]:
        return self._down[cell_id]

    def upstream(self, cell_id: str) -> list[str]:
        return self._up[cell_id]

    def is_source(self, cell_id: str) -> bool:
        return cell_id in self.sources

    def is_sink(self, cell_id: str) -> bool:
        return cell_id in self.sinks


@dataclass(frozen=True)
class RoutingSchedule:
    """Per-step turning ratios R_ij(t); rows sum to 1 on non-sinks.

    Stored as a tuple of matrices aligned with the network cell order; the
    last matrix is constant-extended beyond the stored horizon.
    """

    pairs: tuple[tuple[str, str], ...]
    matrices: tuple       # tuple of (n, n) ndarrays, row i col j = R_ij

    def at(self, t: int) -> np.ndarray:
        mats = self.matrices
        return mats[t] if t < len(mats) else mats[-1]

    @staticmethod
    def constant(network: Network, ratios: dict[tuple[str, str], float]) -> "RoutingSchedule":
        m = np.zeros((network.n, network.n))
        for (i, j), r in ratios.items():
            m[network.index[i], network.index[j]] = r
        return RoutingSchedule(pairs=tuple(network.adjacency), matrices=(m,))


@dataclass(frozen=True)
class Scenario:
    """A simulation/optimization instance: horizon, initial state, inflows."""

    network: Network
    horizon: int                  # T, number of steps
    tau: float                    # seconds per step (bookkeeping only)
    initial_volumes: tuple[float, ...]          # x0, veh per cell
    inflow: tuple                 # (T, n) array-like, veh/step, zero off-source
    routing: RoutingSchedule | None = None      # exogenous R(t), FNC only
    note: str = ""

    def inflow_array(self) -> np.ndarray:
        lam = np.asarray(self.inflow, dtype=float)
        if lam.shape != (self.horizon, self.network.n):
            raise ValueError(f"inflow shape {lam.shape} != (T={self.horizon}, n={self.network.n})")
        return lam

    def x0_array(self) -> np.ndarray:
        return np.asarray(self.initial_volumes, dtype=float)

    def capacity_matrix(self) -> np.ndarray:
        """(T, n) matrix of C_i(t)."""
        caps = np.empty((self.horizon, self.network.n))
        for k, c in enumerate(self.network.cells):
            for t in range(self.horizon):
                caps[t, k] = c.diagram.capacity(t)
        return caps

    def content_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(scenario_to_dict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


@dataclass
class Violation:
    code: str
    message: str
    cell: str | None = None
    step: int | None = None


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, code: str, message: str, cell: str | None = None, step: int | None = None):
        self.violations.append(Violation(code, message, cell, step))

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "\n".join(f"[{v.code}] {v.message}" for v in self.violations)


def demand(cell: Cell, x: float, alpha: float, t: int) -> float:
    """Controllable demand d_bar(x, alpha) at step t, veh/step.

    Speed-limit scaling on non-sources, capacity metering on sources.
    """
    if x < 0:
        raise ValueError(f"cell {cell.id}: negative volume {x}")
    cap = cell.diagram.capacity(t)
    if cell.diagram.is_source:
        return min(cell.diagram.demand_slope * x, alpha * cap)
    return min(alpha * cell.diagram.demand_slope * x, cap)


def supply(cell: Cell, x: float, t: int) -> float:
    """Supply s(x, t) in veh/step; +inf for sources."""
    if cell.diagram.is_source:
        return INF_SUPPLY
    if x > cell.diagram.jam_volume + 1e-9:
        raise ValueError(f"cell {cell.id}: volume {x} exceeds jam {cell.diagram.jam_volume}")
    return min(cell.diagram.supply_slope * (cell.diagram.jam_volume - x),
               cell.diagram.capacity(t))


def classify_junctions(network: Network) -> dict[str, str]:
    """Map each internal junction node to ordinary/merge/diverge/general.

    Junction nodes are identified with the set of adjacency pairs sharing
    them; the returned keys are synthetic ids 'node(<in>-><out>)'.
    """
    # group adjacency by the implicit node: two pairs (i,j), (h,k) share a node
    # iff head(i)=head(h) i.e. they have equal upstream-set signature. We build
    # nodes from the relation: node of pair (i,j) is determined by i's head,
    # equivalently by the full bipartite component of cells around it.
    heads: dict[str, set[str]] = {}   # upstream cell -> downstream set
    for (i, j) in network.adjacency:
        heads.setdefault(i, set()).add(j)
    # merge upstream cells that share any downstream cell into one node
    nodes: list[tuple[set[str], set[str]]] = []   # (in-cells, out-cells)
    for i, outs in heads.items():
        merged = None
        for node in nodes:
            if node[1] & outs:
                node[0].add(i)
                node[1].update(outs)
                merged = node
                break
        if merged is None:
            nodes.append(({i}, set(outs)))
    # transitive closure in case two groups got linked via a later cell
    changed = True
    while changed:
        changed = False
        for a in range(len(nodes)):
            for b in range(a + 1, len(nodes)):
                if nodes[a][1] & nodes[b][1] or nodes[a][0] & nodes[b][0]:
                    nodes[a][0].update(nodes[b][0])
                    nodes[a][1].update(nodes[b][1])
                    del nodes[b]
                    changed = True
                    break
            if changed:
                break
    result = {}
    for in_cells, out_cells in nodes:
        n_in, n_out = len(in_cells), len(out_cells)
        if n_in == 1 and n_out == 1:
            kind = "ordinary"
        elif n_in > 1 and n_out == 1:
            kind = "merge"
        elif n_in == 1 and n_out > 1:
            kind = "diverge"
        else:
            kind = "general"
        key = f"node({'+'.join(sorted(in_cells))}->{'+'.join(sorted(out_cells))})"
        result[key] = kind
    return result


def validate(network: Network, scenario: Scenario | None = None) -> ValidationReport:
    """Check every structural invariant; returns a report, never raises."""
    report = ValidationReport()
    downstream_of = {c.id: network.downstream(c.id) for c in network.cells}
    upstream_of = {c.id: network.upstream(c.id) for c in network.cells}

    for c in network.cells:
        if c.diagram.is_source != network.is_source(c.id):
            report.add("source-flag", f"cell {c.id}: diagram is_source disagrees with network.sources", cell=c.id)
        if not c.diagram.is_source and supply(c, 0.0, 0) <= 0:
            report.add("supply-positive", f"cell {c.id}: s(0) must be positive on non-sources", cell=c.id)
    for s in network.sources:
        if upstream_of.get(s):
            report.add("source-upstream", f"source {s} has in-network upstream cells {upstream_of[s]}", cell=s)
    for s in network.sinks:
        if downstream_of.get(s):
            report.add("sink-downstream", f"sink {s} has in-network downstream cells {downstream_of[s]}", cell=s)
    for c in network.cells:
        if not downstream_of[c.id] and not network.is_sink(c.id):
            report.add("dead-end", f"cell {c.id} has no downstream cell and is not a sink", cell=c.id)
        if not upstream_of[c.id] and not network.is_source(c.id):
            report.add("no-feed", f"cell {c.id} has no upstream cell and is not a source", cell=c.id)

    if scenario is not None:
        x0 = scenario.x0_array()
        if x0.shape != (network.n,):
            report.add("x0-shape", f"x0 has shape {x0.shape}, expected ({network.n},)")
        else:
            for k, c in enumerate(network.cells):
                if x0[k] < 0:
                    report.add("x0-negative", f"cell {c.id}: x0 = {x0[k]} < 0", cell=c.id)
                if not c.diagram.is_source and x0[k] > c.diagram.jam_volume:
                    report.add("x0-jam", f"cell {c.id}: x0 = {x0[k]} exceeds jam {c.diagram.jam_volume}", cell=c.id)
        try:
            lam = scenario.inflow_array()
        except ValueError as e:
            report.add("inflow-shape", str(e))
            lam = None
        if lam is not None:
            for t in range(scenario.horizon):
                for k, c in enumerate(network.cells):
                    if lam[t, k] < 0:
                        report.add("inflow-negative", f"lambda_{c.id}({t}) = {lam[t, k]} < 0", cell=c.id, step=t)
                    if lam[t, k] > 0 and not network.is_source(c.id):
                        report.add("inflow-nonsource", f"lambda_{c.id}({t}) > 0 on non-source", cell=c.id, step=t)
        # CFL: tau * max v / min L <= 1, expressed via per-step slopes
        max_slope = max(c.diagram.demand_slope for c in network.cells)
        max_wslope = max(c.diagram.supply_slope for c in network.cells)
        if max_slope > 1 + 1e-12:
            report.add("cfl", f"CFL ratio tau*max(v)/min(L) = {max_slope} exceeds 1")
        if max_wslope > 1 + 1e-12:
            report.add("cfl-wave", f"wave CFL ratio tau*max(w)/min(L) = {max_wslope} exceeds 1")
        routing = scenario.routing
        if routing is not None:
            steps = len(routing.matrices)
            allowed = set()
            for (i, j) in network.adjacency:
                allowed.add((network.index[i], network.index[j]))
            for t in range(steps):
                m = routing.at(t)
                for a in range(network.n):
                    for b in range(network.n):
                        if m[a, b] < 0:
                            report.add("routing-negative", f"R[{a},{b}]({t}) < 0", step=t)
                        if m[a, b] > 0 and (a, b) not in allowed:
                            report.add("routing-offgraph",
                                       f"R positive on non-adjacent pair ({network.cells[a].id},{network.cells[b].id})",
                                       step=t)
                for k, c in enumerate(network.cells):
                    if network.is_sink(c.id):
                        continue
                    rowsum = float(m[k].sum())
                    if abs(rowsum - 1.0) > 1e-9:
                        report.add("routing-rowsum",
                                   f"row {c.id} of R({t}) sums to {rowsum}, expected 1",
                                   cell=c.id, step=t)
    return report


# ---------------------------------------------------------------------------
# scenario file round trip (JSON-compatible tree with a units header)

UNITS_HEADER = {
    "speed": "length/time (v, w)",
    "length": "length (L)",
    "volume": "veh (x, x0, jam)",
    "flow": "veh/step (capacity, inflow; demand/supply premultiplied by tau)",
    "time": "seconds per step (tau)",
}


def scenario_to_dict(scenario: Scenario) -> dict:
    net = scenario.network
    routing = {}
    if scenario.routing is not None:
        m = scenario.routing.at(0)
        steps = len(scenario.routing.matrices)
        for (i, j) in net.adjacency:
            a, b = net.index[i], net.index[j]
            routing[f"{i}->{j}"] = [float(scenario.routing.at(t)[a, b]) for t in range(steps)]
    lam = scenario.inflow_array()
    inflow = {c.id: [float(v) for v in lam[:, k]]
              for k, c in enumerate(net.cells) if net.is_source(c.id)}
    return {
        "units": UNITS_HEADER,
        "note": scenario.note,
        "cells": [
            {
                "id": c.id, "v": c.free_flow_speed, "w": c.wave_speed,
                "L": c.length, "lanes": c.lanes, "jam": c.diagram.jam_volume,
                "capacity": list(c.diagram.capacity_schedule),
            }
            for c in net.cells
        ],
        "adjacency": [[i, j] for (i, j) in net.adjacency],
        "sources": sorted(net.sources),
        "sinks": sorted(net.sinks),
        "routing": routing,
        "inflow": inflow,
        "x0": [float(v) for v in scenario.initial_volumes],
        "T": scenario.horizon,
        "tau": scenario.tau,
    }


def scenario_from_dict(data: dict) -> Scenario:
    if "units" not in data:
        raise ValueError("scenario file missing required 'units' header")
    tau = float(data["tau"])
    horizon = int(data["T"])
    sources = frozenset(data["sources"])
    cells = tuple(
        make_cell(c["id"], c["v"], c["w"], c["L"], int(c["lanes"]), c["jam"],
                  c["capacity"], tau, is_source=c["id"] in sources)
        for c in data["cells"]
    )
    net = Network(
        cells=cells,
        adjacency=tuple((i, j) for i, j in data["adjacency"]),
        sources=sources,
        sinks=frozenset(data["sinks"]),
    )
    lam = np.zeros((horizon, net.n))
    for cid, series in data.get("inflow", {}).items():
        k = net.index[cid]
        for t, v in enumerate(series[:horizon]):
            lam[t, k] = v
    routing = None
    if data.get("routing"):
        steps = max(len(v) for v in data["routing"].values())
        mats = []
        for t in range(steps):
            m = np.zeros((net.n, net.n))
            for key, series in data["routing"].items():
                i, j = key.split("->")
                m[net.index[i], net.index[j]] = series[t] if t < len(series) else series[-1]
            mats.append(m)
        routing = RoutingSchedule(pairs=tuple(net.adjacency), matrices=tuple(mats))
    return Scenario(
        network=net, horizon=horizon, tau=tau,
        initial_volumes=tuple(float(v) for v in data["x0"]),
        inflow=lam, routing=routing, note=data.get("note", ""),
    )


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(scenario), fh, indent=2, sort_keys=True)
