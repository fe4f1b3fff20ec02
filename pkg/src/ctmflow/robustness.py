"""Perturbation bounds for controlled trajectories.

For a nominal trajectory x(t) and a perturbed one x~(t) driven by the same
open-loop controls, the module computes

  * the small-perturbation (monotonicity/contraction) bound
        ||x~(t) - x(t)||_1 <= ||x~0 - x0||_1 + sum_{s<t} ||lam~(s) - lam(s)||_1
  * the equilibrium-envelope bound, constant in t, built from the extreme
    constant inflows lam_bar / lam_under and initial-volume envelopes
  * the overload extension: bound at the free-flow supremum lam_hat plus
    ||lam~ - lam_hat||_1 * t (growth-rate heuristic)
  * the classical ODE sensitivity bound with Lipschitz constant
        L_g = 2 (max_i d_i'(0) - min_i s_i'(x_jam_i))

and their pointwise combination. Bound curves always come back with a
validity flag from a free-flow probe of the perturbed trajectory; the
"sufficiently small" hypothesis of the monotonicity bounds is exactly that
probe for FIFO dynamics and is vacuous for non-FIFO dynamics (monotone
everywhere).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ctm import fifo_rates, nonfifo_rates, simulate, step
from .network import Network, Scenario
from .scenarios import with_inflow

EQ_TOL = 1e-8
EQ_MAX_STEPS = 100_000
OVERLOAD_FACTOR = 1e3
BISECT_WIDTH = 1e-3


@dataclass(frozen=True)
class PerturbationSpec:
    """Perturbed initial volumes and inflow schedule (same shapes as nominal)."""

    initial_volumes: tuple
    inflow: tuple

    def x0_array(self) -> np.ndarray:
        return np.asarray(self.initial_volumes, dtype=float)

    def inflow_array(self) -> np.ndarray:
        return np.asarray(self.inflow, dtype=float)

    @staticmethod
    def inflow_shift(scenario: Scenario, delta: float) -> "PerturbationSpec":
        """Add a constant to every source inflow, initial volumes unchanged."""
        lam = scenario.inflow_array().copy()
        for cid in scenario.network.sources:
            lam[:, scenario.network.index[cid]] += delta
        return PerturbationSpec(initial_volumes=scenario.initial_volumes,
                                inflow=lam)


@dataclass
class Envelope:
    lam_upper: np.ndarray    # per cell (nonzero on sources)
    lam_lower: np.ndarray
    x0_upper: np.ndarray
    x0_lower: np.ndarray


@dataclass
class BoundCurve:
    values: np.ndarray       # per step 0..T
    provenance: list         # per-step tag
    freeflow_valid: bool | None = None   # perturbed free-flow probe (FIFO)
    applicable: bool = True

    def total(self) -> float:
        return float(self.values.sum())


def perturbed_scenario(scenario: Scenario, perturbation: PerturbationSpec) -> Scenario:
    return Scenario(network=scenario.network, horizon=scenario.horizon,
                    tau=scenario.tau,
                    initial_volumes=tuple(perturbation.x0_array()),
                    inflow=perturbation.inflow_array(),
                    routing=scenario.routing, note=scenario.note)


def freeflow_probe(scenario: Scenario, perturbation: PerturbationSpec,
                   controls=None, model: str = "fifo") -> bool:
    """Simulate the perturbed trajectory and check gamma == 1 throughout."""
    traj = simulate(perturbed_scenario(scenario, perturbation),
                    controls=controls, model=model)
    return traj.is_freeflow()


def contraction_bound(scenario: Scenario, perturbation: PerturbationSpec,
                      controls=None, model: str = "fifo",
                      probe: bool = True) -> BoundCurve:
    """Monotonicity/contraction bound, linear in accumulated inflow error."""
    dx0 = float(np.abs(perturbation.x0_array() - scenario.x0_array()).sum())
    dlam = np.abs(perturbation.inflow_array() - scenario.inflow_array()).sum(axis=1)
    T = scenario.horizon
    values = np.empty(T + 1)
    values[0] = dx0
    values[1:] = dx0 + np.cumsum(dlam)
    valid = freeflow_probe(scenario, perturbation, controls, model) if probe else None
    return BoundCurve(values=values, provenance=["contraction"] * (T + 1),
                      freeflow_valid=valid)


def compute_envelope(scenario: Scenario, perturbation: PerturbationSpec) -> Envelope:
    lam = scenario.inflow_array()
    lam_t = perturbation.inflow_array()
    x0 = scenario.x0_array()
    x0_t = perturbation.x0_array()
    sup_err = np.abs(lam - lam_t).max(axis=0)
    lam_upper = lam.max(axis=0) + sup_err
    lam_lower = np.maximum(0.0, lam.min(axis=0) - sup_err)
    dx0 = np.abs(x0 - x0_t)
    return Envelope(lam_upper=lam_upper, lam_lower=lam_lower,
                    x0_upper=x0 + dx0, x0_lower=np.maximum(0.0, x0 - dx0))


@dataclass
class EquilibriumResult:
    x_eq: np.ndarray | None
    overloaded: bool
    steps: int

    @property
    def exists(self) -> bool:
        return self.x_eq is not None


def _constant_rates(network: Network, x, alpha, R, lam_vec, model, t):
    if model == "nonfifo":
        return nonfifo_rates(network, x, alpha, R, lam_vec, t)
    return fifo_rates(network, x, alpha, R, lam_vec, t)


def find_equilibrium(network: Network, constant_inflow: np.ndarray,
                     controls=None, routing=None, model: str = "fifo",
                     t_index: int = 10 ** 9) -> EquilibriumResult:
    """Iterate the CTM under constant inflow/controls to a fixed point.

    Returns the equilibrium volumes, or an overload signal when a source
    volume exceeds 1e3 times the largest jam volume or the step cap runs
    out. Capacity schedules are taken at their constant extension.
    """
    n = network.n
    x = np.zeros(n)
    lam_vec = np.asarray(constant_inflow, dtype=float)
    if controls is not None:
        alpha = np.asarray(controls.alpha_at(t_index), dtype=float)
        R = controls.routing_at(t_index)
        if R is None:
            R = routing.at(t_index) if routing is not None else None
    else:
        alpha = np.ones(n)
        R = routing.at(t_index) if routing is not None else None
    if R is None:
        raise ValueError("find_equilibrium needs a routing matrix")
    jam_scale = max(c.diagram.jam_volume for c in network.cells)
    for k in range(EQ_MAX_STEPS):
        rates = _constant_rates(network, x, alpha, R, lam_vec, model, t_index)
        x_next = step(network, x, rates)
        if np.max(np.abs(x_next - x)) <= EQ_TOL:
            return EquilibriumResult(x_eq=x_next, overloaded=False, steps=k + 1)
        x = x_next
        if any(x[network.index[s]] > OVERLOAD_FACTOR * jam_scale
               for s in network.sources):
            return EquilibriumResult(x_eq=None, overloaded=True, steps=k + 1)
    return EquilibriumResult(x_eq=None, overloaded=True, steps=EQ_MAX_STEPS)


def equilibrium_envelope_bound(scenario: Scenario, perturbation: PerturbationSpec,
                               controls=None, model: str = "fifo",
                               probe: bool = True) -> BoundCurve:
    """Equilibrium-envelope bound, constant in t; inapplicable without
    both extreme equilibria."""
    env = compute_envelope(scenario, perturbation)
    T = scenario.horizon
    eq_hi = find_equilibrium(scenario.network, env.lam_upper, controls=controls,
                             routing=scenario.routing, model=model)
    eq_lo = find_equilibrium(scenario.network, env.lam_lower, controls=controls,
                             routing=scenario.routing, model=model)
    if not (eq_hi.exists and eq_lo.exists):
        return BoundCurve(values=np.full(T + 1, np.inf),
                          provenance=["envelope-inapplicable"] * (T + 1),
                          applicable=False)
    gap = float(np.abs(eq_hi.x_eq - eq_lo.x_eq).sum())
    dx0 = float(np.abs(env.x0_upper - env.x0_lower).sum())
    third = min(
        float(np.abs(eq_lo.x_eq - xi).sum() + np.abs(eq_hi.x_eq - xi).sum())
        for xi in (env.x0_upper, env.x0_lower))
    const = gap + dx0 + third
    valid = freeflow_probe(scenario, perturbation, controls, model) if probe else None
    return BoundCurve(values=np.full(T + 1, const),
                      provenance=["equilibrium-envelope"] * (T + 1), freeflow_valid=valid)


def max_freeflow_inflow(scenario: Scenario, model: str = "fifo",
                        width: float = BISECT_WIDTH) -> float:
    """Supremum constant inflow keeping the whole horizon in free-flow.

    Bisection on the scalar source level; requires a single source and a
    constant nominal inflow.
    """
    net = scenario.network
    sources = sorted(net.sources)
    if len(sources) != 1:
        raise ValueError("max_freeflow_inflow requires a single-source network")
    lam = scenario.inflow_array()
    src = net.index[sources[0]]
    nominal = lam[:, src]
    if np.max(np.abs(nominal - nominal[0])) > 1e-12:
        raise ValueError("max_freeflow_inflow requires a constant nominal inflow")

    def free(level: float) -> bool:
        probe = with_inflow(scenario, float(level))
        return simulate(probe, model=model).is_freeflow()

    lo = 0.0
    hi = max(float(nominal[0]), 1.0)
    if free(hi):
        # expand upward until congestion appears (or give up at 2^16 hi)
        lo = hi
        for _ in range(16):
            hi *= 2.0
            if not free(hi):
                break
            lo = hi
        else:
            return hi
    elif not free(lo):
        return 0.0
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if free(mid):
            lo = mid
        else:
            hi = mid
    return lo


def overload_bound(scenario: Scenario, perturbation: PerturbationSpec,
                   controls=None, model: str = "fifo",
                   lam_hat: float | None = None,
                   base_curve: BoundCurve | None = None) -> BoundCurve:
    """Triangle-inequality bound for constant inflows above lam_hat.

    Combined free-flow bound evaluated at lam_hat plus the heuristic
    linear-growth term ||lam~ - lam_hat||_1 * t. base_curve, when given,
    is the precomputed combined bound at lam_hat (identical across sweep
    points, and the expensive part of the evaluation).
    """
    net = scenario.network
    sources = sorted(net.sources)
    if len(sources) != 1:
        raise ValueError("overload_bound requires a single-source network")
    src = net.index[sources[0]]
    lam_t = perturbation.inflow_array()[:, src]
    if np.max(np.abs(lam_t - lam_t[0])) > 1e-12:
        raise ValueError("overload_bound requires a constant perturbed inflow")
    if lam_hat is None:
        lam_hat = max_freeflow_inflow(scenario, model=model)
    if base_curve is None:
        at_hat = PerturbationSpec.inflow_shift(
            scenario, lam_hat - float(scenario.inflow_array()[0, src]))
        base_curve = combined_bound(scenario, at_hat, controls=controls, model=model,
                                    allow_overload=False, probe=False)
    T = scenario.horizon
    excess = max(float(lam_t[0]) - lam_hat, 0.0)
    values = base_curve.values + excess * np.arange(T + 1)
    return BoundCurve(values=values,
                      provenance=["overload-heuristic"] * (T + 1),
                      freeflow_valid=False)


def lipschitz_constant(network: Network) -> float:
    """L_g = 2 (max_i d_i'(0) - min_i s_i'(x_jam)), per-step slopes.

    Supply derivatives are taken on the affine branch (-supply_slope);
    sources (infinite supply) are excluded from the min.
    """
    d_max = max(c.diagram.demand_slope for c in network.cells)
    s_min = min(-c.diagram.supply_slope for c in network.cells
                if not c.diagram.is_source)
    return 2.0 * (d_max - s_min)


def sensitivity_bound(scenario: Scenario, perturbation: PerturbationSpec) -> BoundCurve:
    """Classical ODE sensitivity bound with exponential growth e^{L_g t}."""
    L = lipschitz_constant(scenario.network)
    dx0 = float(np.abs(perturbation.x0_array() - scenario.x0_array()).sum())
    dlam = np.abs(perturbation.inflow_array() - scenario.inflow_array()).sum(axis=1)
    T = scenario.horizon
    t_axis = np.arange(T + 1, dtype=float)
    values = np.empty(T + 1)
    with np.errstate(over="ignore"):     # e^{L t} saturates to inf for large t
        grow = np.exp(L * t_axis)
        if np.max(np.abs(dlam - dlam[0])) <= 1e-12:
            values = (grow - 1.0) / L * dlam[0] if dlam[0] > 0 else np.zeros(T + 1)
        else:
            for t in range(T + 1):
                values[t] = sum(np.exp(L * (t - s)) * dlam[s] for s in range(t))
        if dx0 > 0:
            values = values + grow * dx0
    return BoundCurve(values=values, provenance=["sensitivity"] * (T + 1))


def combined_bound(scenario: Scenario, perturbation: PerturbationSpec,
                   controls=None, model: str = "fifo",
                   allow_overload: bool = True, probe: bool = True,
                   lam_hat: float | None = None,
                   overload_base: BoundCurve | None = None) -> BoundCurve:
    """Pointwise minimum of the monotonicity bounds; overload branch when
    a constant perturbed inflow exceeds the free-flow supremum."""
    net = scenario.network
    if allow_overload and len(net.sources) == 1:
        src = net.index[sorted(net.sources)[0]]
        lam_nom = scenario.inflow_array()[:, src]
        lam_t = perturbation.inflow_array()[:, src]
        constant = (np.max(np.abs(lam_nom - lam_nom[0])) <= 1e-12
                    and np.max(np.abs(lam_t - lam_t[0])) <= 1e-12)
        if constant:
            if lam_hat is None:
                lam_hat = max_freeflow_inflow(scenario, model=model)
            if float(lam_t[0]) > lam_hat:
                return overload_bound(scenario, perturbation, controls=controls,
                                      model=model, lam_hat=lam_hat,
                                      base_curve=overload_base)
    p3 = contraction_bound(scenario, perturbation, controls, model, probe=probe)
    p4 = equilibrium_envelope_bound(scenario, perturbation, controls, model, probe=False)
    values = p3.values.copy()
    provenance = list(p3.provenance)
    if p4.applicable:
        for t in range(len(values)):
            if p4.values[t] < values[t]:
                values[t] = p4.values[t]
                provenance[t] = "equilibrium-envelope"
    return BoundCurve(values=values, provenance=provenance,
                      freeflow_valid=p3.freeflow_valid)


def simulated_divergence(scenario: Scenario, perturbation: PerturbationSpec,
                         controls=None, model: str = "fifo"):
    """||x~(t) - x(t)||_1 per step and the summed cost perturbation."""
    nom = simulate(scenario, controls=controls, model=model)
    pert = simulate(perturbed_scenario(scenario, perturbation),
                    controls=controls, model=model)
    diff = np.abs(pert.states - nom.states).sum(axis=1)
    dpsi = float((pert.states - nom.states).sum())
    return diff, dpsi, nom, pert


def bound_to_csv(curve: BoundCurve, path) -> None:
    with open(path, "w") as fh:
        fh.write("step,bound_veh,provenance\n")
        for t, (v, tag) in enumerate(zip(curve.values, curve.provenance)):
            fh.write(f"{t},{v:.12g},{tag}\n")
