"""Embedded solvers for the relaxation programs.

LPs go through a dense two-phase tableau simplex (Dantzig pricing,
switching to Bland's rule after 1000 degenerate pivots); convex QPs go
through over-relaxed operator splitting (ADMM with a fixed step scaled by
the constraint-matrix norm) with an exact active-set polish. A vertex
enumeration / refined grid search oracle covers tiny instances.

All solves run on the program's affine reduction (the equality constraints
are eliminated through v_full = M v + v0), but every returned Solution is
reconstructed to the full variable vector and re-verified against the
program's own constraint list.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .program import ConvexProgram

SIMPLEX_TOL = 1e-9
LP_RESIDUAL_TOL = 1e-8
QP_RESIDUAL_TOL = 1e-6
BLAND_AFTER = 1000
ADMM_MAX_ITER = 200_000


@dataclass
class Residuals:
    primal: float
    dual: float
    complementarity: float


@dataclass
class Solution:
    values: np.ndarray            # full variable vector
    objective: float
    status: str                   # optimal | infeasible | iteration-limit
    residuals: Residuals
    iterations: int = 0
    certificate: np.ndarray | None = field(default=None, repr=False)

    def var(self, program: ConvexProgram, *name) -> float:
        return program.var(self.values, *name)


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# reduced-form assembly


def _reduced(program: ConvexProgram):
    """Return (G, h, g_lin, P or None, const) for min over v >= implicit.

    Feasible set: {v : G v <= h};  objective g'v + 0.5 v'P v + const.
    Rows of G are scaled to unit infinity norm.
    """
    red = program.reduction
    if red is None:
        raise SolverError("program carries no reduction recipe")
    M = red.M.tocsr()
    v0 = red.v0
    G_top = (program.A_ub @ M).toarray()
    h_top = program.b_ub - program.A_ub @ v0
    # nonnegativity of every full variable: -(M v) <= v0
    rows = []
    rhs = []
    Md = M.toarray()
    for k in range(program.n_vars):
        if not program.nonneg[k]:
            continue
        row = Md[k]
        if not row.any():
            if v0[k] < -1e-12:
                raise SolverError("infeasible by construction: fixed variable negative")
            continue
        rows.append(-row)
        rhs.append(v0[k])
    G = np.vstack([G_top] + ([np.array(rows)] if rows else []))
    h = np.concatenate([h_top] + ([np.array(rhs)] if rhs else []))
    # deduplicate identical rows (keeps the tighter bound)
    scale = np.maximum(np.abs(G).max(axis=1), 1e-30)
    Gn = G / scale[:, None]
    hn = h / scale
    order = np.lexsort(np.round(Gn, 12).T)
    keep = []
    best: dict = {}
    for r in order:
        key = Gn[r].round(12).tobytes()
        if key not in best or hn[r] < hn[best[key]]:
            best[key] = r
    keep = sorted(best.values())
    Gn, hn = Gn[keep], hn[keep]

    g_lin = np.asarray(M.T @ program.c).ravel()
    const = float(program.c @ v0)
    P = None
    if program.is_quadratic:
        Q = sp.diags(program.q)
        P = 2.0 * (M.T @ (Q @ M)).toarray()
        g_lin = g_lin + 2.0 * np.asarray(M.T @ (program.q * v0)).ravel()
        const += float(v0 @ (program.q * v0))
    return Gn, hn, g_lin, P, const


def _reconstruct(program: ConvexProgram, v_red: np.ndarray) -> np.ndarray:
    red = program.reduction
    return np.asarray(red.M @ v_red).ravel() + red.v0


def verify_solution(program: ConvexProgram, values: np.ndarray) -> float:
    """Primal infeasibility (infinity norm) against the full constraint list."""
    r_eq = 0.0
    if program.A_eq.shape[0]:
        scale = np.maximum(np.abs(program.A_eq).max(axis=1).toarray().ravel(), 1e-30)
        r_eq = float(np.max(np.abs(program.A_eq @ values - program.b_eq) / scale))
    r_ub = 0.0
    if program.A_ub.shape[0]:
        r_ub = float(np.max(np.maximum(program.A_ub @ values - program.b_ub, 0.0)))
    r_nn = float(np.max(np.maximum(-values[program.nonneg], 0.0))) if program.nonneg.any() else 0.0
    return max(r_eq, r_ub, r_nn)


# ---------------------------------------------------------------------------
# dense two-phase simplex: min c'v  s.t.  G v <= h,  v >= 0


def _simplex(G: np.ndarray, h: np.ndarray, c: np.ndarray,
             max_iter: int = 200_000):
    """Return (status, v, duals, iterations, certificate)."""
    m, n = G.shape
    flip = h < 0
    A = G.copy()
    b = h.copy()
    A[flip] *= -1.0
    b[flip] *= -1.0
    n_art = int(flip.sum())
    # columns: structural | slacks | artificials
    N = n + m + n_art
    tab = np.zeros((m, N + 1))
    tab[:, :n] = A
    slack_cols = np.arange(n, n + m)
    tab[np.arange(m), slack_cols] = np.where(flip, -1.0, 1.0)
    art_cols = {}
    j = n + m
    for r in np.where(flip)[0]:
        tab[r, j] = 1.0
        art_cols[r] = j
        j += 1
    tab[:, -1] = b
    basis = np.where(flip, [art_cols.get(r, 0) for r in range(m)], slack_cols).astype(int)

    def run_phase(cost: np.ndarray, start_iter: int):
        zrow = cost.copy().astype(float)
        obj = 0.0
        # price out current basis
        for r in range(m):
            if cost[basis[r]] != 0.0:
                zrow = zrow - cost[basis[r]] * tab[r, :-1]
                obj -= cost[basis[r]] * tab[r, -1]
        it = start_iter
        degenerate = 0
        while it < max_iter:
            use_bland = degenerate > BLAND_AFTER
            if use_bland:
                negs = np.where(zrow < -SIMPLEX_TOL)[0]
                if negs.size == 0:
                    return "optimal", zrow, -obj, it
                enter = int(negs[0])
            else:
                enter = int(np.argmin(zrow))
                if zrow[enter] >= -SIMPLEX_TOL:
                    return "optimal", zrow, -obj, it
            col = tab[:, enter]
            pos = col > SIMPLEX_TOL
            if not pos.any():
                return "unbounded", zrow, -obj, it
            ratios = np.full(m, np.inf)
            ratios[pos] = tab[pos, -1] / col[pos]
            rmin = ratios.min()
            cand = np.where(ratios <= rmin + SIMPLEX_TOL)[0]
            if use_bland:
                leave = int(cand[np.argmin(basis[cand])])
            else:
                leave = int(cand[0])
            if rmin <= SIMPLEX_TOL:
                degenerate += 1
            else:
                degenerate = 0
            piv = tab[leave, enter]
            tab[leave] /= piv
            coef = tab[:, enter].copy()
            coef[leave] = 0.0
            tab[:] -= np.outer(coef, tab[leave])
            obj -= zrow[enter] * tab[leave, -1]
            zrow = zrow - zrow[enter] * tab[leave, :-1]
            basis[leave] = enter
            it += 1
        return "iteration-limit", zrow, -obj, it

    iters = 0
    if n_art:
        cost1 = np.zeros(N)
        for jcol in art_cols.values():
            cost1[jcol] = 1.0
        status, zrow1, phase1_obj, iters = run_phase(cost1, 0)
        if status != "optimal":
            return status, None, None, iters, None
        if phase1_obj > 1e-7:
            # Farkas-style certificate from the phase-1 duals
            y = np.zeros(m)
            for r in range(m):
                sc = slack_cols[r]
                y[r] = -zrow1[sc] * (-1.0 if flip[r] else 1.0)
            return "infeasible", None, None, iters, y
        # drive remaining artificials out of the basis
        for r in range(m):
            if basis[r] >= n + m:
                row = tab[r, :n + m]
                nz = np.where(np.abs(row) > SIMPLEX_TOL)[0]
                if nz.size == 0:
                    continue  # redundant row
                enter = int(nz[0])
                piv = tab[r, enter]
                tab[r] /= piv
                coef = tab[:, enter].copy()
                coef[r] = 0.0
                tab[:] -= np.outer(coef, tab[r])
                basis[r] = enter
    cost2 = np.zeros(N)
    cost2[:n] = c
    # forbid artificials in phase 2
    for jcol in art_cols.values():
        tab[:, jcol] = 0.0
        cost2[jcol] = 0.0
    status, zrow, _, iters = run_phase(cost2, iters)
    if status != "optimal":
        return status, None, None, iters, None
    v = np.zeros(N)
    v[basis] = tab[:, -1]
    duals = np.empty(m)
    for r in range(m):
        duals[r] = -zrow[slack_cols[r]] * (-1.0 if flip[r] else 1.0)
    return "optimal", v[:n], duals, iters, None


def _solve_lp(program: ConvexProgram) -> Solution:
    G, h, g_lin, _, const = _reduced(program)
    status, v_red, duals, iters, cert = _simplex(G, h, g_lin)
    if status == "infeasible":
        return Solution(values=np.zeros(program.n_vars), objective=math.nan,
                        status="infeasible",
                        residuals=Residuals(math.inf, math.inf, math.inf),
                        iterations=iters, certificate=cert)
    if status == "unbounded":
        raise SolverError("LP is unbounded; relaxation programs should never be")
    if status == "iteration-limit":
        return Solution(values=np.zeros(program.n_vars), objective=math.nan,
                        status="iteration-limit",
                        residuals=Residuals(math.inf, math.inf, math.inf),
                        iterations=iters)
    values = _reconstruct(program, v_red)
    objective = program.objective_value(values)
    # weak-duality check from the final basis: dual objective h'y + const
    dual_obj = float(h @ duals) + const
    gap = abs(dual_obj - objective) / (1.0 + abs(objective))
    if gap > LP_RESIDUAL_TOL:
        raise SolverError(f"simplex duality gap {gap} exceeds {LP_RESIDUAL_TOL}")
    primal = verify_solution(program, values)
    slack = h - G @ v_red
    comp = float(np.max(np.abs(duals * slack))) if len(h) else 0.0
    dual_feas = float(np.max(np.maximum(duals, 0.0)))  # duals must be <= 0
    status = "optimal" if primal <= LP_RESIDUAL_TOL else "iteration-limit"
    return Solution(values=values, objective=objective, status=status,
                    residuals=Residuals(primal, dual_feas, comp),
                    iterations=iters)


# ---------------------------------------------------------------------------
# over-relaxed ADMM for convex QPs (OSQP-style splitting)


def _polish(P, g, A, lo, up, y, v):
    """Exact KKT solve on the detected active set; None if it fails."""
    act_up = (y > 1e-7)
    act_lo = (y < -1e-7)
    rows = np.where(act_up | act_lo)[0]
    if rows.size == 0:
        try:
            v_pol = np.linalg.solve(P + 1e-12 * np.eye(len(g)), -g)
        except np.linalg.LinAlgError:
            return None
        return v_pol
    A_act = A[rows]
    b_act = np.where(act_up[rows], up[rows], lo[rows])
    n = len(g)
    K = np.block([[P + 1e-10 * np.eye(n), A_act.T],
                  [A_act, -1e-10 * np.eye(rows.size)]])
    rhs = np.concatenate([-g, b_act])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    return sol[:n]


def _solve_qp(program: ConvexProgram, eps_abs: float = QP_RESIDUAL_TOL) -> Solution:
    Gm, h, g_lin, P, const = _reduced(program)
    n = len(g_lin)
    m = Gm.shape[0]
    A = Gm
    lo = np.full(m, -np.inf)
    up = h.copy()
    sigma = 1e-6
    alpha = 1.6
    # fixed step scaled by the constraint/objective matrix norms
    rho = float(np.clip(0.1 * (np.linalg.norm(P, "fro") + 1.0)
                        / (np.linalg.norm(A, "fro") + 1.0), 1e-2, 1e2))
    K = np.block([[P + sigma * np.eye(n), A.T],
                  [A, -(1.0 / rho) * np.eye(m)]])
    lu, piv = sla.lu_factor(K)
    v = np.zeros(n)
    z = np.zeros(m)
    y = np.zeros(m)
    rhs = np.empty(n + m)
    iters = 0
    polished = None
    for iters in range(1, ADMM_MAX_ITER + 1):
        rhs[:n] = sigma * v - g_lin
        rhs[n:] = z - y / rho
        sol = sla.lu_solve((lu, piv), rhs)
        v_t = sol[:n]
        z_t = z + (sol[n:] - y) / rho
        v = alpha * v_t + (1 - alpha) * v
        z_rel = alpha * z_t + (1 - alpha) * z
        z = np.clip(z_rel + y / rho, lo, up)
        y = y + rho * (z_rel - z)
        if iters % 25 == 0 or iters == ADMM_MAX_ITER:
            r_prim = float(np.max(np.abs(A @ v - z))) if m else 0.0
            r_dual = float(np.max(np.abs(P @ v + g_lin + A.T @ y)))
            converged = r_prim < eps_abs and r_dual < eps_abs
            if converged or (iters % 500 == 0 and r_prim < 1e-3 and r_dual < 1e-3):
                cand = _polish(P, g_lin, A, lo, up, y, v)
                if cand is not None:
                    feas = float(np.max(np.maximum(A @ cand - up, 0.0)))
                    if feas < 1e-9 and program.objective_value(_reconstruct(program, cand)) \
                            <= program.objective_value(_reconstruct(program, v)) + 1e-9:
                        polished = cand
                        break
            if converged:
                break
    v_final = polished if polished is not None else v
    values = _reconstruct(program, v_final)
    # clip the microscopic ADMM noise off the nonnegative block
    values[program.nonneg] = np.maximum(values[program.nonneg], 0.0)
    objective = program.objective_value(values)
    primal = verify_solution(program, values)
    r_dual = float(np.max(np.abs(P @ v_final + g_lin + A.T @ y)))
    comp = float(np.max(np.abs(y * (up - np.clip(A @ v_final, lo, up)))))
    status = "optimal" if (primal <= QP_RESIDUAL_TOL and iters < ADMM_MAX_ITER) \
        else "iteration-limit"
    return Solution(values=values, objective=objective, status=status,
                    residuals=Residuals(primal, r_dual, comp), iterations=iters)


def solve(program: ConvexProgram) -> Solution:
    """Solve the program: simplex for LPs, operator splitting for QPs."""
    if program.is_quadratic:
        return _solve_qp(program)
    return _solve_lp(program)


def solve_max_outflow(program: ConvexProgram) -> Solution:
    """Lexicographic LP solve: optimal cost, then maximal early outflow.

    The relaxation LPs are highly degenerate (whole faces of optima); the
    structure results describe the optimum that drains greedily, so ties
    are broken by maximizing sum_t (T - t) * sum_i z_i(t) at fixed optimal
    cost. Quadratic programs are strictly convex in x and skip the stage.
    """
    base = solve(program)
    if program.is_quadratic or base.status != "optimal":
        return base
    steps = sorted({name[1] for name in program.names if name[0] == "z"})
    T = max(steps) + 1 if steps else 0
    c2 = np.zeros(program.n_vars)
    for k, name in enumerate(program.names):
        if name[0] == "z":
            c2[k] = -(T - name[1])
    red = program.reduction
    G, h, g_lin, _, const = _reduced(program)
    obj_red = base.objective - const
    G2 = np.vstack([G, g_lin[None, :] / max(np.abs(g_lin).max(), 1e-30)])
    h2 = np.concatenate([h, [(obj_red + 1e-9 * (1 + abs(base.objective)))
                             / max(np.abs(g_lin).max(), 1e-30)]])
    c2_red = np.asarray(red.M.T @ c2).ravel()
    status, v_red, _, iters, _ = _simplex(G2, h2, c2_red)
    if status != "optimal":
        return base
    values = _reconstruct(program, v_red)
    primal = verify_solution(program, values)
    objective = program.objective_value(values)
    if primal > LP_RESIDUAL_TOL or objective > base.objective + 1e-7 * (1 + abs(base.objective)):
        return base
    return Solution(values=values, objective=objective, status="optimal",
                    residuals=Residuals(primal, base.residuals.dual, base.residuals.complementarity),
                    iterations=base.iterations + iters)


# ---------------------------------------------------------------------------
# brute-force oracle


def _variable_box(program: ConvexProgram) -> float:
    """Conservative upper bound for flow-type reduced variables."""
    caps = []
    Aub = program.A_ub.tocoo()
    single: dict = {}
    for r, c, vv in zip(Aub.row, Aub.col, Aub.data):
        single.setdefault(r, []).append((c, vv))
    for r, entries in single.items():
        if len(entries) == 1 and entries[0][1] > 0:
            caps.append(program.b_ub[r] / entries[0][1])
    if not caps:
        raise SolverError("cannot derive a variable box for the oracle")
    return float(max(caps))


def brute_force_oracle(program: ConvexProgram, grid_resolution: float = 1e-3) -> Solution:
    """Exhaustive optimum for tiny instances.

    LP: enumerate basic feasible points (vertices of {Gv <= h, v >= 0}).
    QP: box grid refined twice around the incumbent; the returned point is
    within the final grid spacing of the optimum (convex objective).
    """
    G, h, g_lin, P, const = _reduced(program)
    n = G.shape[1]
    if n > 12:
        raise SolverError(f"oracle accepts at most 12 reduced variables, got {n}")
    ub = _variable_box(program)

    if P is None:
        rows = np.vstack([G, -np.eye(n)])
        rhs = np.concatenate([h, np.zeros(n)])
        m_all = rows.shape[0]
        if math.comb(m_all, n) > 2_000_000:
            raise SolverError("too many vertex candidates")
        best = None
        best_obj = np.inf
        for combo in itertools.combinations(range(m_all), n):
            Asq = rows[list(combo)]
            bsq = rhs[list(combo)]
            try:
                v = np.linalg.solve(Asq, bsq)
            except np.linalg.LinAlgError:
                continue
            if np.max(rows @ v - rhs) > 1e-8:
                continue
            obj = float(g_lin @ v)
            if obj < best_obj - 1e-12:
                best_obj = obj
                best = v
        if best is None:
            return Solution(values=np.zeros(program.n_vars), objective=math.nan,
                            status="infeasible",
                            residuals=Residuals(math.inf, math.inf, math.inf))
        values = _reconstruct(program, best)
        return Solution(values=values, objective=program.objective_value(values),
                        status="optimal",
                        residuals=Residuals(verify_solution(program, values), 0.0, 0.0))

    # QP grid search with two refinements
    span = ub
    pts = max(5, int(math.ceil((8.0 * span / grid_resolution) ** (1.0 / 3.0))) + 1)
    while pts ** n > 6_000_000 and pts > 5:
        pts -= 2
    center = np.full(n, span / 2.0)
    width = span / 2.0

    def stage(center, width, pts):
        axes = [np.linspace(max(0.0, center[k] - width), center[k] + width, pts)
                for k in range(n)]
        best = None
        best_obj = np.inf
        for combo in itertools.product(*axes):
            v = np.array(combo)
            if np.max(G @ v - h) > 1e-9 or np.min(v) < -1e-12:
                continue
            obj = float(g_lin @ v + 0.5 * v @ (P @ v))
            if obj < best_obj:
                best_obj = obj
                best = v
        return best, best_obj

    best, _ = stage(center, width, pts)
    if best is None:
        return Solution(values=np.zeros(program.n_vars), objective=math.nan,
                        status="infeasible",
                        residuals=Residuals(math.inf, math.inf, math.inf))
    spacing = span / (pts - 1)
    for _ in range(2):
        cand, _ = stage(best, spacing, pts)
        if cand is not None:
            best = cand
        spacing = 2.0 * spacing / (pts - 1)
    values = _reconstruct(program, best)
    return Solution(values=values, objective=program.objective_value(values),
                    status="optimal",
                    residuals=Residuals(verify_solution(program, values), 0.0, 0.0))
