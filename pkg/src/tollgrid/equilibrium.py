"""Equilibrium solvers for discount- and credit-based congestion pricing.

Discount (DBCP) equilibria decouple across (edge, period) slots on a chain
network and are computed in closed form per slot: groups enter the express
lane in decreasing order of effective VoT until the marginal group is
indifferent, with the interior split located by bisection plus one secant
polish on the latency-difference curve.

Credit (CBCP) equilibria are minimizers of a convex program whose only
cross-slot coupling is the eligible budget constraints. The solver runs
Frank-Wolfe with a fractional-knapsack linear minimization oracle and exact
line search, optionally followed by a high-precision interior-point polish of
the equivalent QP. The returned fw_gap is always recomputed at the returned
point, so it is a valid certificate regardless of which stage produced it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import (
    EXPRESS,
    GP,
    CBCPPolicy,
    ChainNetwork,
    DBCPPolicy,
    Flow,
    LaneFlow,
    ModelError,
    Population,
    check_admissible,
    lane_flows,
)


class SolverError(RuntimeError):
    pass


@dataclass
class SolverSettings:
    fw_max_iters: int = 50_000
    fw_gap_tol: Optional[float] = None       # None: 1e-7 x initial objective magnitude
    fw_gap_tol_rel: float = 1e-7
    bisection_tol: float = 1e-10             # relative to edge demand
    line_search: str = "exact"               # 'exact' | 'diminishing'
    polish: bool = True                      # interior-point refinement of the CBCP QP

    def __post_init__(self):
        if self.fw_gap_tol is not None and not (self.fw_gap_tol > 0):
            raise ModelError("fw_gap_tol must be positive")
        if not (self.bisection_tol > 0 and self.fw_gap_tol_rel > 0):
            raise ModelError("tolerances must be positive")
        if self.line_search not in ("exact", "diminishing"):
            raise ModelError("line_search must be 'exact' or 'diminishing'")


@dataclass
class EquilibriumResult:
    flow: Flow
    lane_flow: LaneFlow
    vi_residual: float
    objective: float
    iterations: int
    solver: str
    fw_gap: Optional[float] = None           # CBCP only
    converged: bool = True
    epsilon_bound: Optional[float] = None    # Prop.-5 bound, attached when delta_v > 0


# ---------------------------------------------------------------------------
# per-slot DBCP solve


def _delta(spec, d_e: float, x1) -> float:
    """GP-minus-express latency difference at express flow x1."""
    # clamp float accumulation drift at the interval ends
    x1 = min(max(x1, 0.0), d_e)
    return spec.latency(GP, d_e - x1) - spec.latency(EXPRESS, x1)


def _cross_down(phi, lo, hi, vlo, rel_tol):
    """Root of a decreasing function on [lo, hi] with phi(lo) >= 0 > phi(hi)."""
    flo = vlo
    a, b = lo, hi
    width_tol = rel_tol * max(abs(hi), 1.0)
    fa, fb = flo, phi(hi)
    for _ in range(200):
        if b - a <= width_tol:
            break
        m = 0.5 * (a + b)
        fm = phi(m)
        if fm >= 0.0:
            a, fa = m, fm
        else:
            b, fb = m, fm
    if fa != fb:
        # final secant step: phi is affine on the residual bracket for pwa specs
        x = a + fa * (b - a) / (fa - fb)
        return min(max(x, a), b)
    return a


def solve_dbcp_edge(
    spec,
    demands: np.ndarray,
    eff_vots: np.ndarray,
    tau: float,
    bisection_tol: float = 1e-10,
) -> np.ndarray:
    """Equilibrium express split for a single (edge, period) instance.

    Groups sorted by effective VoT descending fill the express lane; the
    marginal group either splits at the indifference point
    ``vhat * (l2(d_e - x1) - l1(x1)) = tau`` or sits at a boundary between
    consecutive VoT levels. Ties share the marginal capacity proportionally
    to demand. With tau = 0 the latency-equalizing split x1 = d_e/(n_gp + 1)
    is returned, allocated proportionally.
    """
    demands = np.asarray(demands, dtype=float)
    eff_vots = np.asarray(eff_vots, dtype=float)
    if tau < 0:
        raise ModelError("tau must be nonnegative")
    m = demands.size
    if m == 0:
        return np.zeros(0)
    d_e = float(demands.sum())
    y1 = np.zeros(m)
    if d_e <= 0:
        return y1
    if tau == 0.0:
        return demands / (spec.n_gp + 1)

    order = np.argsort(-eff_vots, kind="stable")
    # merge ties into levels
    levels: list[list[int]] = []
    for idx in order:
        v = eff_vots[idx]
        if levels:
            v0 = eff_vots[levels[-1][0]]
            same = (math.isinf(v) and math.isinf(v0)) or (
                not math.isinf(v0) and abs(v - v0) <= 1e-12 * max(abs(v0), 1.0)
            )
            if same:
                levels[-1].append(idx)
                continue
        levels.append([idx])

    lo = 0.0
    x_star = None
    marginal: Optional[list[int]] = None
    for members in levels:
        v = eff_vots[members[0]]
        dem = demands[members].sum()
        hi = lo + dem
        if math.isinf(v):
            phi = lambda x: _delta(spec, d_e, x)
        else:
            phi = lambda x: v * _delta(spec, d_e, x) - tau
        if phi(lo) <= 0.0:
            x_star = lo
            break
        if phi(hi) >= 0.0:
            for idx in members:
                y1[idx] = demands[idx]
            lo = hi
            continue
        x_star = _cross_down(phi, lo, hi, phi(lo), bisection_tol)
        marginal = members
        break
    if x_star is None:
        # every group strictly prefers the express lane even when full
        return demands.copy()
    if marginal is not None:
        share = x_star - lo
        dem = demands[marginal].sum()
        for idx in marginal:
            y1[idx] = share * demands[idx] / dem
    return y1


def _demand3(pop: Population) -> np.ndarray:
    """Per-slot demand array d[e, t, g] (zero off-span)."""
    d = np.where(pop.mask[:, None, :], pop.demand[None, None, :], 0.0)
    return np.broadcast_to(d, (pop.net.n_edges, pop.T, pop.n_groups)).copy()


def _group_tolls(pop: Population, policy) -> np.ndarray:
    """Out-of-pocket toll faced per (e, t, g) on the express lane."""
    tau = policy.tolls.tau[:, :, None]
    if policy.kind == "dbcp":
        alpha = policy.alpha[:, :, None]
        faced = np.where(pop.eligible[None, None, :], (1.0 - alpha) * tau, tau)
    else:
        faced = np.where(pop.eligible[None, None, :], 0.0, tau)
    return faced * pop.mask[:, None, :]


def _effective_vots(pop: Population, policy: DBCPPolicy) -> np.ndarray:
    """Effective VoT per (e, t, g); inf where alpha = 1 for an eligible group."""
    v = np.broadcast_to(pop.vot[None, :, :], (pop.net.n_edges, pop.T, pop.n_groups)).copy()
    alpha = policy.alpha[:, :, None]
    scale = 1.0 - alpha
    elig = pop.eligible[None, None, :]
    with np.errstate(divide="ignore"):
        scaled = np.where(scale > 0, v / np.where(scale > 0, scale, 1.0), np.inf)
    return np.where(elig, scaled, v)


def dbcp_objective(net: ChainNetwork, pop: Population, policy: DBCPPolicy, y: Flow) -> float:
    """Value of the DBCP potential (convex-program objective) at y."""
    x = lane_flows(net, pop, y)
    total = 0.0
    for e in range(net.n_edges):
        spec = net.specs[e]
        total += spec.integral(EXPRESS, x.x[e, EXPRESS, :]).sum()
        total += spec.integral(GP, x.x[e, GP, :]).sum()
    faced = _group_tolls(pop, policy)
    total += float((y.express * faced / pop.vot[None, :, :]).sum())
    return total


def cbcp_objective(net: ChainNetwork, pop: Population, policy: CBCPPolicy, y: Flow) -> float:
    """Value of the CBCP convex-program objective at y (eligible tolls absent)."""
    x = lane_flows(net, pop, y)
    total = 0.0
    for e in range(net.n_edges):
        spec = net.specs[e]
        total += spec.integral(EXPRESS, x.x[e, EXPRESS, :]).sum()
        total += spec.integral(GP, x.x[e, GP, :]).sum()
    tau = policy.tolls.tau[:, :, None]
    inel = (~pop.eligible)[None, None, :] & pop.mask[:, None, :]
    total += float((y.express * np.where(inel, tau / pop.vot[None, :, :], 0.0)).sum())
    return total


def solve_dbcp(net: ChainNetwork, pop: Population, policy: DBCPPolicy,
               settings: Optional[SolverSettings] = None) -> EquilibriumResult:
    """Concatenate the closed-form per-(edge, period) solves (decomposition lemma)."""
    settings = settings or SolverSettings()
    vhat = _effective_vots(pop, policy)
    express = np.zeros((net.n_edges, pop.T, pop.n_groups))
    for e in range(net.n_edges):
        members = np.nonzero(pop.mask[e])[0]
        if members.size == 0:
            continue
        for t in range(pop.T):
            express[e, t, members] = solve_dbcp_edge(
                net.specs[e],
                pop.demand[members],
                vhat[e, t, members],
                float(policy.tolls.tau[e, t]),
                settings.bisection_tol,
            )
    flow = Flow.from_express(pop, express)
    eps = vi_residual(net, pop, policy, flow)
    return EquilibriumResult(
        flow=flow,
        lane_flow=lane_flows(net, pop, flow),
        vi_residual=eps,
        objective=dbcp_objective(net, pop, policy, flow),
        iterations=net.n_edges * pop.T,
        solver="dbcp-closed-form",
    )


# ---------------------------------------------------------------------------
# best responses / LMO


def _knapsack_express(saving: np.ndarray, tau: np.ndarray, demand: float,
                      budget: float) -> np.ndarray:
    """Express allocation maximizing total saving subject to a toll budget.

    ``saving[i]`` is the per-unit cost reduction of routing flow express on
    slot i, ``tau[i]`` the per-unit toll charged against the budget. Free
    slots (tau = 0) with positive saving fill fully; paid slots fill greedily
    by saving per toll dollar, splitting the marginal slot fractionally.
    """
    z = np.zeros_like(saving)
    free = (tau <= 0) & (saving > 0)
    z[free] = demand
    paid = (tau > 0) & (saving > 0)
    if not np.any(paid) or budget <= 0:
        return z
    idx = np.nonzero(paid)[0]
    ratio = saving[idx] / tau[idx]
    order = idx[np.argsort(-ratio, kind="stable")]
    remaining = budget
    for i in order:
        cost_full = tau[i] * demand
        if cost_full <= remaining:
            z[i] = demand
            remaining -= cost_full
        else:
            z[i] = remaining / tau[i]
            break
    return z


def lmo_cbcp(c1: np.ndarray, c2: np.ndarray, pop: Population, policy: CBCPPolicy) -> np.ndarray:
    """Vertex of the CBCP feasible set minimizing a linear cost.

    ``c1``/``c2`` are per-(e, t, g) express/GP costs. Ineligible groups route
    all demand to the cheaper lane per slot; eligible groups solve the
    fractional knapsack over their span-period slots against their budget.
    """
    E, T, G = c1.shape
    tau = policy.tolls.tau
    z = np.zeros((E, T, G))
    mask3 = pop.mask[:, None, :]
    inel = (~pop.eligible)[None, None, :] & mask3
    z = np.where(inel & (c1 < c2), pop.demand[None, None, :], 0.0)
    budgets = policy.budgets
    for k, g in enumerate(np.nonzero(pop.eligible)[0]):
        span = np.nonzero(pop.mask[:, g])[0]
        sav = (c2[span, :, g] - c1[span, :, g]).ravel()
        tau_g = np.broadcast_to(tau[span, :], (span.size, T)).ravel()
        zg = _knapsack_express(sav, tau_g, float(pop.demand[g]), float(budgets[k]))
        z[span, :, g] = zg.reshape(span.size, T)
    return z


def _money_costs(net: ChainNetwork, pop: Population, policy, x: LaneFlow):
    """Definition-level user costs c[e,t,g] per lane, in dollars."""
    E, T, G = net.n_edges, pop.T, pop.n_groups
    l1 = np.zeros((E, T))
    l2 = np.zeros((E, T))
    for e in range(net.n_edges):
        l1[e] = net.specs[e].latency(EXPRESS, x.x[e, EXPRESS, :])
        l2[e] = net.specs[e].latency(GP, x.x[e, GP, :])
    v = pop.vot[None, :, :]
    faced = _group_tolls(pop, policy)
    c1 = v * l1[:, :, None] + faced
    c2 = v * l2[:, :, None]
    return c1, c2


def vi_residual(net: ChainNetwork, pop: Population, policy, y: Flow) -> float:
    """Largest cost saving any group could gain by rerouting against frozen costs.

    This is the epsilon of the epsilon-equilibrium definition; 0 iff y is an
    exact equilibrium under the supplied policy.
    """
    report = check_admissible(net, pop, y, policy if policy.kind == "cbcp" else None, tol=1e-7)
    if not report.ok:
        raise SolverError(f"inadmissible flow: {report.violations[:3]}")
    x = lane_flows(net, pop, y)
    c1, c2 = _money_costs(net, pop, policy, x)
    cur = (y.express * c1 + y.gp * c2).sum(axis=(0, 1))
    tau = policy.tolls.tau
    best = np.zeros(pop.n_groups)
    mask3 = pop.mask[:, None, :]
    if policy.kind == "dbcp":
        z1 = np.where(mask3 & (c1 < c2), pop.demand[None, None, :], 0.0)
        best_cost = (z1 * c1 + (np.where(mask3, pop.demand[None, None, :], 0.0) - z1) * c2).sum(axis=(0, 1))
    else:
        inel = (~pop.eligible)[None, None, :] & mask3
        z1 = np.where(inel & (c1 < c2), pop.demand[None, None, :], 0.0)
        for k, g in enumerate(np.nonzero(pop.eligible)[0]):
            span = np.nonzero(pop.mask[:, g])[0]
            sav = (c2[span, :, g] - c1[span, :, g]).ravel()
            tau_g = np.broadcast_to(tau[span, :], (span.size, pop.T)).ravel()
            zg = _knapsack_express(sav, tau_g, float(pop.demand[g]), float(policy.budgets[k]))
            z1[span, :, g] = zg.reshape(span.size, pop.T)
        best_cost = (z1 * c1 + (np.where(mask3, pop.demand[None, None, :], 0.0) - z1) * c2).sum(axis=(0, 1))
    gaps = cur - best_cost
    return float(max(gaps.max(), 0.0)) if gaps.size else 0.0


def sensitivity_bound(net: ChainNetwork, pop: Population) -> float:
    """Approximation error bound for CBCP solves under time-varying eligible VoTs.

    delta_v * T * max over eligible groups of d^g * sum of worst-case span
    latencies l_e(d_e); zero when eligible VoTs are time-invariant.
    """
    from .model import vot_fluctuation

    dv = vot_fluctuation(pop)
    if dv == 0.0 or pop.n_eligible == 0:
        return 0.0
    worst = 0.0
    for g in np.nonzero(pop.eligible)[0]:
        grp = pop.groups[g]
        tot = sum(
            net.specs[e].latency(EXPRESS, pop.edge_demand(e)) for e in grp.span
        )
        worst = max(worst, grp.demand * tot)
    return dv * pop.T * worst


# ---------------------------------------------------------------------------
# CBCP solver


def _cbcp_gradient(net, pop, policy, x: LaneFlow):
    """Gradient of the CBCP objective: latency plus tau/v on ineligible express."""
    E, T, G = net.n_edges, pop.T, pop.n_groups
    l1 = np.zeros((E, T))
    l2 = np.zeros((E, T))
    for e in range(net.n_edges):
        l1[e] = net.specs[e].latency(EXPRESS, x.x[e, EXPRESS, :])
        l2[e] = net.specs[e].latency(GP, x.x[e, GP, :])
    inel = (~pop.eligible)[None, None, :] & pop.mask[:, None, :]
    g1 = l1[:, :, None] + np.where(inel, policy.tolls.tau[:, :, None] / pop.vot[None, :, :], 0.0)
    g2 = np.broadcast_to(l2[:, :, None], (E, T, G)).copy()
    return g1, g2


def _fw_gap(y_express, s_express, g1, g2, pop):
    # gp components mirror express (y1 + y2 fixed), so the gap reduces to g1 - g2
    return float(((y_express - s_express) * (g1 - g2)).sum())


def _exact_line_search(net, pop, x, dx1, dx2, lin_term):
    """Minimize the piecewise-quadratic 1-D restriction over gamma in [0, 1].

    The derivative h(gamma) is piecewise linear and nondecreasing; enumerate
    the lane-threshold crossings and solve the active segment.
    """
    E, T = x.x.shape[0], x.x.shape[2]
    pwa = all(s.variant == "pwa" for s in net.specs)

    def h(gamma):
        tot = lin_term
        for e in range(E):
            spec = net.specs[e]
            x1 = x.x[e, EXPRESS, :] + gamma * dx1[e]
            x2 = x.x[e, GP, :] + gamma * dx2[e]
            tot += float((dx1[e] * spec.latency(EXPRESS, np.maximum(x1, 0.0))).sum())
            tot += float((dx2[e] * spec.latency(GP, np.maximum(x2, 0.0))).sum())
        return tot

    if h(1.0) <= 0.0:
        return 1.0
    if not pwa:
        lo, hi = 0.0, 1.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if h(mid) <= 0.0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)
    breaks = {0.0, 1.0}
    for e in range(E):
        spec = net.specs[e]
        for lane, dxl in ((EXPRESS, dx1[e]), (GP, dx2[e])):
            bp = spec.lane_breakpoint(lane)
            x0 = x.x[e, lane, :]
            nz = np.abs(dxl) > 0
            if not np.any(nz):
                continue
            g = (bp - x0[nz]) / dxl[nz]
            for gv in g:
                if 0.0 < gv < 1.0:
                    breaks.add(float(gv))
    pts = sorted(breaks)
    h_prev = h(pts[0])
    for a, b in zip(pts[:-1], pts[1:]):
        h_b = h(b)
        if h_b >= 0.0:
            if h_b == h_prev:
                return a
            gamma = a + (b - a) * (0.0 - h_prev) / (h_b - h_prev)
            return min(max(gamma, a), b)
        h_prev = h_b
    return 1.0


def _decoupled_cbcp_express(net, pop, policy, elig_vhat: np.ndarray,
                            bisection_tol: float) -> np.ndarray:
    """Per-slot closed-form solve with the given eligible effective VoTs."""
    express = np.zeros((net.n_edges, pop.T, pop.n_groups))
    for e in range(net.n_edges):
        members = np.nonzero(pop.mask[e])[0]
        if members.size == 0:
            continue
        for t in range(pop.T):
            vh = np.where(pop.eligible[members], elig_vhat[members], pop.vot[t, members])
            express[e, t, members] = solve_dbcp_edge(
                net.specs[e], pop.demand[members], vh,
                float(policy.tolls.tau[e, t]), bisection_tol,
            )
    return express


def _cbcp_try_decoupled(net, pop, policy, settings):
    """Exact fast path: budget-free equilibrium if no budget binds, or all-zero budgets.

    Eligible groups with positive budget are tried at infinite effective VoT
    (credits hide tolls entirely); groups with zero budget are excluded from
    tolled express slots. Valid iff the resulting spends stay within budget.
    """
    elig_idx = np.nonzero(pop.eligible)[0]
    vhat = np.zeros(pop.n_groups)
    pos = np.zeros(pop.n_groups, dtype=bool)
    for k, g in enumerate(elig_idx):
        if policy.budgets[k] > 0:
            vhat[g] = np.inf
            pos[g] = True
    express = _decoupled_cbcp_express(net, pop, policy, vhat, settings.bisection_tol)
    if elig_idx.size:
        spend = np.einsum("et,etg->g", policy.tolls.tau, express)
        for k, g in enumerate(elig_idx):
            if pos[g] and spend[g] > policy.budgets[k] * (1 + 1e-12) + 1e-12:
                return None
    return express


_QP_OPTIONS = dict(show_progress=False, abstol=1e-12, reltol=1e-12, feastol=1e-11, maxiters=200)


def _cbcp_polish_qp(net, pop, policy):
    """Solve the CBCP program as an exact QP (pwa latencies only).

    Variables are on-span express flows plus one excess variable per lane
    slot; the integral of a pwa latency is free_flow*x + slope/2 * excess^2.
    Returns the express array or None when unavailable.
    """
    if any(s.variant != "pwa" for s in net.specs):
        return None
    try:
        from cvxopt import matrix, solvers, spmatrix
    except ImportError:
        return None
    E, T, G = net.n_edges, pop.T, pop.n_groups
    slots = [(e, t, g) for e in range(E) for t in range(T) for g in range(G) if pop.mask[e, g]]
    ny = len(slots)
    ns = 2 * E * T
    n = ny + ns
    sidx = lambda e, lane, t: ny + (e * 2 + lane) * T + t

    P = np.zeros(n)
    q = np.zeros(n)
    for e in range(E):
        spec = net.specs[e]
        for t in range(T):
            P[sidx(e, EXPRESS, t)] = spec.slope
            P[sidx(e, GP, t)] = spec.slope * spec.n_gp
    tau = policy.tolls.tau
    col = {s: i for i, s in enumerate(slots)}
    for (e, t, g), i in col.items():
        if not pop.eligible[g]:
            # l_bar*(x1+x2) is constant per slot; only the toll term remains linear
            q[i] = tau[e, t] / pop.vot[t, g]

    rows, cols, vals, h = [], [], [], []

    def add_row(entries, rhs):
        r = len(h)
        for c, v in entries:
            rows.append(r)
            cols.append(c)
            vals.append(v)
        h.append(rhs)

    d_et = {e: pop.edge_demand(e) for e in range(E)}
    for e in range(E):
        spec = net.specs[e]
        for t in range(T):
            members = [(col[(e, t, g)], 1.0) for g in range(G) if pop.mask[e, g]]
            # x1 - s1 <= kappa
            add_row(members + [(sidx(e, EXPRESS, t), -1.0)], spec.threshold)
            # (d_e - x1)/n - s2 <= kappa
            add_row([(c, -1.0 / spec.n_gp) for c, _ in members] + [(sidx(e, GP, t), -1.0)],
                    spec.threshold - d_et[e] / spec.n_gp)
    for (e, t, g), i in col.items():
        add_row([(i, 1.0)], float(pop.demand[g]))
        add_row([(i, -1.0)], 0.0)
    for j in range(ns):
        add_row([(ny + j, -1.0)], 0.0)
    for k, g in enumerate(np.nonzero(pop.eligible)[0]):
        entries = [(col[(e, t, g)], float(tau[e, t]))
                   for e in np.nonzero(pop.mask[:, g])[0] for t in range(T)
                   if tau[e, t] > 0]
        if entries:
            add_row(entries, float(policy.budgets[k]))

    Pm = spmatrix(list(P + 1e-12), range(n), range(n))
    Gm = spmatrix(vals, rows, cols, (len(h), n))
    saved = dict(solvers.options)
    solvers.options.update(_QP_OPTIONS)
    try:
        sol = solvers.qp(Pm, matrix(q), Gm, matrix(np.array(h)))
    except (ValueError, ArithmeticError):
        return None
    finally:
        solvers.options.clear()
        solvers.options.update(saved)
    if sol["status"] not in ("optimal", "unknown"):
        return None
    z = np.array(sol["x"]).ravel()
    express = np.zeros((E, T, G))
    for (e, t, g), i in col.items():
        express[e, t, g] = min(max(z[i], 0.0), pop.demand[g])
    # repair any residual budget violation exactly
    for k, g in enumerate(np.nonzero(pop.eligible)[0]):
        paid = (tau > 0) & pop.mask[:, g][:, None]
        spend = float((tau * express[:, :, g] * pop.mask[:, g][:, None]).sum())
        if spend > policy.budgets[k] and spend > 0:
            scale = policy.budgets[k] / spend
            express[:, :, g] = np.where(paid, express[:, :, g] * scale, express[:, :, g])
    return express


def _delta_inverse(spec, d_e, target, lo, hi, rel_tol):
    """x in [lo, hi] with l2(d_e - x) - l1(x) = target (Delta is nonincreasing)."""
    dlo = _delta(spec, d_e, lo)
    dhi = _delta(spec, d_e, hi)
    if dlo <= target:
        return lo
    if dhi >= target:
        return hi
    return _cross_down(lambda x: _delta(spec, d_e, x) - target, lo, hi, dlo - target, rel_tol)


def _cbcp_snap_structure(net, pop, policy, express, settings):
    """Snap an approximate CBCP solution onto its exact equilibrium.

    Reads the active structure off the seed flows: per (edge, period), which
    groups are fully in the express lane, fully out, or marginal. Given that
    structure the equilibrium decouples: a slot whose marginal group is
    ineligible (or has a slack budget) pins its express total via the exact
    indifference root; a budget-binding eligible group's multiplier solves an
    independent scalar equation over the slots where it is marginal. Returns
    None whenever the structure is ambiguous; the caller then keeps the seed.
    """
    tau = policy.tolls.tau
    E, T = net.n_edges, pop.T
    elig_idx = np.nonzero(pop.eligible)[0]
    budgets = policy.budgets
    k_of = {int(g): k for k, g in enumerate(elig_idx)}
    scale = np.maximum(budgets, 1.0) if budgets.size else budgets
    spend0 = np.einsum("et,etg->g", tau, express)[elig_idx] if elig_idx.size else np.zeros(0)
    slack = np.array([
        budgets[k] > 1e-12 and spend0[k] < budgets[k] - 1e-5 * scale[k]
        for k in range(elig_idx.size)
    ], dtype=bool)

    out = np.zeros_like(express)
    rel = settings.bisection_tol
    # slots where a budget-binding eligible group is marginal, keyed by group
    pending: dict[int, list] = {}
    # spend already pinned by the structure, per eligible group
    fixed_spend = np.zeros(elig_idx.size)

    for e in range(E):
        spec = net.specs[e]
        members = np.nonzero(pop.mask[e])[0]
        if members.size == 0:
            continue
        d_e = float(pop.demand[members].sum())
        for t in range(T):
            tau_et = float(tau[e, t])
            if tau_et <= 0.0:
                out[e, t, members] = pop.demand[members] / (spec.n_gp + 1)
                continue
            y = express[e, t, members]
            d = pop.demand[members]
            band = np.maximum(1e-5 * d, 1e-8)
            full = y >= d - band
            outg = y <= band
            marg = ~(full | outg)
            base = float(d[full].sum())
            for k, g in enumerate(elig_idx):
                if pop.mask[e, g] and budgets[k] > 1e-12:
                    pos = int(np.nonzero(members == g)[0][0])
                    if full[pos]:
                        fixed_spend[k] += tau_et * d[pos]
            if not np.any(marg):
                out[e, t, members] = np.where(full, d, 0.0)
                continue
            midx = members[marg]
            me = midx[pop.eligible[midx]]
            mi = midx[~pop.eligible[midx]]
            if me.size == 0:
                # marginal ineligible level: common VoT pins the express total
                vs = pop.vot[t, mi]
                if vs.max() - vs.min() > 1e-9 * max(vs.max(), 1e-12):
                    return None
                v = float(vs.mean())
                hi = base + float(d[marg].sum())
                x1 = _delta_inverse(spec, d_e, tau_et / v, base, hi, rel)
                share = x1 - base
                dm = float(d[marg].sum())
                y_new = np.where(full, d, 0.0)
                y_new[marg] = share * d[marg] / dm
                out[e, t, members] = y_new
                continue
            if me.size > 1 or mi.size > 0:
                return None
            g = int(me[0])
            k = k_of.get(g)
            if k is None or budgets[k] <= 1e-12:
                return None
            pos = int(np.nonzero(members == g)[0][0])
            lo, hi = base, base + float(d[pos])
            if slack[k]:
                # slack budget: infinite priority, fills to latency equalization
                x1 = _delta_inverse(spec, d_e, 0.0, lo, hi, rel)
                if x1 >= hi - 1e-12:
                    return None
                y_new = np.where(full, d, 0.0)
                y_new[pos] = x1 - base
                out[e, t, members] = y_new
            else:
                y_new = np.where(full, d, 0.0)
                out[e, t, members] = y_new
                pending.setdefault(g, []).append((e, t, lo, hi, pos, members))

    # budget-binding eligible groups: one scalar equation per group
    for k, g in enumerate(elig_idx):
        if budgets[k] <= 1e-12 or slack[k]:
            if budgets.size and fixed_spend[k] > budgets[k] + 1e-9 * scale[k]:
                return None
            continue
        slots = pending.get(int(g), [])
        need = budgets[k] - fixed_spend[k]
        if not slots:
            if fixed_spend[k] > budgets[k] + 1e-9 * scale[k]:
                return None
            continue
        if need < -1e-9 * scale[k]:
            return None
        need = max(need, 0.0)
        if len(slots) == 1:
            e, t, lo, hi, pos, members = slots[0]
            x1 = lo + need / float(tau[e, t])
            if x1 > hi + 1e-9 * max(hi, 1.0):
                return None
            x1 = min(x1, hi)
            out[e, t, members[pos]] = x1 - lo
        else:
            # common multiplier mu: spend(mu) is nonincreasing; bisect on mu
            def spend_at(mu):
                total = 0.0
                for e, t, lo, hi, pos, members in slots:
                    spec = net.specs[e]
                    de = float(pop.demand[members].sum())
                    x1 = _delta_inverse(spec, de, mu * float(tau[e, t]), lo, hi, rel)
                    total += float(tau[e, t]) * (x1 - lo)
                return total

            mu_lo, mu_hi = 0.0, 1.0
            for _ in range(200):
                if spend_at(mu_hi) < need:
                    break
                mu_hi *= 4.0
            if spend_at(mu_lo) < need - 1e-9 * scale[k]:
                return None
            for _ in range(120):
                mid = 0.5 * (mu_lo + mu_hi)
                if spend_at(mid) > need:
                    mu_lo = mid
                else:
                    mu_hi = mid
            mu = 0.5 * (mu_lo + mu_hi)
            for e, t, lo, hi, pos, members in slots:
                spec = net.specs[e]
                de = float(pop.demand[members].sum())
                x1 = _delta_inverse(spec, de, mu * float(tau[e, t]), lo, hi, rel)
                out[e, t, members[pos]] = x1 - lo
    return out


def solve_cbcp(net: ChainNetwork, pop: Population, policy: CBCPPolicy,
               settings: Optional[SolverSettings] = None,
               warm_start: Optional[Flow] = None) -> EquilibriumResult:
    """Frank-Wolfe on the CBCP convex program over the budget-coupled flow set.

    When eligible VoTs vary over periods the program still defines the
    returned flow and a Prop.-5 epsilon bound is attached instead of refusing.
    """
    settings = settings or SolverSettings()
    if pop.eligible.sum() != policy.budgets.size:
        raise ModelError("budgets must align with the population's eligible groups")

    express = _cbcp_try_decoupled(net, pop, policy, settings)
    iterations = 0
    solver_tag = "cbcp-decoupled"
    if express is None:
        # with the polish stage active, Frank-Wolfe only needs to rough in the
        # solution; the interior-point refinement supplies the precision
        fw_budget = min(300, settings.fw_max_iters) if settings.polish else settings.fw_max_iters
        express, iterations = _solve_cbcp_fw(net, pop, policy, settings, warm_start, fw_budget)
        solver_tag = "cbcp-frank-wolfe"
        if settings.polish:
            flow_fw = Flow.from_express(pop, express)
            obj_fw = cbcp_objective(net, pop, policy, flow_fw)
            polished = _cbcp_polish_qp(net, pop, policy)
            if polished is not None:
                obj_p = cbcp_objective(net, pop, policy, Flow.from_express(pop, polished))
                if obj_p <= obj_fw:
                    express = polished
                    solver_tag = "cbcp-frank-wolfe+qp"
            refined = _cbcp_snap_structure(net, pop, policy, express, settings)
            if refined is not None:
                obj_cur = cbcp_objective(net, pop, policy, Flow.from_express(pop, express))
                obj_r = cbcp_objective(net, pop, policy, Flow.from_express(pop, refined))
                if obj_r <= obj_cur + 1e-9 * max(abs(obj_cur), 1.0):
                    express = refined
                    solver_tag += "+exact"
            if solver_tag == "cbcp-frank-wolfe" and settings.fw_max_iters > fw_budget:
                # polish unavailable or not an improvement: spend the full FW budget
                express, more = _solve_cbcp_fw(
                    net, pop, policy, settings, Flow.from_express(pop, express),
                    settings.fw_max_iters - fw_budget,
                )
                iterations += more

    flow = Flow.from_express(pop, express)
    x = lane_flows(net, pop, flow)
    g1, g2 = _cbcp_gradient(net, pop, policy, x)
    s = lmo_cbcp(g1, g2, pop, policy)
    gap = _fw_gap(flow.express, s, g1, g2, pop)
    obj = cbcp_objective(net, pop, policy, flow)
    tol = settings.fw_gap_tol if settings.fw_gap_tol is not None else settings.fw_gap_tol_rel * max(abs(obj), 1.0)
    eps_bound = sensitivity_bound(net, pop)
    return EquilibriumResult(
        flow=flow,
        lane_flow=x,
        vi_residual=vi_residual(net, pop, policy, flow),
        objective=obj,
        iterations=iterations,
        solver=solver_tag,
        fw_gap=max(gap, 0.0),
        converged=gap <= tol,
        epsilon_bound=eps_bound if eps_bound > 0 else None,
    )


def _solve_cbcp_fw(net, pop, policy, settings, warm_start, max_iters=None):
    max_iters = settings.fw_max_iters if max_iters is None else max_iters
    d3 = _demand3(pop)
    if warm_start is not None:
        y = np.clip(warm_start.express.copy(), 0.0, d3)
        tau = policy.tolls.tau
        for k, g in enumerate(np.nonzero(pop.eligible)[0]):
            spend = float((tau * y[:, :, g] * pop.mask[:, g][:, None]).sum())
            if spend > policy.budgets[k] and spend > 0:
                paid = (tau > 0) & pop.mask[:, g][:, None]
                y[:, :, g] = np.where(paid, y[:, :, g] * (policy.budgets[k] / spend), y[:, :, g])
    else:
        y = np.zeros_like(d3)

    flow = Flow.from_express(pop, y)
    obj0 = cbcp_objective(net, pop, policy, flow)
    tol = settings.fw_gap_tol if settings.fw_gap_tol is not None else settings.fw_gap_tol_rel * max(abs(obj0), 1.0)

    it = 0
    for it in range(1, max_iters + 1):
        x = lane_flows(net, pop, Flow.from_express(pop, y))
        g1, g2 = _cbcp_gradient(net, pop, policy, x)
        s = lmo_cbcp(g1, g2, pop, policy)
        gap = _fw_gap(y, s, g1, g2, pop)
        if gap <= tol:
            break
        dirn = s - y
        dx1 = dirn.sum(axis=2)
        dx2 = -dx1
        lin_term = float((dirn * np.where(((~pop.eligible)[None, None, :] & pop.mask[:, None, :]),
                                          policy.tolls.tau[:, :, None] / pop.vot[None, :, :], 0.0)).sum())
        if settings.line_search == "exact":
            gamma = _exact_line_search(net, pop, x, dx1, dx2, lin_term)
        else:
            gamma = 2.0 / (it + 2.0)
        if gamma <= 0.0:
            break
        y = y + gamma * dirn
    return y, it


# ---------------------------------------------------------------------------
# brute-force oracle (tests only; deliberately slow and algorithm-independent)


def oracle_equilibrium(net: ChainNetwork, pop: Population, policy,
                       gap_tol: float = 1e-10, max_iters: int = 400_000) -> Flow:
    """Projected gradient descent with a tiny constant step on the potential.

    Independent of the production solvers: no sorting, no line search, no QP.
    Intended for instances with <= 3 edges, <= 4 groups, T <= 2.
    """
    E, T, G = net.n_edges, pop.T, pop.n_groups
    if E > 3 or G > 4 or T > 2:
        raise SolverError("oracle_equilibrium is restricted to tiny instances")
    d3 = _demand3(pop)
    tau = policy.tolls.tau

    if policy.kind == "dbcp":
        lin = _group_tolls(pop, policy) / pop.vot[None, :, :]
    else:
        lin = np.where(((~pop.eligible)[None, None, :] & pop.mask[:, None, :]),
                       tau[:, :, None] / pop.vot[None, :, :], 0.0)

    groups_per_edge = pop.mask.sum(axis=1).max()
    L = max(
        (s.slope if s.variant == "pwa" else s.bpr_params[0] * s.bpr_params[1] * s.bpr_params[2] / s.bpr_params[3] * 4)
        * (1.0 + 1.0 / s.n_gp)
        for s in net.specs
    ) * max(int(groups_per_edge), 1)
    step = 1.0 / max(L, 1e-6)

    elig_idx = np.nonzero(pop.eligible)[0]

    def project(y):
        y = np.clip(y, 0.0, d3)
        if policy.kind == "cbcp":
            for k, g in enumerate(elig_idx):
                B = policy.budgets[k]
                w = tau * pop.mask[:, g][:, None]
                spend = float((w * y[:, :, g]).sum())
                if spend <= B + 1e-15:
                    continue
                lo, hi = 0.0, (y[:, :, g].max() / max(w[w > 0].min(), 1e-12)) + 1.0
                for _ in range(200):
                    lam = 0.5 * (lo + hi)
                    z = np.clip(y[:, :, g] - lam * w, 0.0, d3[:, :, g])
                    if float((w * z).sum()) > B:
                        lo = lam
                    else:
                        hi = lam
                y[:, :, g] = np.clip(y[:, :, g] - hi * w, 0.0, d3[:, :, g])
        return y

    def grad(y):
        flow = Flow.from_express(pop, y)
        x = lane_flows(net, pop, flow)
        l1 = np.zeros((E, T))
        l2 = np.zeros((E, T))
        for e in range(E):
            l1[e] = net.specs[e].latency(EXPRESS, x.x[e, EXPRESS, :])
            l2[e] = net.specs[e].latency(GP, x.x[e, GP, :])
        return (l1[:, :, None] - l2[:, :, None]) * pop.mask[:, None, :] + lin

    def fw_gap_at(y):
        g = grad(y)
        if policy.kind == "dbcp":
            s = np.where((g < 0) & pop.mask[:, None, :], d3, 0.0)
        else:
            s = np.zeros_like(y)
            inel = (~pop.eligible)[None, None, :] & pop.mask[:, None, :]
            s = np.where(inel & (g < 0), d3, 0.0)
            for k, g_i in enumerate(elig_idx):
                span = np.nonzero(pop.mask[:, g_i])[0]
                sav = (-g[span, :, g_i]).ravel()
                tg = np.broadcast_to(tau[span, :], (span.size, T)).ravel()
                zg = _knapsack_express(sav, tg, float(pop.demand[g_i]), float(policy.budgets[k]))
                s[span, :, g_i] = zg.reshape(span.size, T)
        return float(((y - s) * g).sum())

    y = project(d3 * 0.5)
    for it in range(max_iters):
        y = project(y - step * grad(y))
        if it % 200 == 199 and fw_gap_at(y) <= gap_tol:
            break
    return Flow.from_express(pop, y)
