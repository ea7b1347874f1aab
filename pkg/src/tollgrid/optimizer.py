"""Zeroth-order bilevel descent over policy parameters.

The credit-policy search perturbs the joint (toll, budget) vector along a
uniform sphere direction, evaluates the equilibrium societal cost at the
query and current points, and takes a projected step against the scaled
finite-difference surrogate. The discount-policy search exploits the
per-(edge, period) decomposition of discount equilibria and runs an
independent 2-D descent on each slot's societal-cost summand.

Candidates whose equilibrium violates the welfare constraints, or whose
solve fails, evaluate to +inf and leave the iterate unchanged (recorded as
rejected). All randomness derives from one 64-bit seed through a
counter-based generator; slot descents draw from streams keyed by slot
index, so runs are reproducible bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .equilibrium import SolverError, SolverSettings, solve_cbcp, solve_dbcp_edge, vi_residual
from .model import (
    CBCPPolicy,
    ChainNetwork,
    DBCPPolicy,
    Flow,
    ModelError,
    Population,
    TollSchedule,
    lane_flows,
)
from .societal import (
    ConstraintSpec,
    SocietalWeights,
    eval_constraints,
    eval_constraints_slot,
    societal_cost_cbcp,
    societal_cost_slot,
)


@dataclass
class ZOSettings:
    eta: float = 0.5
    delta: float = 0.1
    n_iter: int = 2000
    seed: int = 0
    toll_cap: float = 5.0
    feastol: float = 1e-7
    zero_subsidy: bool = False        # pin budgets (CBCP) / discounts (DBCP) at 0

    def __post_init__(self):
        if not (self.eta > 0 and self.delta > 0):
            raise ModelError("eta and delta must be positive")
        if self.n_iter < 1:
            raise ModelError("n_iter must be >= 1")


@dataclass
class TracePoint:
    iteration: int
    params: np.ndarray
    cost: float
    vi_residual: float = 0.0
    rejected: bool = False


@dataclass
class OptimizationTrace:
    kind: str
    points: list[TracePoint] = field(default_factory=list)
    best_index: int = -1
    best_cost: float = math.inf
    best_policy: Optional[object] = None
    rejected_queries: int = 0

    def costs(self) -> np.ndarray:
        return np.array([p.cost for p in self.points])


def sphere_sample(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the unit sphere (normalized Gaussian)."""
    if dim < 1:
        raise ModelError("dim must be >= 1")
    while True:
        v = rng.standard_normal(dim)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def _rng_for(seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(key,))))


# ---------------------------------------------------------------------------
# credit policies (joint toll/budget search)


def _budget_caps(pop: Population, toll_cap: float) -> np.ndarray:
    """Per-group largest spendable amount: cap * T * span length * demand."""
    caps = []
    for g in np.nonzero(pop.eligible)[0]:
        grp = pop.groups[g]
        caps.append(toll_cap * pop.T * len(grp.span) * grp.demand)
    return np.array(caps)


def zo_cbcp(
    net: ChainNetwork,
    pop: Population,
    w: SocietalWeights,
    cspec: ConstraintSpec,
    init: tuple[np.ndarray, np.ndarray],
    settings: ZOSettings,
    solver_settings: Optional[SolverSettings] = None,
) -> OptimizationTrace:
    """Projected zeroth-order descent on the equilibrium credit-policy cost."""
    solver_settings = solver_settings or SolverSettings(polish=False, fw_gap_tol_rel=1e-6, fw_max_iters=3000)
    E, T = net.n_edges, pop.T
    n_tau = E * T
    n_b = pop.n_eligible
    dim = n_tau + n_b
    lo = np.zeros(dim)
    hi = np.concatenate([np.full(n_tau, settings.toll_cap),
                         np.zeros(n_b) if settings.zero_subsidy else _budget_caps(pop, settings.toll_cap)])
    rng = _rng_for(settings.seed, 0)

    tau0, b0 = init
    params = np.clip(np.concatenate([np.asarray(tau0, dtype=float).ravel(),
                                     np.asarray(b0, dtype=float).ravel()]), lo, hi)
    trace = OptimizationTrace(kind="cbcp")
    warm: Optional[Flow] = None

    def evaluate(p, warm_start):
        tau = p[:n_tau].reshape(E, T)
        policy = CBCPPolicy(TollSchedule(tau), p[n_tau:])
        try:
            res = solve_cbcp(net, pop, policy, solver_settings, warm_start=warm_start)
        except (SolverError, ModelError, FloatingPointError):
            return math.inf, None, None, math.inf
        resid = eval_constraints(cspec, net, pop, res.flow, res.lane_flow, tau)
        if resid.size and resid.max() > settings.feastol:
            return math.inf, policy, res.flow, res.vi_residual
        cost = societal_cost_cbcp(net, pop, res.flow, res.lane_flow, policy, w)
        if not math.isfinite(cost):
            return math.inf, policy, res.flow, res.vi_residual
        return cost, policy, res.flow, res.vi_residual

    cost, policy, flow, vi = evaluate(params, None)
    warm = flow
    for i in range(settings.n_iter):
        trace.points.append(TracePoint(i, params.copy(), cost, vi, rejected=not math.isfinite(cost)))
        if cost < trace.best_cost:
            trace.best_cost = cost
            trace.best_index = i
            trace.best_policy = policy
        v = sphere_sample(dim, rng)
        query = np.clip(params + settings.delta / ((i + 1) ** 0.25 * math.sqrt(dim)) * v, lo, hi)
        q_cost, _, q_flow, _ = evaluate(query, warm)
        if math.isfinite(q_cost) and math.isfinite(cost):
            surrogate = ((i + 1) ** 0.25) * dim**1.5 / settings.delta * (q_cost - cost)
            step = settings.eta / ((i + 1) ** 0.5 * dim)
            params = np.clip(params - step * surrogate * v, lo, hi)
        else:
            trace.rejected_queries += 1
        cost, policy, flow, vi = evaluate(params, q_flow if q_flow is not None else warm)
        if flow is not None:
            warm = flow
    return trace


# ---------------------------------------------------------------------------
# discount policies (decomposed per-slot search)


def _slot_cost(net, pop, w, cspec, e, t, tau_et, alpha_et, settings,
               bisection_tol=1e-12):
    """Equilibrium societal-cost summand for one slot, +inf when infeasible."""
    members = np.nonzero(pop.mask[e])[0]
    express = np.zeros(pop.n_groups)
    if members.size:
        vh = np.where(
            pop.eligible[members],
            np.where(alpha_et >= 1.0, np.inf, pop.vot[t, members] / max(1.0 - alpha_et, 1e-300)),
            pop.vot[t, members],
        )
        y1 = solve_dbcp_edge(net.specs[e], pop.demand[members], vh, tau_et, bisection_tol)
        express[members] = y1
    resid = eval_constraints_slot(cspec, net, pop, e, t, express, tau_et)
    if resid.size and resid.max() > settings.feastol:
        return math.inf, express
    return _slot_cost_at(net, pop, w, e, t, tau_et, alpha_et, express), express


def zo_dbcp(
    net: ChainNetwork,
    pop: Population,
    w: SocietalWeights,
    cspec: ConstraintSpec,
    init: tuple[np.ndarray, np.ndarray],
    settings: ZOSettings,
    initial_flow: Optional[Flow] = None,
) -> OptimizationTrace:
    """Independent 2-D zeroth-order descents on each (edge, period) summand.

    When ``initial_flow`` is given (e.g. a certified constructed equilibrium),
    iteration 0 is evaluated at that flow instead of a fresh solve, so the
    recorded starting cost is exactly the construction's cost.

    The returned best assembles each slot's own best iterate (slots are
    independent); one extra trace row holds the assembled policy and its
    total cost, keeping best = min over trace.
    """
    E, T = net.n_edges, pop.T
    tau0, alpha0 = init
    tau0 = np.asarray(tau0, dtype=float).reshape(E, T)
    alpha0 = np.asarray(alpha0, dtype=float).reshape(E, T)
    alpha_hi = 0.0 if settings.zero_subsidy else 1.0
    n_iter = settings.n_iter
    dim = 2

    costs = np.zeros((E, T, n_iter))
    taus = np.zeros((E, T, n_iter))
    alphas = np.zeros((E, T, n_iter))
    rejected = 0

    for e in range(E):
        for t in range(T):
            rng = _rng_for(settings.seed, 1000 + e * T + t)
            p = np.array([min(max(tau0[e, t], 0.0), settings.toll_cap),
                          min(max(alpha0[e, t], 0.0), alpha_hi)])
            lo = np.zeros(2)
            hi = np.array([settings.toll_cap, alpha_hi])

            def evaluate(q):
                c, _ = _slot_cost(net, pop, w, cspec, e, t, float(q[0]), float(q[1]), settings)
                return c

            if initial_flow is not None:
                # cost of the supplied certified flow at the initial parameters
                express = initial_flow.express[e, t]
                resid = eval_constraints_slot(cspec, net, pop, e, t, express, float(p[0]))
                if resid.size and resid.max() > settings.feastol:
                    cost = math.inf
                else:
                    cost = _slot_cost_at(net, pop, w, e, t, float(p[0]), float(p[1]), express)
            else:
                cost = evaluate(p)
            for i in range(n_iter):
                costs[e, t, i] = cost
                taus[e, t, i] = p[0]
                alphas[e, t, i] = p[1]
                v = sphere_sample(dim, rng)
                query = np.clip(p + settings.delta / (math.sqrt(2) * (i + 1) ** 0.25) * v, lo, hi)
                q_cost = evaluate(query)
                if math.isfinite(q_cost) and math.isfinite(cost):
                    surrogate = (i + 1) ** 0.25 * 2**1.5 / settings.delta * (q_cost - cost)
                    step = settings.eta / (2 * (i + 1) ** 0.5)
                    p = np.clip(p - step * surrogate * v, lo, hi)
                else:
                    rejected += 1
                cost = evaluate(p)

    trace = OptimizationTrace(kind="dbcp", rejected_queries=rejected)
    totals = costs.sum(axis=(0, 1))
    for i in range(n_iter):
        params = np.concatenate([taus[:, :, i].ravel(), alphas[:, :, i].ravel()])
        trace.points.append(TracePoint(i, params, float(totals[i]),
                                       rejected=not math.isfinite(totals[i])))
    best_idx = costs.argmin(axis=2)
    best_tau = np.take_along_axis(taus, best_idx[:, :, None], axis=2)[:, :, 0]
    best_alpha = np.take_along_axis(alphas, best_idx[:, :, None], axis=2)[:, :, 0]
    best_total = float(np.take_along_axis(costs, best_idx[:, :, None], axis=2).sum())
    trace.points.append(TracePoint(n_iter, np.concatenate([best_tau.ravel(), best_alpha.ravel()]),
                                   best_total))
    best_i = int(np.argmin([p.cost for p in trace.points]))
    trace.best_index = best_i
    trace.best_cost = trace.points[best_i].cost
    tau_b = trace.points[best_i].params[: E * T].reshape(E, T)
    alpha_b = trace.points[best_i].params[E * T:].reshape(E, T)
    trace.best_policy = DBCPPolicy(TollSchedule(tau_b), alpha_b)
    return trace


def _slot_cost_at(net, pop, w, e, t, tau_et, alpha_et, express):
    """Slot cost at a given express allocation (no solve)."""
    spec = net.specs[e]
    x1 = float(express.sum())
    x2 = pop.edge_demand(e) - x1
    l1 = spec.latency(0, x1)
    l2 = spec.latency(1, x2)
    v = pop.vot[t]
    gp = np.where(pop.mask[e], pop.demand - express, 0.0)
    lat = v * (l1 * express + l2 * gp)
    elig = pop.eligible
    toll_e = (1.0 - alpha_et) * tau_et * express
    toll_i = tau_et * express
    elig_cost = float((lat * elig).sum() + (toll_e * elig).sum())
    inelig_cost = float((lat * ~elig).sum() + (toll_i * ~elig).sum())
    rev = float((toll_i * ~elig).sum() + (toll_e * elig).sum())
    return w.lambda_e * elig_cost + w.lambda_i * inelig_cost - w.lambda_r * rev
