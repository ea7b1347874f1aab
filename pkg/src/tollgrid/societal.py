"""Societal cost, toll revenue, welfare constraints, and summary metrics.

The societal cost is a weighted combination of eligible users' travel cost,
ineligible users' travel cost (latency plus tolls paid), and the negative of
collected toll revenue. Under credits, eligible users contribute no toll
terms (credits pay the tolls); under discounts they pay, and generate, the
discounted toll (1 - alpha) * tau.
"""

from __future__ import annotations

from dataclasses import dataclass
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
)


@dataclass(frozen=True)
class SocietalWeights:
    """Nonnegative weights (lambda_E, lambda_R, lambda_I)."""

    lambda_e: float
    lambda_r: float
    lambda_i: float

    def __post_init__(self):
        if min(self.lambda_e, self.lambda_r, self.lambda_i) < 0:
            raise ModelError("societal weights must be nonnegative")

    @classmethod
    def from_triple(cls, triple) -> "SocietalWeights":
        le, lr, li = triple
        return cls(le, lr, li)

    def as_triple(self) -> tuple[float, float, float]:
        return (self.lambda_e, self.lambda_r, self.lambda_i)


def _edge_latencies(net: ChainNetwork, x: LaneFlow):
    E, T = x.x.shape[0], x.x.shape[2]
    l1 = np.zeros((E, T))
    l2 = np.zeros((E, T))
    for e in range(E):
        l1[e] = net.specs[e].latency(EXPRESS, x.x[e, EXPRESS, :])
        l2[e] = net.specs[e].latency(GP, x.x[e, GP, :])
    return l1, l2


def user_costs(net: ChainNetwork, pop: Population, y: Flow, x: LaneFlow, policy):
    """(eligible, ineligible) total travel costs in dollars.

    Eligible cost includes the discounted out-of-pocket toll under DBCP and no
    toll under CBCP; ineligible cost always includes full express tolls.
    """
    l1, l2 = _edge_latencies(net, x)
    v = pop.vot[None, :, :]
    lat = v * (l1[:, :, None] * y.express + l2[:, :, None] * y.gp)
    tau = policy.tolls.tau[:, :, None]
    if policy.kind == "dbcp":
        toll_e = (1.0 - policy.alpha[:, :, None]) * tau * y.express
    else:
        toll_e = np.zeros_like(y.express)
    toll_i = tau * y.express
    elig = pop.eligible[None, None, :]
    elig_cost = float((lat * elig).sum() + (toll_e * elig).sum())
    inelig_cost = float((lat * ~elig).sum() + (toll_i * ~elig).sum())
    return elig_cost, inelig_cost


def toll_revenue(y: Flow, policy, pop: Population) -> float:
    """Collected tolls: ineligible pay tau; under DBCP eligible add (1-alpha)*tau."""
    tau = policy.tolls.tau[:, :, None]
    elig = pop.eligible[None, None, :]
    rev = float((tau * y.express * ~elig).sum())
    if policy.kind == "dbcp":
        rev += float(((1.0 - policy.alpha[:, :, None]) * tau * y.express * elig).sum())
    return rev


def societal_cost_cbcp(net: ChainNetwork, pop: Population, y: Flow, x: LaneFlow,
                       policy: CBCPPolicy, w: SocietalWeights) -> float:
    elig, inelig = user_costs(net, pop, y, x, policy)
    return w.lambda_e * elig + w.lambda_i * inelig - w.lambda_r * toll_revenue(y, policy, pop)


def societal_cost_dbcp(net: ChainNetwork, pop: Population, y: Flow, x: LaneFlow,
                       policy: DBCPPolicy, w: SocietalWeights) -> float:
    elig, inelig = user_costs(net, pop, y, x, policy)
    return w.lambda_e * elig + w.lambda_i * inelig - w.lambda_r * toll_revenue(y, policy, pop)


def societal_cost(net, pop, y, x, policy, w) -> float:
    if policy.kind == "cbcp":
        return societal_cost_cbcp(net, pop, y, x, policy, w)
    return societal_cost_dbcp(net, pop, y, x, policy, w)


def societal_cost_slot(net, pop, y: Flow, x: LaneFlow, policy, w, e: int, t: int) -> float:
    """The (e, t) summand of the societal cost (used by the decomposed optimizer)."""
    spec = net.specs[e]
    l1 = spec.latency(EXPRESS, float(x.x[e, EXPRESS, t]))
    l2 = spec.latency(GP, float(x.x[e, GP, t]))
    v = pop.vot[t]
    lat = v * (l1 * y.express[e, t] + l2 * y.gp[e, t])
    tau = float(policy.tolls.tau[e, t])
    elig = pop.eligible
    if policy.kind == "dbcp":
        toll_e = (1.0 - float(policy.alpha[e, t])) * tau * y.express[e, t]
    else:
        toll_e = np.zeros(pop.n_groups)
    toll_i = tau * y.express[e, t]
    elig_cost = float((lat * elig).sum() + (toll_e * elig).sum())
    inelig_cost = float((lat * ~elig).sum() + (toll_i * ~elig).sum())
    rev = float((toll_i * ~elig).sum()) + (float((toll_e * elig).sum()) if policy.kind == "dbcp" else 0.0)
    return w.lambda_e * elig_cost + w.lambda_i * inelig_cost - w.lambda_r * rev


@dataclass(frozen=True)
class ConstraintSpec:
    """Welfare constraints h(y, tau) <= 0 evaluated as stacked residuals.

    Residuals depend on eligible flows only through per-(edge, lane, period)
    totals, so flows with equal eligible lane totals get identical residuals.
    """

    toll_cap: Optional[np.ndarray] = None      # scalar or [E, T]; tau <= cap
    access_floor: Optional[float] = None       # sum eligible express >= m_y^E per (e, t)
    service_margin: Optional[float] = None     # l1(x1) <= l2(x2) - m_l per (e, t)
    prop7_bounds: Optional[dict] = None        # m_y_e, M_y_e, m_y_i, M_y_i, M_x

    def __post_init__(self):
        if self.toll_cap is not None:
            cap = np.asarray(self.toll_cap, dtype=float)
            if np.any(cap < 0):
                raise ModelError("toll caps must be nonnegative")
            object.__setattr__(self, "toll_cap", cap)

    @classmethod
    def default_experiment(cls, cap: float = 5.0) -> "ConstraintSpec":
        """Uniform toll cap only, matching the corridor experiments."""
        return cls(toll_cap=np.asarray(cap))


def eval_constraints(spec: ConstraintSpec, net: ChainNetwork, pop: Population,
                     y: Flow, x: LaneFlow, tau: np.ndarray) -> np.ndarray:
    """Stacked residual vector; the point is feasible iff every entry <= 0."""
    res = []
    tau = np.asarray(tau, dtype=float)
    if spec.toll_cap is not None:
        cap = np.broadcast_to(spec.toll_cap, tau.shape)
        res.append((tau - cap).ravel())
        res.append((-tau).ravel())
    elig = pop.eligible[None, None, :]
    if spec.access_floor is not None:
        elig_express = (y.express * elig).sum(axis=2)
        res.append((spec.access_floor - elig_express).ravel())
    if spec.service_margin is not None:
        l1, l2 = _edge_latencies(net, x)
        res.append((l1 - l2 + spec.service_margin).ravel())
    if spec.prop7_bounds is not None:
        b = spec.prop7_bounds
        elig_express = (y.express * elig).sum(axis=2)
        inelig_express = (y.express * ~elig).sum(axis=2)
        x1 = x.x[:, EXPRESS, :]
        if "m_y_e" in b:
            res.append((b["m_y_e"] - elig_express).ravel())
        if "M_y_e" in b:
            res.append((elig_express - b["M_y_e"]).ravel())
        if "m_y_i" in b:
            res.append((b["m_y_i"] - inelig_express).ravel())
        if "M_y_i" in b:
            res.append((inelig_express - b["M_y_i"]).ravel())
        if "M_x" in b:
            res.append((x1 - b["M_x"]).ravel())
    if not res:
        return np.zeros(0)
    return np.concatenate(res)


def eval_constraints_slot(spec: ConstraintSpec, net: ChainNetwork, pop: Population,
                          e: int, t: int, express_slot: np.ndarray, tau_et: float) -> np.ndarray:
    """The (e, t) components of eval_constraints, for the decomposed optimizer.

    ``express_slot`` holds per-group express flows on the slot (off-span zero).
    """
    res = []
    if spec.toll_cap is not None:
        cap = np.broadcast_to(spec.toll_cap, (net.n_edges, pop.T))[e, t]
        res.append(tau_et - float(cap))
        res.append(-tau_et)
    x1 = float(express_slot.sum())
    x2 = pop.edge_demand(e) - x1
    elig = pop.eligible
    if spec.access_floor is not None:
        res.append(spec.access_floor - float(express_slot[elig].sum()))
    if spec.service_margin is not None:
        s = net.specs[e]
        res.append(s.latency(EXPRESS, x1) - s.latency(GP, x2) + spec.service_margin)
    if spec.prop7_bounds is not None:
        b = spec.prop7_bounds
        ee = float(express_slot[elig].sum())
        ie = float(express_slot[~elig].sum())
        if "m_y_e" in b:
            res.append(b["m_y_e"] - ee)
        if "M_y_e" in b:
            res.append(ee - b["M_y_e"])
        if "m_y_i" in b:
            res.append(b["m_y_i"] - ie)
        if "M_y_i" in b:
            res.append(ie - b["M_y_i"])
        if "M_x" in b:
            res.append(x1 - b["M_x"])
    return np.asarray(res, dtype=float)


@dataclass
class MetricsReport:
    usage_all: float
    usage_eligible: float
    usage_ineligible: float
    tt_express: float
    tt_gp: float
    elig_cost: float
    inelig_cost: float
    revenue: float


def _lane_time(net, x: LaneFlow, lane: int, weighting: str) -> float:
    l1, l2 = _edge_latencies(net, x)
    lat = l1 if lane == EXPRESS else l2
    w = x.x[:, lane, :]
    if weighting == "edge_mean":
        return float(lat.mean())
    # corridor traversal time: per-edge flow-weighted period average, summed over edges
    total = 0.0
    for e in range(lat.shape[0]):
        we = w[e]
        if we.sum() > 0:
            total += float((lat[e] * we).sum() / we.sum())
        else:
            total += float(lat[e].mean())
    return total


def metrics(net: ChainNetwork, pop: Population, y: Flow, x: LaneFlow, policy,
            time_weighting: str = "corridor_sum") -> MetricsReport:
    """Express usage shares and lane travel times.

    Usage is express flow as a share of total span demand, aggregated over
    edges and periods (demand weighted). Travel time is the corridor
    traversal time by default; ``time_weighting='edge_mean'`` gives the
    unweighted per-(edge, period) mean instead.
    """
    elig = pop.eligible[None, None, :]
    demand3 = np.where(pop.mask[:, None, :], pop.demand[None, None, :], 0.0)

    def usage(select) -> float:
        denom = float((demand3 * select).sum())
        if denom == 0:
            return 0.0
        return 100.0 * float((y.express * select).sum()) / denom

    elig_cost, inelig_cost = user_costs(net, pop, y, x, policy)
    return MetricsReport(
        usage_all=usage(np.ones_like(elig, dtype=bool)),
        usage_eligible=usage(elig),
        usage_ineligible=usage(~elig),
        tt_express=_lane_time(net, x, EXPRESS, time_weighting),
        tt_gp=_lane_time(net, x, GP, time_weighting),
        elig_cost=elig_cost,
        inelig_cost=inelig_cost,
        revenue=toll_revenue(y, policy, pop),
    )
