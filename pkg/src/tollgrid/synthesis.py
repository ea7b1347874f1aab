"""Executable policy constructions and the dominance-check harness.

From a credit policy and its equilibrium, a matching discount policy is built
per (edge, period) by one of three cases: (1) positive toll with express
faster than GP, where the discount is set so the marginal eligible VoT just
clears the ineligible entry threshold; (2) positive toll with equalized (or
flat) latencies, where a full discount reproduces the same flow; (3) zero
toll, where the flow transfers unchanged. The constructed flow matches the
credit equilibrium's ineligible express flows group-by-group and its total
eligible express flow, and is certified as a discount equilibrium by its
variational-inequality residual.

The reverse construction (single edge, single period, single eligible group)
assigns the eligible group a budget equal to its discounted-toll spend and
certifies the same flow as a credit equilibrium.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .equilibrium import solve_dbcp, vi_residual
from .model import (
    EXPRESS,
    GP,
    CBCPPolicy,
    ChainNetwork,
    DBCPPolicy,
    Flow,
    LaneFlow,
    Population,
    TollSchedule,
    lane_flows,
)
from .societal import SocietalWeights, societal_cost, toll_revenue, user_costs

CERT_TOL = 1e-9


class AssumptionViolation(RuntimeError):
    """A stated construction precondition fails on this instance."""


class ConstructionError(RuntimeError):
    pass


@dataclass
class ConstructionRecord:
    edge: int
    period: int
    case: int                       # 1: tau>0, x1<x2; 2: tau>0, x1>=x2 (alpha=1); 3: tau=0
    alpha: float
    v_bar_i: Optional[float] = None
    v_bar_e: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "edge": self.edge,
            "period": self.period,
            "case": self.case,
            "alpha": self.alpha,
            "v_bar_i": self.v_bar_i,
            "v_bar_e": self.v_bar_e,
        }


def verify_assumption_4(net: ChainNetwork, pop: Population, tolls: TollSchedule,
                        tol: float = 1e-9):
    """Check that no eligible group reaches the express lane without subsidy.

    Solves the zero-discount equilibrium and requires zero eligible express
    flow on every tolled slot; raises with the first offending (e, t, g).
    """
    zero = DBCPPolicy(tolls, np.zeros_like(tolls.tau))
    res = solve_dbcp(net, pop, zero)
    tau = tolls.tau
    for e in range(net.n_edges):
        for t in range(pop.T):
            if tau[e, t] <= 0:
                continue
            for g in np.nonzero(pop.mask[e] & pop.eligible)[0]:
                if res.flow.express[e, t, g] > tol * max(pop.demand[g], 1.0):
                    raise AssumptionViolation(
                        f"eligible group {pop.groups[g].id} gains unsubsidized express "
                        f"access at edge {e}, period {t} "
                        f"(flow {res.flow.express[e, t, g]:.3g})"
                    )


def construct_dbcp_from_cbcp(
    net: ChainNetwork,
    pop: Population,
    cbcp: CBCPPolicy,
    y: Flow,
    check_assumptions: bool = True,
) -> tuple[DBCPPolicy, Flow, list[ConstructionRecord]]:
    """Build a discount policy whose equilibrium matches a credit equilibrium.

    Matching: ineligible express flows equal group-by-group; total eligible
    express flow equal per (edge, period), reassigned to eligible groups in
    decreasing VoT order. The constructed flow is VI-certified before return.
    """
    if check_assumptions:
        verify_assumption_4(net, pop, cbcp.tolls)
    x = lane_flows(net, pop, y)
    E, T = net.n_edges, pop.T
    tau = cbcp.tolls.tau
    alpha = np.zeros((E, T))
    express = y.express.copy()
    records: list[ConstructionRecord] = []

    for e in range(E):
        spec = net.specs[e]
        elig_on_edge = np.nonzero(pop.mask[e] & pop.eligible)[0]
        for t in range(T):
            x1 = float(x.x[e, EXPRESS, t])
            x2 = float(x.x[e, GP, t])
            tau_et = float(tau[e, t])
            if tau_et == 0.0:
                records.append(ConstructionRecord(e, t, 3, 0.0))
                continue
            gap = spec.latency(GP, x2) - spec.latency(EXPRESS, x1)
            if x1 >= x2 or gap <= 1e-13:
                # equalized or flat latencies: a full discount keeps everyone put
                alpha[e, t] = 1.0
                records.append(ConstructionRecord(e, t, 2, 1.0))
                continue
            v_bar_i = tau_et / gap
            elig_total = float(y.express[e, t, elig_on_edge].sum()) if elig_on_edge.size else 0.0
            if elig_on_edge.size == 0:
                # no eligible groups here: any alpha below the entry level works
                alpha[e, t] = 0.0
                records.append(ConstructionRecord(e, t, 3 if tau_et == 0 else 1, 0.0, v_bar_i, None))
                continue
            vots = pop.vot[t, elig_on_edge]
            dems = pop.demand[elig_on_edge]
            order = np.argsort(-vots, kind="stable")
            cum = np.cumsum(dems[order])
            # smallest VoT whose descending cumulative demand covers the target
            v_bar_e = None
            for pos, idx in enumerate(order):
                if cum[pos] >= elig_total - 1e-12 * max(elig_total, 1.0):
                    v_bar_e = float(vots[idx])
                    break
            if v_bar_e is None:
                v_bar_e = float(vots[order[-1]])
            if v_bar_e >= v_bar_i:
                raise AssumptionViolation(
                    f"threshold eligible VoT {v_bar_e:.4g} reaches the ineligible entry "
                    f"level {v_bar_i:.4g} at edge {e}, period {t}"
                )
            a = 1.0 - v_bar_e / v_bar_i
            alpha[e, t] = a
            tie = np.abs(vots - v_bar_e) <= 1e-12 * max(v_bar_e, 1.0)
            above = vots > v_bar_e + 1e-12 * max(v_bar_e, 1.0)
            residual = elig_total - float(dems[above].sum())
            residual = max(residual, 0.0)
            newx = np.zeros_like(dems)
            newx[above] = dems[above]
            tied_dem = float(dems[tie].sum())
            if tied_dem > 0:
                newx[tie] = residual * dems[tie] / tied_dem
            express[e, t, elig_on_edge] = newx
            records.append(ConstructionRecord(e, t, 1, a, v_bar_i, v_bar_e))

    flow_hat = Flow.from_express(pop, express)
    policy = DBCPPolicy(cbcp.tolls, alpha)
    eps = vi_residual(net, pop, policy, flow_hat)
    if eps > CERT_TOL:
        raise ConstructionError(f"constructed flow failed VI certification (eps = {eps:.3g})")
    return policy, flow_hat, records


@dataclass
class Prop7Certificate:
    budget: float
    vi_residual: float
    certified: bool
    eligible_revenue_term: float     # (1 - alpha) * tau * y1^{gE}

    def cost_gap(self, w: SocietalWeights) -> float:
        """f_D - f_C at the shared flow: (lambda_E - lambda_R) * revenue term."""
        return (w.lambda_e - w.lambda_r) * self.eligible_revenue_term


def construct_cbcp_from_dbcp(
    net: ChainNetwork,
    pop: Population,
    dbcp: DBCPPolicy,
    y: Flow,
) -> tuple[CBCPPolicy, Prop7Certificate]:
    """Single-edge, single-period reverse construction: budget = toll spend."""
    if net.n_edges != 1 or pop.T != 1:
        raise ConstructionError("reverse construction requires a single edge and T = 1")
    elig_idx = np.nonzero(pop.eligible)[0]
    if elig_idx.size != 1:
        raise ConstructionError("reverse construction requires exactly one eligible group")
    g = int(elig_idx[0])
    tau = float(dbcp.tolls.tau[0, 0])
    a = float(dbcp.alpha[0, 0])
    y1 = float(y.express[0, 0, g])
    budget = tau * y1
    policy = CBCPPolicy(dbcp.tolls, np.array([budget]))
    eps = vi_residual(net, pop, policy, y)
    return policy, Prop7Certificate(
        budget=budget,
        vi_residual=eps,
        certified=eps <= CERT_TOL,
        eligible_revenue_term=(1.0 - a) * tau * y1,
    )


@dataclass
class TheoremCheckEntry:
    label: str
    ok: bool
    precondition_ok: bool
    message: str = ""
    f_cbcp: Optional[float] = None
    f_dbcp: Optional[float] = None
    margin: Optional[float] = None                 # f_C - f_D
    eligible_revenue: Optional[float] = None       # discounted eligible tolls in y_hat
    strict_checked: bool = False
    strict_ok: Optional[bool] = None
    dominance_violation: float = 0.0               # max per-(e,t) eligible latency-cost excess


@dataclass
class TheoremCheckReport:
    weights: SocietalWeights
    entries: list[TheoremCheckEntry] = field(default_factory=list)

    @property
    def all_ok(self) -> bool:
        return all(e.ok for e in self.entries)


def _eligible_latency_cost_by_slot(net, pop, y: Flow, x: LaneFlow) -> np.ndarray:
    from .societal import _edge_latencies

    l1, l2 = _edge_latencies(net, x)
    v = pop.vot[None, :, :]
    elig = pop.eligible[None, None, :]
    per = v * (l1[:, :, None] * y.express + l2[:, :, None] * y.gp) * elig
    return per.sum(axis=2)


def theorem_check(
    net: ChainNetwork,
    pop: Population,
    w: SocietalWeights,
    cbcp_candidates: Sequence[tuple[str, CBCPPolicy, Flow]],
    tol: float = 1e-9,
) -> TheoremCheckReport:
    """For each credit candidate, build its discount counterpart and compare costs.

    Requires lambda_R >= lambda_E for the non-strict inequality; the strict
    version additionally needs lambda_R > lambda_E and a witness slot where
    some eligible group holds express flow with x1 < x2. Precondition
    failures are reported per candidate, never asserted through.
    """
    report = TheoremCheckReport(weights=w)
    for label, policy, y in cbcp_candidates:
        entry = TheoremCheckEntry(label=label, ok=True, precondition_ok=True)
        if w.lambda_r < w.lambda_e:
            entry.precondition_ok = False
            entry.ok = False
            entry.message = "lambda_R < lambda_E: theorem does not apply"
            report.entries.append(entry)
            continue
        try:
            dbcp, y_hat, _ = construct_dbcp_from_cbcp(net, pop, policy, y)
        except (AssumptionViolation, ConstructionError) as exc:
            entry.precondition_ok = False
            entry.ok = False
            entry.message = str(exc)
            report.entries.append(entry)
            continue
        x = lane_flows(net, pop, y)
        x_hat = lane_flows(net, pop, y_hat)
        f_c = societal_cost(net, pop, y, x, policy, w)
        f_d = societal_cost(net, pop, y_hat, x_hat, dbcp, w)
        entry.f_cbcp, entry.f_dbcp = f_c, f_d
        entry.margin = f_c - f_d
        elig_rev = toll_revenue(y_hat, dbcp, pop) - toll_revenue(y, policy, pop)
        entry.eligible_revenue = elig_rev
        costs = _eligible_latency_cost_by_slot(net, pop, y_hat, x_hat) - \
            _eligible_latency_cost_by_slot(net, pop, y, x)
        entry.dominance_violation = float(max(costs.max(), 0.0)) if costs.size else 0.0
        if f_d > f_c + tol:
            entry.ok = False
            entry.message = f"constructed discount cost exceeds credit cost by {f_d - f_c:.3g}"
        witness = bool(np.any(
            (y.express * pop.eligible[None, None, :] > tol)
            & ((x.x[:, EXPRESS, :] < x.x[:, GP, :])[:, :, None])
        ))
        if w.lambda_r > w.lambda_e and witness:
            entry.strict_checked = True
            strict_margin = (w.lambda_r - w.lambda_e) * elig_rev
            entry.strict_ok = entry.margin >= strict_margin - tol and entry.margin > tol
            if not entry.strict_ok:
                entry.ok = False
                entry.message = "strict dominance margin not met"
        report.entries.append(entry)
    return report
