"""Network, population, policy, and flow data model for chain highway networks.

A chain network is an ordered sequence of edges (highway segments), each with
one tolled express lane (lane index 0) and ``n_gp`` identical toll-free
general-purpose lanes aggregated as lane index 1. Users are partitioned into
demand groups; each group spans a contiguous edge interval, carries a fixed
per-period demand, a per-period value of time (VoT, $/min), and an
eligibility flag for toll subsidies.

Units: money in dollars, time in minutes, flow in vehicles per period.
All types are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

EXPRESS = 0
GP = 1


class ModelError(ValueError):
    """Invalid model construction or operation input."""


@dataclass(frozen=True)
class LatencySpec:
    """Per-edge travel-time function, shared by the express and GP lanes.

    The piecewise-affine variant is ``free_flow + slope * max(x' - threshold, 0)``
    where ``x'`` is the raw lane flow for the express lane and the per-lane flow
    ``x / n_gp`` for the GP side. The BPR variant is
    ``xi * (1 + a * (x' / kappa) ** b)`` with the same GP division, so that
    evenly spreading a flow ``z`` over ``n_gp`` identical lanes has the same
    effect as flow ``z / n_gp`` on a single lane.
    """

    free_flow: float
    slope: float = 0.0
    threshold: float = 0.0
    n_gp: int = 1
    variant: str = "pwa"
    bpr_params: Optional[tuple[float, float, float, float]] = None  # (xi, a, b, kappa)

    def __post_init__(self):
        if self.variant not in ("pwa", "bpr"):
            raise ModelError(f"unknown latency variant {self.variant!r}")
        if self.variant == "pwa":
            if not (self.free_flow > 0):
                raise ModelError("free_flow must be positive")
            if self.slope < 0 or self.threshold < 0:
                raise ModelError("slope and threshold must be nonnegative")
        else:
            if self.bpr_params is None:
                raise ModelError("bpr variant requires bpr_params (xi, a, b, kappa)")
            xi, a, b, kappa = self.bpr_params
            if not (xi > 0 and a >= 0 and b >= 1 and kappa > 0):
                raise ModelError("bpr_params must satisfy xi>0, a>=0, b>=1, kappa>0")
        if int(self.n_gp) < 1:
            raise ModelError("n_gp must be a positive integer")

    def _scaled(self, lane: int, x):
        if lane == EXPRESS:
            return x
        if lane == GP:
            return np.asarray(x, dtype=float) / self.n_gp
        raise ModelError(f"lane must be {EXPRESS} (express) or {GP} (gp)")

    def latency(self, lane: int, x):
        """Travel time in minutes at total lane flow ``x`` (vectorized)."""
        xv = np.asarray(x, dtype=float)
        if np.any(xv < 0):
            raise ModelError("negative flow")
        xp = self._scaled(lane, xv)
        if self.variant == "pwa":
            out = self.free_flow + self.slope * np.maximum(xp - self.threshold, 0.0)
        else:
            xi, a, b, kappa = self.bpr_params
            out = xi * (1.0 + a * (xp / kappa) ** b)
        return float(out) if np.isscalar(x) else out

    def integral(self, lane: int, x):
        """Integral of the latency function from 0 to ``x`` (minute-vehicles)."""
        xv = np.asarray(x, dtype=float)
        if np.any(xv < 0):
            raise ModelError("negative flow")
        n = self.n_gp if lane == GP else 1
        if self.variant == "pwa":
            excess = np.maximum(xv / n - self.threshold, 0.0)
            out = self.free_flow * xv + 0.5 * self.slope * n * excess**2
        else:
            xi, a, b, kappa = self.bpr_params
            out = xi * xv + xi * a * n * kappa / (b + 1.0) * (xv / (n * kappa)) ** (b + 1.0)
        return float(out) if np.isscalar(x) else out

    def lane_breakpoint(self, lane: int) -> float:
        """Raw lane flow at which the pwa latency starts increasing."""
        if self.variant != "pwa":
            return 0.0
        return self.threshold * (self.n_gp if lane == GP else 1)


def latency(spec: LatencySpec, lane: int, x):
    return spec.latency(lane, x)


@dataclass(frozen=True)
class ChainNetwork:
    """Consecutive edges 0..E-1 over nodes 0..E; node i joins edges i-1 and i."""

    edge_ids: tuple[str, ...]
    specs: tuple[LatencySpec, ...]

    def __post_init__(self):
        if len(self.edge_ids) != len(self.specs) or not self.edge_ids:
            raise ModelError("edge_ids and specs must be nonempty and aligned")
        if len(set(self.edge_ids)) != len(self.edge_ids):
            raise ModelError("duplicate edge ids")

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[str, LatencySpec]]) -> "ChainNetwork":
        ids, specs = zip(*edges)
        return cls(tuple(ids), tuple(specs))

    @property
    def n_edges(self) -> int:
        return len(self.specs)

    @property
    def n_nodes(self) -> int:
        return len(self.specs) + 1


@dataclass(frozen=True)
class UserGroup:
    """One demand cohort: contiguous span, fixed demand, per-period VoT."""

    id: str
    origin: int          # node index, 0..E-1
    destination: int     # node index, origin+1..E
    demand: float
    vot: tuple[float, ...]
    eligible: bool = False

    def __post_init__(self):
        if self.destination <= self.origin:
            raise ModelError(f"group {self.id}: destination must be downstream of origin")
        if not (self.demand > 0):
            raise ModelError(f"group {self.id}: demand must be positive")
        if not all(v > 0 for v in self.vot):
            raise ModelError(f"group {self.id}: VoT values must be positive")

    @property
    def span(self) -> range:
        """Edge indices traversed by this group."""
        return range(self.origin, self.destination)


class Population:
    """Groups plus the dense masks and VoT arrays used by the solvers.

    Arrays are indexed [edge, group], [period, group] etc.; off-span entries
    are masked out, never interpreted as zero flows.
    """

    def __init__(self, net: ChainNetwork, groups: Sequence[UserGroup], horizon: int):
        if horizon < 1:
            raise ModelError("horizon must be >= 1")
        for g in groups:
            if g.destination > net.n_edges:
                raise ModelError(f"group {g.id}: destination beyond network")
            if len(g.vot) not in (1, horizon):
                raise ModelError(f"group {g.id}: VoT length must be 1 or T={horizon}")
        if len({g.id for g in groups}) != len(groups):
            raise ModelError("duplicate group ids")
        self.net = net
        self.groups = tuple(groups)
        self.T = horizon
        E, G = net.n_edges, len(groups)
        self.mask = np.zeros((E, G), dtype=bool)
        for j, g in enumerate(groups):
            self.mask[g.origin:g.destination, j] = True
        self.demand = np.array([g.demand for g in groups], dtype=float)
        self.eligible = np.array([g.eligible for g in groups], dtype=bool)
        self.vot = np.zeros((horizon, G), dtype=float)
        for j, g in enumerate(groups):
            self.vot[:, j] = np.resize(np.asarray(g.vot, dtype=float), horizon)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_eligible(self) -> int:
        return int(self.eligible.sum())

    def edge_demand(self, e: int) -> float:
        """Maximum possible demand on edge e (sum over groups spanning it)."""
        return float(self.demand[self.mask[e]].sum())

    def edge_demands(self) -> np.ndarray:
        return self.mask.astype(float) @ self.demand

    def eligible_ids(self) -> list[str]:
        return [g.id for g in self.groups if g.eligible]


@dataclass(frozen=True)
class TollSchedule:
    """Express-lane tolls tau[e, t] in dollars, nonnegative."""

    tau: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tau", np.asarray(self.tau, dtype=float))
        if self.tau.ndim != 2:
            raise ModelError("tolls must be a 2-D (edge, period) array")
        if np.any(self.tau < 0):
            raise ModelError("tolls must be nonnegative")


@dataclass(frozen=True)
class CBCPPolicy:
    """Toll schedule plus one travel-credit budget per eligible group."""

    tolls: TollSchedule
    budgets: np.ndarray  # aligned with the population's eligible groups, in order

    def __post_init__(self):
        object.__setattr__(self, "budgets", np.asarray(self.budgets, dtype=float))
        if np.any(self.budgets < 0):
            raise ModelError("budgets must be nonnegative")

    @property
    def kind(self) -> str:
        return "cbcp"


@dataclass(frozen=True)
class DBCPPolicy:
    """Toll schedule plus per-(edge, period) discount fractions in [0, 1]."""

    tolls: TollSchedule
    alpha: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        if self.alpha.shape != self.tolls.tau.shape:
            raise ModelError("alpha must match the toll schedule shape")
        if np.any(self.alpha < 0) or np.any(self.alpha > 1):
            raise ModelError("alpha must lie in [0, 1]")

    @property
    def kind(self) -> str:
        return "dbcp"


class Flow:
    """Per-(edge, lane, period, group) routing decision.

    Stored as two dense arrays express[e, t, g] and gp[e, t, g]; on-span
    entries satisfy express + gp = demand, off-span entries are structurally
    absent (masked).
    """

    def __init__(self, pop: Population, express: np.ndarray, gp: np.ndarray):
        E, T, G = pop.net.n_edges, pop.T, pop.n_groups
        express = np.asarray(express, dtype=float)
        gp = np.asarray(gp, dtype=float)
        if express.shape != (E, T, G) or gp.shape != (E, T, G):
            raise ModelError(f"flow arrays must have shape {(E, T, G)}")
        self.pop = pop
        self.express = express
        self.gp = gp

    @classmethod
    def from_express(cls, pop: Population, express: np.ndarray) -> "Flow":
        """Complete a flow from its express part: gp = demand - express on span."""
        express = np.asarray(express, dtype=float)
        gp = np.where(pop.mask[:, None, :], pop.demand[None, None, :] - express, 0.0)
        express = np.where(pop.mask[:, None, :], express, 0.0)
        return cls(pop, express, gp)

    def lane(self, k: int) -> np.ndarray:
        if k == EXPRESS:
            return self.express
        if k == GP:
            return self.gp
        raise ModelError("lane must be 0 (express) or 1 (gp)")

    def copy(self) -> "Flow":
        return Flow(self.pop, self.express.copy(), self.gp.copy())


@dataclass(frozen=True)
class LaneFlow:
    """Aggregate lane flows x[e, k, t]."""

    x: np.ndarray

    def express(self) -> np.ndarray:
        return self.x[:, EXPRESS, :]

    def gp(self) -> np.ndarray:
        return self.x[:, GP, :]


def lane_flows(net: ChainNetwork, pop: Population, y: Flow) -> LaneFlow:
    """Aggregate a flow to lane totals: x[e,k,t] = sum_g y[e,k,t,g]."""
    E, T = net.n_edges, pop.T
    x = np.zeros((E, 2, T))
    x[:, EXPRESS, :] = y.express.sum(axis=2)
    x[:, GP, :] = y.gp.sum(axis=2)
    return LaneFlow(x)


@dataclass
class Violation:
    kind: str            # 'nonnegativity' | 'conservation' | 'off_span' | 'budget'
    index: tuple
    residual: float


@dataclass
class AdmissibilityReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_admissible(
    net: ChainNetwork,
    pop: Population,
    y: Flow,
    policy: Optional[CBCPPolicy] = None,
    tol: float = 1e-9,
) -> AdmissibilityReport:
    """Report every violated conservation, nonnegativity, or budget constraint.

    Budget constraints are checked only when a CBCP policy is supplied.
    """
    report = AdmissibilityReport()
    E, T, G = net.n_edges, pop.T, pop.n_groups
    for arr, lane in ((y.express, "express"), (y.gp, "gp")):
        neg = np.argwhere(arr < -tol)
        for e, t, g in neg:
            report.violations.append(
                Violation("nonnegativity", (int(e), lane, int(t), pop.groups[g].id), float(-arr[e, t, g]))
            )
    total = y.express + y.gp
    for e in range(E):
        for g in range(G):
            if pop.mask[e, g]:
                res = total[e, :, g] - pop.demand[g]
                for t in np.nonzero(np.abs(res) > tol)[0]:
                    report.violations.append(
                        Violation("conservation", (e, int(t), pop.groups[g].id), float(res[t]))
                    )
            else:
                off = np.abs(total[e, :, g])
                for t in np.nonzero(off > tol)[0]:
                    report.violations.append(
                        Violation("off_span", (e, int(t), pop.groups[g].id), float(off[t]))
                    )
    if policy is not None:
        tau = policy.tolls.tau
        spend = np.einsum("et,etg->g", tau, y.express)
        for k, g in enumerate(np.nonzero(pop.eligible)[0]):
            res = spend[g] - policy.budgets[k]
            if res > tol:
                report.violations.append(Violation("budget", (pop.groups[g].id,), float(res)))
    return report


def effective_vot(v: float, alpha: float, eligible: bool) -> float:
    """Express-lane assignment priority under a discount: v/(1-alpha) if eligible.

    A full discount (alpha = 1) maps to an explicit infinity sentinel that
    sorts above every finite value.
    """
    if not eligible:
        return float(v)
    if alpha >= 1.0:
        return math.inf
    return float(v) / (1.0 - float(alpha))


def vot_fluctuation(pop: Population) -> float:
    """Half the largest across-period VoT swing among eligible groups."""
    if pop.n_eligible == 0:
        return 0.0
    ev = pop.vot[:, pop.eligible]
    return 0.5 * float((ev.max(axis=0) - ev.min(axis=0)).max())
