"""Shared randomized-instance builders for the test suite.

Instances are small chains with strictly increasing latencies (threshold 0)
unless stated otherwise, so lane flows at equilibrium are unique and solver
output can be compared to the brute-force oracle componentwise.
"""

from __future__ import annotations

import numpy as np

from tollgrid import (
    CBCPPolicy,
    ChainNetwork,
    DBCPPolicy,
    LatencySpec,
    Population,
    TollSchedule,
    UserGroup,
)


def derived_edge():
    """The worked single-edge instance: l(x) = 1 + 0.1 x, one GP lane."""
    spec = LatencySpec(free_flow=1.0, slope=0.1, threshold=0.0, n_gp=1)
    net = ChainNetwork.from_edges([("e0", spec)])
    groups = [
        UserGroup("A", 0, 1, 10.0, (1.0,), eligible=False),
        UserGroup("B", 0, 1, 10.0, (0.2,), eligible=True),
    ]
    pop = Population(net, groups, horizon=1)
    return net, pop


def random_instance(rng: np.random.Generator, max_edges=3, max_groups=4, max_T=2,
                    low_eligible_vot=True, strict=True, time_varying_eligible=False):
    """Random chain instance; eligible VoTs sit well below ineligible ones."""
    E = int(rng.integers(1, max_edges + 1))
    T = int(rng.integers(1, max_T + 1))
    n_groups = int(rng.integers(1, max_groups + 1))
    edges = []
    for e in range(E):
        edges.append((
            f"e{e}",
            LatencySpec(
                free_flow=float(rng.uniform(0.5, 3.0)),
                slope=float(rng.uniform(0.05, 0.5)),
                threshold=0.0 if strict else float(rng.uniform(0.0, 2.0)),
                n_gp=int(rng.integers(1, 4)),
            ),
        ))
    net = ChainNetwork.from_edges(edges)
    groups = []
    for j in range(n_groups):
        o = int(rng.integers(0, E))
        d = int(rng.integers(o + 1, E + 1))
        eligible = bool(rng.random() < 0.4) if n_groups > 1 else False
        if eligible and low_eligible_vot:
            base = float(rng.uniform(0.02, 0.08))
        else:
            base = float(rng.uniform(0.5, 2.0))
        if eligible and time_varying_eligible and T > 1:
            vot = tuple(base * float(rng.uniform(0.8, 1.2)) for _ in range(T))
        else:
            vot = (base,)
        groups.append(UserGroup(f"g{j}", o, d, float(rng.uniform(1.0, 8.0)), vot, eligible))
    return net, Population(net, groups, horizon=T)


def random_dbcp_policy(rng, net, pop, toll_cap=2.0):
    tau = rng.uniform(0.0, toll_cap, size=(net.n_edges, pop.T))
    tau[rng.random(tau.shape) < 0.2] = 0.0
    alpha = rng.uniform(0.0, 1.0, size=tau.shape)
    return DBCPPolicy(TollSchedule(tau), alpha)


def random_cbcp_policy(rng, net, pop, toll_cap=2.0):
    tau = rng.uniform(0.0, toll_cap, size=(net.n_edges, pop.T))
    tau[rng.random(tau.shape) < 0.2] = 0.0
    budgets = []
    for g in np.nonzero(pop.eligible)[0]:
        grp = pop.groups[g]
        cap = toll_cap * pop.T * len(grp.span) * grp.demand
        budgets.append(float(rng.uniform(0.0, 0.6 * cap)))
    return CBCPPolicy(TollSchedule(tau), np.array(budgets))
