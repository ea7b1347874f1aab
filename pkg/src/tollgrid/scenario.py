"""Scenario documents: schema-validated JSON tying together a whole experiment.

A scenario holds the network, the user groups, the horizon, the societal
weight grid, the welfare constraints, solver and optimizer settings, and the
master seed. Policies travel in a separate small JSON document.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .equilibrium import SolverSettings
from .model import (
    CBCPPolicy,
    ChainNetwork,
    DBCPPolicy,
    LatencySpec,
    ModelError,
    Population,
    TollSchedule,
    UserGroup,
)
from .societal import ConstraintSpec, SocietalWeights

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    """Scenario or policy document violates the schema (field path included)."""


def _require(doc: dict, key: str, typ, path: str):
    if key not in doc:
        raise SchemaError(f"{path}: missing required field '{key}'")
    val = doc[key]
    if typ is float:
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise SchemaError(f"{path}.{key}: expected a number, got {type(val).__name__}")
        return float(val)
    if not isinstance(val, typ):
        raise SchemaError(f"{path}.{key}: expected {typ.__name__}, got {type(val).__name__}")
    return val


@dataclass
class ZOConfig:
    eta: float = 0.5
    delta: float = 0.1
    n_iter: int = 2000
    baseline_n_iter: Optional[int] = None     # restricted zero-subsidy runs
    init_toll: float = 2.5
    init_budget_frac: float = 0.0             # fraction of per-group spend capacity
    overrides: dict = field(default_factory=dict)   # per-weight-index {str(idx): {...}}

    def for_lambda(self, idx: int) -> "ZOConfig":
        ov = self.overrides.get(str(idx), {})
        return ZOConfig(
            eta=ov.get("eta", self.eta),
            delta=ov.get("delta", self.delta),
            n_iter=ov.get("n_iter", self.n_iter),
            baseline_n_iter=ov.get("baseline_n_iter", self.baseline_n_iter),
            init_toll=ov.get("init_toll", self.init_toll),
            init_budget_frac=ov.get("init_budget_frac", self.init_budget_frac),
        )


@dataclass
class ScenarioConfig:
    network: ChainNetwork
    groups: list[UserGroup]
    horizon: int
    weights: list[SocietalWeights]
    constraints: ConstraintSpec
    solver: SolverSettings
    zo: ZOConfig
    seed: int
    name: str = "scenario"

    def population(self) -> Population:
        return Population(self.network, self.groups, self.horizon)

    @property
    def toll_cap(self) -> float:
        cap = self.constraints.toll_cap
        if cap is None:
            return 5.0
        return float(np.max(cap))


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}") from exc
    return parse_scenario(doc, name=path.stem)


def parse_scenario(doc: dict, name: str = "scenario") -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise SchemaError("scenario: top level must be an object")
    version = _require(doc, "tollgrid_schema", int, "scenario")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"scenario.tollgrid_schema: unsupported version {version}")

    net_doc = _require(doc, "network", dict, "scenario")
    edges_doc = _require(net_doc, "edges", list, "scenario.network")
    if not edges_doc:
        raise SchemaError("scenario.network.edges: must be nonempty")
    edges = []
    for i, e in enumerate(edges_doc):
        p = f"scenario.network.edges[{i}]"
        if not isinstance(e, dict):
            raise SchemaError(f"{p}: expected an object")
        try:
            spec = LatencySpec(
                free_flow=_require(e, "free_flow", float, p),
                slope=_require(e, "slope", float, p),
                threshold=_require(e, "threshold", float, p),
                n_gp=_require(e, "n_gp", int, p),
            )
        except ModelError as exc:
            raise SchemaError(f"{p}: {exc}") from exc
        edges.append((_require(e, "id", str, p), spec))
    network = ChainNetwork.from_edges(edges)

    horizon_doc = _require(doc, "horizon", dict, "scenario")
    T = _require(horizon_doc, "T", int, "scenario.horizon")
    if T < 1:
        raise SchemaError("scenario.horizon.T: must be >= 1")

    groups_doc = _require(doc, "groups", list, "scenario")
    groups = []
    for i, g in enumerate(groups_doc):
        p = f"scenario.groups[{i}]"
        if not isinstance(g, dict):
            raise SchemaError(f"{p}: expected an object")
        vot = _require(g, "vot", list, p)
        if len(vot) not in (1, T):
            raise SchemaError(f"{p}.vot: length must be 1 or T={T}")
        try:
            groups.append(UserGroup(
                id=_require(g, "id", str, p),
                origin=_require(g, "origin", int, p),
                destination=_require(g, "destination", int, p),
                demand=_require(g, "demand", float, p),
                vot=tuple(float(v) for v in vot),
                eligible=_require(g, "eligible", bool, p),
            ))
        except ModelError as exc:
            raise SchemaError(f"{p}: {exc}") from exc
        if groups[-1].destination > network.n_edges:
            raise SchemaError(f"{p}.destination: node {groups[-1].destination} beyond network")

    weights_doc = _require(doc, "weights", list, "scenario")
    weights = []
    for i, w in enumerate(weights_doc):
        p = f"scenario.weights[{i}]"
        if not (isinstance(w, list) and len(w) == 3):
            raise SchemaError(f"{p}: expected [lambda_E, lambda_R, lambda_I]")
        try:
            weights.append(SocietalWeights.from_triple([float(x) for x in w]))
        except (TypeError, ModelError) as exc:
            raise SchemaError(f"{p}: {exc}") from exc

    cons_doc = doc.get("constraints", {})
    if not isinstance(cons_doc, dict):
        raise SchemaError("scenario.constraints: expected an object")
    try:
        constraints = ConstraintSpec(
            toll_cap=np.asarray(cons_doc["toll_cap"], dtype=float) if "toll_cap" in cons_doc else None,
            access_floor=cons_doc.get("access_floor"),
            service_margin=cons_doc.get("service_margin"),
            prop7_bounds=cons_doc.get("prop7_bounds"),
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"scenario.constraints: {exc}") from exc

    solver_doc = doc.get("solver", {})
    if not isinstance(solver_doc, dict):
        raise SchemaError("scenario.solver: expected an object")
    try:
        solver = SolverSettings(**{k: v for k, v in solver_doc.items()
                                   if k in SolverSettings.__dataclass_fields__})
    except (TypeError, ModelError) as exc:
        raise SchemaError(f"scenario.solver: {exc}") from exc

    zo_doc = doc.get("zo", {})
    if not isinstance(zo_doc, dict):
        raise SchemaError("scenario.zo: expected an object")
    zo = ZOConfig(**{k: v for k, v in zo_doc.items() if k in ZOConfig.__dataclass_fields__})

    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise SchemaError("scenario.seed: expected an integer")

    return ScenarioConfig(network, groups, T, weights, constraints, solver, zo, seed, name=name)


def scenario_to_doc(cfg: ScenarioConfig) -> dict:
    cons: dict = {}
    if cfg.constraints.toll_cap is not None:
        cap = np.asarray(cfg.constraints.toll_cap)
        cons["toll_cap"] = cap.tolist() if cap.ndim else float(cap)
    if cfg.constraints.access_floor is not None:
        cons["access_floor"] = cfg.constraints.access_floor
    if cfg.constraints.service_margin is not None:
        cons["service_margin"] = cfg.constraints.service_margin
    if cfg.constraints.prop7_bounds is not None:
        cons["prop7_bounds"] = cfg.constraints.prop7_bounds
    return {
        "tollgrid_schema": SCHEMA_VERSION,
        "network": {
            "edges": [
                {
                    "id": eid,
                    "free_flow": s.free_flow,
                    "slope": s.slope,
                    "threshold": s.threshold,
                    "n_gp": s.n_gp,
                }
                for eid, s in zip(cfg.network.edge_ids, cfg.network.specs)
            ]
        },
        "groups": [
            {
                "id": g.id,
                "origin": g.origin,
                "destination": g.destination,
                "demand": g.demand,
                "vot": list(g.vot),
                "eligible": g.eligible,
            }
            for g in cfg.groups
        ],
        "horizon": {"T": cfg.horizon},
        "weights": [list(w.as_triple()) for w in cfg.weights],
        "constraints": cons,
        "solver": {
            "fw_max_iters": cfg.solver.fw_max_iters,
            "fw_gap_tol_rel": cfg.solver.fw_gap_tol_rel,
            "bisection_tol": cfg.solver.bisection_tol,
            "line_search": cfg.solver.line_search,
            "polish": cfg.solver.polish,
        },
        "zo": {
            "eta": cfg.zo.eta,
            "delta": cfg.zo.delta,
            "n_iter": cfg.zo.n_iter,
            **({"baseline_n_iter": cfg.zo.baseline_n_iter} if cfg.zo.baseline_n_iter else {}),
            "init_toll": cfg.zo.init_toll,
            "init_budget_frac": cfg.zo.init_budget_frac,
            **({"overrides": cfg.zo.overrides} if cfg.zo.overrides else {}),
        },
        "seed": cfg.seed,
    }


def save_scenario(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_doc(cfg), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# policy documents


def load_policy(path, network: ChainNetwork, horizon: int, n_eligible: int):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}") from exc
    return parse_policy(doc, network, horizon, n_eligible)


def parse_policy(doc: dict, network: ChainNetwork, horizon: int, n_eligible: int):
    kind = _require(doc, "kind", str, "policy")
    tolls = _require(doc, "tolls", list, "policy")
    tau = np.asarray(tolls, dtype=float)
    if tau.shape != (network.n_edges, horizon):
        raise SchemaError(
            f"policy.tolls: expected shape ({network.n_edges}, {horizon}), got {tau.shape}"
        )
    try:
        schedule = TollSchedule(tau)
        if kind == "cbcp":
            budgets = np.asarray(_require(doc, "budgets", list, "policy"), dtype=float)
            if budgets.size != n_eligible:
                raise SchemaError(f"policy.budgets: expected {n_eligible} entries")
            return CBCPPolicy(schedule, budgets)
        if kind == "dbcp":
            alpha = np.asarray(_require(doc, "discounts", list, "policy"), dtype=float)
            if alpha.shape != tau.shape:
                raise SchemaError("policy.discounts: must match the toll shape")
            return DBCPPolicy(schedule, alpha)
    except ModelError as exc:
        raise SchemaError(f"policy: {exc}") from exc
    raise SchemaError(f"policy.kind: expected 'cbcp' or 'dbcp', got {kind!r}")


def policy_to_doc(policy) -> dict:
    doc = {"kind": policy.kind, "tolls": policy.tolls.tau.tolist()}
    if policy.kind == "cbcp":
        doc["budgets"] = policy.budgets.tolist()
    else:
        doc["discounts"] = policy.alpha.tolist()
    return doc


def save_policy(policy, path) -> None:
    Path(path).write_text(json.dumps(policy_to_doc(policy), indent=2, sort_keys=True) + "\n")
