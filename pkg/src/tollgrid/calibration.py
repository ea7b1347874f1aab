"""Calibration of networks from traffic-sensor exports and census income data.

Pipeline: fit piecewise-affine latency parameters per edge from (flow, travel
time) samples; reconcile mean edge and ramp flows into a continuity-consistent
set by constrained weighted least squares; infer the origin-destination trip
matrix by entropy maximization (iterative proportional fitting); and estimate
per-group values of time from household-income bracket shares.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from .model import ChainNetwork, ModelError

# ACS annual household income intervals ($); the top interval is open-ended.
INCOME_INTERVALS = [
    (0, 10_000),
    (10_000, 14_999),
    (15_000, 24_999),
    (25_000, 34_999),
    (35_000, 49_999),
    (50_000, 74_999),
    (75_000, 99_999),
    (100_000, 149_999),
    (150_000, 199_999),
    (200_000, None),
]
# merged brackets: indices of the intervals forming each of the 5 groups
BRACKETS = [(0, 1), (2, 3), (4, 5, 6), (7, 8), (9,)]
ELIGIBLE_BRACKETS = (0, 1)
WORK_HOURS_PER_YEAR = 40 * 52
DEFAULT_TOP_INCOME = 250_000.0


class CalibrationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# latency fitting


@dataclass
class LatencyFit:
    free_flow: float
    slope: float
    threshold: float
    mse: float
    degenerate: bool = False


def _pwa_lstsq(flows: np.ndarray, lats: np.ndarray, kappa: float):
    reg = np.column_stack([np.ones_like(flows), np.maximum(flows - kappa, 0.0)])
    coef, *_ = np.linalg.lstsq(reg, lats, rcond=None)
    ell, beta = float(coef[0]), float(coef[1])
    if beta < 0:
        beta = 0.0
        ell = float(lats.mean())
    mse = float(((reg @ [ell, beta] - lats) ** 2).mean())
    return ell, beta, mse


def fit_latency(samples: Sequence[tuple[float, float]]) -> LatencyFit:
    """Fit (free_flow, slope, threshold) minimizing mean-squared error.

    Candidate thresholds are scanned over the observed flow quantiles, each
    scored by joint least squares on the regressors (1, max(flow - k, 0)),
    then the best candidate is refined locally. Slope is clamped nonnegative.
    """
    if len(samples) < 3:
        raise CalibrationError("need at least 3 samples")
    flows = np.array([s[0] for s in samples], dtype=float)
    lats = np.array([s[1] for s in samples], dtype=float)
    if np.ptp(flows) == 0:
        return LatencyFit(float(lats.mean()), 0.0, float(flows.max()),
                          float(lats.var()), degenerate=True)
    qs = np.unique(np.concatenate([
        np.quantile(flows, np.linspace(0.0, 1.0, 101)), np.unique(flows)
    ]))
    scores = [(_pwa_lstsq(flows, lats, k), k) for k in qs]
    (ell, beta, mse), kappa = min(scores, key=lambda s: s[0][2])
    # refine the threshold between its neighboring candidates
    i = int(np.searchsorted(qs, kappa))
    lo = qs[max(i - 1, 0)]
    hi = qs[min(i + 1, qs.size - 1)]
    if hi > lo:
        res = optimize.minimize_scalar(
            lambda k: _pwa_lstsq(flows, lats, k)[2],
            bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-10 * max(hi, 1.0)},
        )
        ell2, beta2, mse2 = _pwa_lstsq(flows, lats, float(res.x))
        if mse2 <= mse:
            ell, beta, mse, kappa = ell2, beta2, mse2, float(res.x)
    if beta == 0.0:
        kappa = float(flows.max())
    return LatencyFit(ell, beta, float(max(kappa, 0.0)), mse)


# ---------------------------------------------------------------------------
# sensor flow reconciliation


@dataclass
class SensorData:
    """Per-edge and per-node flow measurement summaries (and raw samples).

    Standard deviations serve as inverse weights; an infinite sigma removes a
    measurement from the objective, leaving the value pinned by continuity.
    """

    edge_mean: np.ndarray
    edge_sigma: np.ndarray
    node_in_mean: np.ndarray
    node_in_sigma: np.ndarray
    node_out_mean: np.ndarray
    node_out_sigma: np.ndarray
    edge_latency_samples: dict = field(default_factory=dict)
    edge_flow_samples: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("edge_mean", "edge_sigma", "node_in_mean", "node_in_sigma",
                     "node_out_mean", "node_out_sigma"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.edge_mean.shape != self.edge_sigma.shape:
            raise CalibrationError("edge mean/sigma shape mismatch")
        if not (self.node_in_mean.size == self.node_in_sigma.size
                == self.node_out_mean.size == self.node_out_sigma.size
                == self.edge_mean.size + 1):
            raise CalibrationError("node series must have one more entry than edges")
        for s in (self.edge_sigma, self.node_in_sigma, self.node_out_sigma):
            if np.any(s <= 0):
                raise CalibrationError("sigmas must be positive (inf to unweight)")

    @classmethod
    def from_samples(cls, edge_samples: Sequence[np.ndarray],
                     node_in_samples: Sequence[np.ndarray],
                     node_out_samples: Sequence[np.ndarray],
                     edge_latency_samples: Optional[dict] = None,
                     edge_flow_samples: Optional[dict] = None) -> "SensorData":
        def summarize(series):
            means, sigmas = [], []
            for s in series:
                s = np.asarray(s, dtype=float)
                if s.size < 2:
                    raise CalibrationError("need >= 2 samples per summarized series")
                means.append(s.mean())
                sd = s.std(ddof=1)
                sigmas.append(sd if sd > 0 else 1e-6)
            return np.array(means), np.array(sigmas)

        em, es = summarize(edge_samples)
        nim, nis = summarize(node_in_samples)
        nom, nos = summarize(node_out_samples)
        return cls(em, es, nim, nis, nom, nos,
                   edge_latency_samples or {}, edge_flow_samples or {})


@dataclass
class ReconcileResult:
    edge_flows: np.ndarray
    node_in: np.ndarray
    node_out: np.ndarray
    continuity_residual: float
    clamped: list[tuple[str, int]] = field(default_factory=list)


def _continuity_matrix(E: int) -> np.ndarray:
    """Rows: node balance over z = [d_e (E), d_in (E+1), d_out (E+1)]."""
    N = E + 1
    A = np.zeros((N, E + 2 * N))
    for i in range(N):
        if i > 0:
            A[i, i - 1] = 1.0          # incoming edge
        if i < E:
            A[i, i] = -1.0             # outgoing edge
        A[i, E + i] = 1.0              # on-ramp inflow
        A[i, E + N + i] = -1.0         # off-ramp outflow
    return A


def reconcile_flows(net: ChainNetwork, data: SensorData) -> ReconcileResult:
    """Continuity-consistent flow estimates by constrained weighted least squares.

    Minimizes sum((d - mu)^2 / sigma^2) subject to per-node flow continuity
    and nonnegativity (enforced by iterative clamping, recorded).
    """
    E = net.n_edges
    if data.edge_mean.size != E:
        raise CalibrationError("sensor data does not match the network size")
    N = E + 1
    mu = np.concatenate([data.edge_mean, data.node_in_mean, data.node_out_mean])
    sig = np.concatenate([data.edge_sigma, data.node_in_sigma, data.node_out_sigma])
    with np.errstate(divide="ignore"):
        w = np.where(np.isinf(sig), 0.0, 1.0 / sig**2)
    A = _continuity_matrix(E)
    n = mu.size
    pinned: list[int] = []
    labels = [("edge", e) for e in range(E)] + [("node_in", i) for i in range(N)] + \
             [("node_out", i) for i in range(N)]
    for _ in range(n + 1):
        Aeq = A
        if pinned:
            rows = np.zeros((len(pinned), n))
            for r, j in enumerate(pinned):
                rows[r, j] = 1.0
            Aeq = np.vstack([A, rows])
        m = Aeq.shape[0]
        K = np.zeros((n + m, n + m))
        K[:n, :n] = np.diag(2.0 * w)
        K[:n, n:] = Aeq.T
        K[n:, :n] = Aeq
        rhs = np.concatenate([2.0 * w * mu, np.zeros(m)])
        z = np.linalg.lstsq(K, rhs, rcond=None)[0][:n]
        neg = [j for j in range(n) if z[j] < -1e-9 and j not in pinned]
        if not neg:
            break
        pinned.extend(neg)
    z = np.where(np.abs(z) < 1e-12, 0.0, z)
    resid = float(np.abs(A @ z).max())
    return ReconcileResult(
        edge_flows=z[:E],
        node_in=z[E:E + N],
        node_out=z[E + N:],
        continuity_residual=resid,
        clamped=[labels[j] for j in pinned],
    )


# ---------------------------------------------------------------------------
# OD estimation (entropy maximization via iterative proportional fitting)


@dataclass
class ODResult:
    pairs: list[tuple[int, int]]
    values: np.ndarray
    marginal_residual: float
    sweeps: int
    rescaled_by: float = 1.0

    def demand(self, i: int, j: int) -> float:
        try:
            return float(self.values[self.pairs.index((i, j))])
        except ValueError:
            return 0.0

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {p: float(v) for p, v in zip(self.pairs, self.values)}


def estimate_od(
    node_in: np.ndarray,
    node_out: np.ndarray,
    support: Optional[Sequence[tuple[int, int]]] = None,
    tol: float = 1e-10,
    max_sweeps: int = 100_000,
) -> ODResult:
    """Entropy-maximizing trip matrix with the given in/out marginals.

    Support defaults to every strictly-upstream (origin, destination) node
    pair with positive marginals; zero-marginal rows and columns drop out.
    Marginal totals are proportionally rescaled (recorded) when they disagree
    by more than 1e-6 relative.
    """
    node_in = np.asarray(node_in, dtype=float)
    node_out = np.asarray(node_out, dtype=float)
    N = node_in.size
    if support is None:
        support = [(i, j) for i in range(N) for j in range(i + 1, N)
                   if node_in[i] > 0 and node_out[j] > 0]
    support = [tuple(p) for p in support]
    rows = sorted({i for i, _ in support if node_in[i] > 0})
    cols = sorted({j for _, j in support if node_out[j] > 0})
    support = [(i, j) for (i, j) in support if i in rows and j in cols]
    if not support:
        return ODResult([], np.zeros(0), 0.0, 0)
    r_tot = float(node_in[rows].sum())
    c_tot = float(node_out[cols].sum())
    scale = 1.0
    if abs(r_tot - c_tot) > 1e-6 * max(r_tot, c_tot):
        scale = r_tot / c_tot
    col_marg = {j: node_out[j] * scale for j in cols}
    row_marg = {i: node_in[i] for i in rows}

    ri = {i: k for k, i in enumerate(rows)}
    ci = {j: k for k, j in enumerate(cols)}
    mask = np.zeros((len(rows), len(cols)), dtype=bool)
    for i, j in support:
        mask[ri[i], ci[j]] = True
    M = np.where(mask, 1.0, 0.0)
    r = np.array([row_marg[i] for i in rows])
    c = np.array([col_marg[j] for j in cols])
    sweeps = 0
    resid = math.inf
    for sweeps in range(1, max_sweeps + 1):
        rs = M.sum(axis=1)
        M *= np.where(rs > 0, r / np.where(rs > 0, rs, 1.0), 0.0)[:, None]
        cs = M.sum(axis=0)
        M *= np.where(cs > 0, c / np.where(cs > 0, cs, 1.0), 0.0)[None, :]
        resid = max(np.abs(M.sum(axis=1) - r).max(), np.abs(M.sum(axis=0) - c).max())
        if resid <= tol:
            break
    values = np.array([M[ri[i], ci[j]] for i, j in support])
    return ODResult(support, values, float(resid), sweeps, rescaled_by=scale)


# ---------------------------------------------------------------------------
# VoT estimation


@dataclass
class IncomeRow:
    city: str
    shares: np.ndarray          # 10 interval shares
    mean_income: Optional[float] = None

    def __post_init__(self):
        self.shares = np.asarray(self.shares, dtype=float)
        if self.shares.size != len(INCOME_INTERVALS):
            raise CalibrationError("expected 10 interval shares")
        if np.any(self.shares < 0) or self.shares.sum() > 1 + 1e-6:
            raise CalibrationError("shares must be nonnegative and sum to <= 1")


@dataclass
class IncomeTable:
    rows: list[IncomeRow]

    @classmethod
    def from_csv(cls, path) -> "IncomeTable":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                shares = [float(rec[k]) for k in sorted(rec) if k.startswith("share_")]
                mean = rec.get("mean_income")
                rows.append(IncomeRow(rec["city"], np.array(shares),
                                      float(mean) if mean not in (None, "") else None))
        return cls(rows)

    def cities(self) -> list[str]:
        return [r.city for r in self.rows]


def _interval_midpoints(top_income: float) -> np.ndarray:
    mids = []
    for lo, hi in INCOME_INTERVALS:
        mids.append(top_income if hi is None else 0.5 * (lo + hi))
    return np.array(mids)


def _top_income(row: IncomeRow, default_top: float) -> float:
    """Representative income of the open-ended bracket.

    Backed out of the city mean when available (mean = sum share * midpoint
    solved for the top midpoint), floored at the bracket's lower endpoint.
    """
    share_top = row.shares[-1]
    if row.mean_income is None or share_top <= 0:
        return default_top
    mids = _interval_midpoints(0.0)[:-1]
    known = float((row.shares[:-1] * mids).sum())
    implied = (row.mean_income - known) / share_top
    return max(implied, float(INCOME_INTERVALS[-1][0]))


def bracket_incomes(row: IncomeRow, default_top: float = DEFAULT_TOP_INCOME) -> np.ndarray:
    """Share-weighted interval-midpoint income for each of the 5 brackets."""
    mids = _interval_midpoints(_top_income(row, default_top))
    out = np.zeros(len(BRACKETS))
    for b, idxs in enumerate(BRACKETS):
        sh = row.shares[list(idxs)]
        m = mids[list(idxs)]
        tot = sh.sum()
        out[b] = float((sh * m).sum() / tot) if tot > 0 else float(m.mean())
    return out


def vot_baselines(table: IncomeTable, default_top: float = DEFAULT_TOP_INCOME) -> dict[str, np.ndarray]:
    """Baseline VoT ($/min) per city and bracket: family income halved, per work-minute."""
    out = {}
    for row in table.rows:
        inc = bracket_incomes(row, default_top)
        out[row.city] = inc / 2.0 / WORK_HOURS_PER_YEAR / 60.0
    return out


def estimate_vot(
    table: IncomeTable,
    horizon: int,
    rng: np.random.Generator,
    perturb_magnitude: float = 0.2,
    default_top: float = DEFAULT_TOP_INCOME,
) -> dict[str, np.ndarray]:
    """Per-period VoT arrays of shape (T, 5) per city.

    The two lowest brackets are eligible and keep their baseline VoT in every
    period; ineligible brackets get multiplicative per-period perturbations
    v * (1 + delta) with delta ~ U[-m, m]. Pass magnitude 0 to disable.
    """
    base = vot_baselines(table, default_top)
    out = {}
    for city, v in base.items():
        arr = np.tile(v, (horizon, 1))
        if perturb_magnitude > 0:
            for b in range(len(BRACKETS)):
                if b in ELIGIBLE_BRACKETS:
                    continue
                delta = rng.uniform(-perturb_magnitude, perturb_magnitude, size=horizon)
                arr[:, b] = v[b] * (1.0 + delta)
        out[city] = arr
    return out


# ---------------------------------------------------------------------------
# CSV loaders for sensor exports


def load_edge_sensor_csv(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """edge_id,timestamp,flow,latency_min rows -> per-edge (flows, latencies)."""
    acc: dict[str, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            acc.setdefault(rec["edge_id"], []).append(
                (float(rec["flow"]), float(rec["latency_min"]))
            )
    return {
        k: (np.array([f for f, _ in v]), np.array([l for _, l in v]))
        for k, v in acc.items()
    }


def load_node_sensor_csv(path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """node_id,timestamp,flow_in,flow_out rows -> per-node (in, out) samples."""
    acc: dict[int, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            acc.setdefault(int(rec["node_id"]), []).append(
                (float(rec["flow_in"]), float(rec["flow_out"]))
            )
    return {
        k: (np.array([a for a, _ in v]), np.array([b for _, b in v]))
        for k, v in acc.items()
    }


def load_od_support_csv(path) -> list[tuple[int, int]]:
    with open(path, newline="") as fh:
        return [(int(r["origin_node"]), int(r["dest_node"])) for r in csv.DictReader(fh)]
