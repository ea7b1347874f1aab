"""tollgrid: equilibrium analysis and design of credit/discount congestion pricing."""

from .model import (
    EXPRESS,
    GP,
    AdmissibilityReport,
    CBCPPolicy,
    ChainNetwork,
    DBCPPolicy,
    Flow,
    LaneFlow,
    LatencySpec,
    ModelError,
    Population,
    TollSchedule,
    UserGroup,
    check_admissible,
    effective_vot,
    lane_flows,
    latency,
    vot_fluctuation,
)
from .equilibrium import (
    EquilibriumResult,
    SolverError,
    SolverSettings,
    oracle_equilibrium,
    sensitivity_bound,
    solve_cbcp,
    solve_dbcp,
    solve_dbcp_edge,
    vi_residual,
)

__version__ = "0.1.0"
