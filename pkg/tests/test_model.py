import numpy as np
import pytest

from tollgrid import (
    EXPRESS,
    GP,
    CBCPPolicy,
    ChainNetwork,
    DBCPPolicy,
    Flow,
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
from helpers import derived_edge

PALO_ALTO = LatencySpec(free_flow=1.33, slope=7.83e-4, threshold=1001.52, n_gp=3)


class TestLatency:
    def test_free_flow(self):
        assert latency(PALO_ALTO, EXPRESS, 0.0) == pytest.approx(1.33)

    def test_breakpoint_is_still_free_flow(self):
        assert latency(PALO_ALTO, EXPRESS, 1001.52) == pytest.approx(1.33)

    def test_congested_value(self):
        # 1.33 + 7.83e-4 * 1000
        assert latency(PALO_ALTO, EXPRESS, 2001.52) == pytest.approx(2.113, abs=1e-9)

    def test_negative_flow_rejected(self):
        with pytest.raises(ModelError):
            latency(PALO_ALTO, EXPRESS, -1.0)

    def test_gp_consistency(self, rng):
        # spreading n_gp * x over n_gp lanes == x on one lane
        for x in rng.uniform(0, 5000, size=50):
            assert latency(PALO_ALTO, GP, PALO_ALTO.n_gp * x) == pytest.approx(
                latency(PALO_ALTO, EXPRESS, x)
            )

    def test_monotone(self, rng):
        xs = np.sort(rng.uniform(0, 4000, size=100))
        for lane in (EXPRESS, GP):
            vals = PALO_ALTO.latency(lane, xs)
            assert np.all(np.diff(vals) >= 0)

    def test_bpr_variant(self):
        spec = LatencySpec(free_flow=2.0, variant="bpr", bpr_params=(2.0, 0.15, 4.0, 100.0), n_gp=2)
        assert spec.latency(EXPRESS, 0.0) == pytest.approx(2.0)
        assert spec.latency(EXPRESS, 100.0) == pytest.approx(2.0 * 1.15)
        assert spec.latency(GP, 200.0) == pytest.approx(spec.latency(EXPRESS, 100.0))

    def test_integral_matches_quadrature(self):
        from scipy.integrate import quad

        for spec in (
            PALO_ALTO,
            LatencySpec(free_flow=2.0, variant="bpr", bpr_params=(2.0, 0.15, 4.0, 100.0), n_gp=2),
        ):
            for lane in (EXPRESS, GP):
                for x in (0.0, 50.0, 1500.0, 3503.25):
                    expected, _ = quad(lambda w: spec.latency(lane, w), 0.0, x, limit=200)
                    assert spec.integral(lane, x) == pytest.approx(expected, rel=1e-8)


class TestFlowsAndAdmissibility:
    def test_lane_flows_all_gp(self):
        net, pop = derived_edge()
        y = Flow.from_express(pop, np.zeros((1, 1, 2)))
        x = lane_flows(net, pop, y)
        assert x.x[0, EXPRESS, 0] == 0.0
        assert x.x[0, GP, 0] == pytest.approx(20.0)

    def test_lane_flows_derived_split(self):
        net, pop = derived_edge()
        express = np.zeros((1, 1, 2))
        express[0, 0, 0] = 7.5
        y = Flow.from_express(pop, express)
        x = lane_flows(net, pop, y)
        assert x.x[0, EXPRESS, 0] == pytest.approx(7.5)
        assert x.x[0, GP, 0] == pytest.approx(12.5)

    def test_lane_flows_empty_edge(self):
        spec = LatencySpec(free_flow=1.0, slope=0.1)
        net = ChainNetwork.from_edges([("e0", spec), ("e1", spec)])
        pop = Population(net, [UserGroup("g", 0, 1, 5.0, (1.0,))], horizon=1)
        y = Flow.from_express(pop, np.zeros((2, 1, 1)))
        x = lane_flows(net, pop, y)
        assert x.x[1].sum() == 0.0

    def test_admissible_ok(self):
        net, pop = derived_edge()
        y = Flow.from_express(pop, np.full((1, 1, 2), 3.0))
        assert check_admissible(net, pop, y).ok

    def test_conservation_violation(self):
        net, pop = derived_edge()
        express = np.full((1, 1, 2), 3.0)
        y = Flow.from_express(pop, express)
        y.express[0, 0, 0] = 11.0  # demand is 10
        report = check_admissible(net, pop, y)
        assert not report.ok
        assert any(v.kind == "conservation" for v in report.violations)

    def test_budget_violation_residual(self):
        net, pop = derived_edge()
        express = np.zeros((1, 1, 2))
        express[0, 0, 1] = 3.0  # eligible spends 3 * 0.5 = 1.5 against budget 1.0
        y = Flow.from_express(pop, express)
        policy = CBCPPolicy(TollSchedule(np.array([[0.5]])), np.array([1.0]))
        report = check_admissible(net, pop, y, policy)
        budget = [v for v in report.violations if v.kind == "budget"]
        assert len(budget) == 1
        assert budget[0].residual == pytest.approx(0.5)

    def test_sum_equals_edge_demand(self, rng):
        net, pop = derived_edge()
        express = rng.uniform(0, 10, size=(1, 1, 2))
        y = Flow.from_express(pop, express)
        x = lane_flows(net, pop, y)
        assert x.x[0, :, 0].sum() == pytest.approx(pop.edge_demand(0))


class TestEffectiveVot:
    def test_zero_discount(self):
        assert effective_vot(0.15, 0.0, True) == pytest.approx(0.15)

    def test_half_discount(self):
        assert effective_vot(0.15, 0.5, True) == pytest.approx(0.30)

    def test_ineligible_unchanged(self):
        assert effective_vot(0.58, 0.9, False) == pytest.approx(0.58)

    def test_full_discount_is_infinite(self):
        v = effective_vot(0.1, 1.0, True)
        assert v == np.inf
        assert v > 1e18

    def test_monotone_in_alpha(self, rng):
        alphas = np.sort(rng.uniform(0, 0.999, size=20))
        vals = [effective_vot(0.3, a, True) for a in alphas]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        const = [effective_vot(0.3, a, False) for a in alphas]
        assert len(set(const)) == 1


class TestVotFluctuation:
    def _pop(self, vots, eligible):
        spec = LatencySpec(free_flow=1.0, slope=0.1)
        net = ChainNetwork.from_edges([("e0", spec)])
        groups = [
            UserGroup(f"g{i}", 0, 1, 1.0, tuple(v), e)
            for i, (v, e) in enumerate(zip(vots, eligible))
        ]
        return Population(net, groups, horizon=len(vots[0]))

    def test_time_invariant_is_zero(self):
        pop = self._pop([(0.5, 0.5), (0.2, 0.2)], [False, True])
        assert vot_fluctuation(pop) == 0.0

    def test_formula(self):
        pop = self._pop([(0.1, 0.3)], [True])
        assert vot_fluctuation(pop) == pytest.approx(0.1)

    def test_ineligible_variation_ignored(self):
        # perturbation applies to ineligible groups only; eligible stay flat
        pop = self._pop([(0.5, 0.9), (0.2, 0.2)], [False, True])
        assert vot_fluctuation(pop) == 0.0

    def test_no_eligible_groups(self):
        pop = self._pop([(0.5, 0.7)], [False])
        assert vot_fluctuation(pop) == 0.0


class TestConstruction:
    def test_group_span_validation(self):
        with pytest.raises(ModelError):
            UserGroup("bad", 2, 1, 1.0, (0.5,))

    def test_group_positive_demand(self):
        with pytest.raises(ModelError):
            UserGroup("bad", 0, 1, 0.0, (0.5,))

    def test_policy_validation(self):
        with pytest.raises(ModelError):
            TollSchedule(np.array([[-1.0]]))
        with pytest.raises(ModelError):
            DBCPPolicy(TollSchedule(np.array([[1.0]])), np.array([[1.5]]))
        with pytest.raises(ModelError):
            CBCPPolicy(TollSchedule(np.array([[1.0]])), np.array([-0.5]))

    def test_off_span_flow_reported(self):
        spec = LatencySpec(free_flow=1.0, slope=0.1)
        net = ChainNetwork.from_edges([("e0", spec), ("e1", spec)])
        pop = Population(net, [UserGroup("g", 0, 1, 5.0, (1.0,))], horizon=1)
        y = Flow.from_express(pop, np.zeros((2, 1, 1)))
        y.express[1, 0, 0] = 1.0
        report = check_admissible(net, pop, y)
        assert any(v.kind == "off_span" for v in report.violations)
