import numpy as np
import pytest

from tollgrid import (
    CBCPPolicy,
    ChainNetwork,
    DBCPPolicy,
    LatencySpec,
    Population,
    TollSchedule,
    UserGroup,
    lane_flows,
    solve_cbcp,
    solve_dbcp,
    vi_residual,
)
from tollgrid.societal import SocietalWeights, societal_cost, toll_revenue
from tollgrid.synthesis import (
    AssumptionViolation,
    ConstructionError,
    Prop7Certificate,
    construct_cbcp_from_dbcp,
    construct_dbcp_from_cbcp,
    theorem_check,
    verify_assumption_4,
)
from helpers import derived_edge, random_cbcp_policy, random_instance


def derived_cbcp():
    net, pop = derived_edge()
    policy = CBCPPolicy(TollSchedule(np.array([[0.5]])), np.array([1.0]))
    res = solve_cbcp(net, pop, policy)
    return net, pop, policy, res


class TestLemma3Construction:
    def test_derived_case1(self):
        net, pop, policy, res = derived_cbcp()
        dbcp, y_hat, records = construct_dbcp_from_cbcp(net, pop, policy, res.flow)
        rec = records[0]
        assert rec.case == 1
        # v_bar_I = tau / (l2 - l1) = 0.5 / 0.5; v_bar_E = 0.2; alpha = 1 - 0.2/1.0
        assert rec.v_bar_i == pytest.approx(1.0, abs=1e-6)
        assert rec.v_bar_e == pytest.approx(0.2)
        assert dbcp.alpha[0, 0] == pytest.approx(0.8, abs=1e-6)
        assert y_hat.express[0, 0, 1] == pytest.approx(2.0, abs=1e-6)
        assert y_hat.express[0, 0, 0] == pytest.approx(5.5, abs=1e-6)
        assert vi_residual(net, pop, dbcp, y_hat) <= 1e-9

    def test_zero_toll_case3(self):
        net, pop = derived_edge()
        policy = CBCPPolicy(TollSchedule(np.zeros((1, 1))), np.array([0.0]))
        res = solve_cbcp(net, pop, policy)
        dbcp, y_hat, records = construct_dbcp_from_cbcp(net, pop, policy, res.flow)
        assert records[0].case == 3
        assert dbcp.alpha[0, 0] == 0.0
        # latency-equalized split transfers unchanged
        x = lane_flows(net, pop, y_hat)
        assert x.x[0, 0, 0] == pytest.approx(x.x[0, 1, 0], abs=1e-9)

    def test_equalized_flows_case2(self):
        # tiny demand below threshold: flat latencies, alpha = 1, y_hat = y
        spec = LatencySpec(free_flow=1.0, slope=0.5, threshold=50.0, n_gp=1)
        net = ChainNetwork.from_edges([("e0", spec)])
        pop = Population(net, [
            UserGroup("I", 0, 1, 4.0, (1.0,), eligible=False),
            UserGroup("E", 0, 1, 2.0, (0.1,), eligible=True),
        ], horizon=1)
        policy = CBCPPolicy(TollSchedule(np.array([[0.3]])), np.array([5.0]))
        res = solve_cbcp(net, pop, policy)
        dbcp, y_hat, records = construct_dbcp_from_cbcp(net, pop, policy, res.flow)
        assert records[0].case == 2
        assert dbcp.alpha[0, 0] == 1.0
        np.testing.assert_allclose(y_hat.express, res.flow.express, atol=1e-12)

    def test_matching_and_dominance_randomized(self, rng):
        checked = 0
        attempts = 0
        while checked < 20 and attempts < 200:
            attempts += 1
            net, pop = random_instance(rng)
            if pop.n_eligible == 0:
                continue
            policy = random_cbcp_policy(rng, net, pop)
            res = solve_cbcp(net, pop, policy)
            try:
                dbcp, y_hat, _ = construct_dbcp_from_cbcp(net, pop, policy, res.flow)
            except AssumptionViolation:
                continue
            checked += 1
            elig = pop.eligible[None, None, :]
            # eligible express totals match per (e, t); ineligible match exactly
            np.testing.assert_allclose(
                (y_hat.express * elig).sum(axis=2),
                (res.flow.express * elig).sum(axis=2), atol=1e-9,
            )
            np.testing.assert_allclose(
                y_hat.express * ~elig, res.flow.express * ~elig, atol=1e-9
            )
            # lane flows therefore coincide
            np.testing.assert_allclose(
                lane_flows(net, pop, y_hat).x, res.lane_flow.x, atol=1e-9
            )
            assert vi_residual(net, pop, dbcp, y_hat) <= 1e-9
            # eligible latency cost dominance per (e, t)
            from tollgrid.synthesis import _eligible_latency_cost_by_slot

            x_hat = lane_flows(net, pop, y_hat)
            diff = _eligible_latency_cost_by_slot(net, pop, y_hat, x_hat) - \
                _eligible_latency_cost_by_slot(net, pop, res.flow, res.lane_flow)
            assert diff.max() <= 1e-9
        assert checked == 20

    def test_assumption4_violation_refused(self):
        # an eligible group with a top-tier VoT reaches tolled express unsubsidized
        spec = LatencySpec(free_flow=1.0, slope=0.1, threshold=0.0, n_gp=1)
        net = ChainNetwork.from_edges([("e0", spec)])
        pop = Population(net, [
            UserGroup("I", 0, 1, 10.0, (0.3,), eligible=False),
            UserGroup("E", 0, 1, 10.0, (2.0,), eligible=True),
        ], horizon=1)
        policy = CBCPPolicy(TollSchedule(np.array([[0.5]])), np.array([2.0]))
        res = solve_cbcp(net, pop, policy)
        with pytest.raises(AssumptionViolation) as exc:
            construct_dbcp_from_cbcp(net, pop, policy, res.flow)
        assert "E" in str(exc.value)

    def test_constructed_flow_orders_eligible_by_vot(self, rng):
        spec = LatencySpec(free_flow=1.0, slope=0.05, threshold=0.0, n_gp=1)
        net = ChainNetwork.from_edges([("e0", spec)])
        pop = Population(net, [
            UserGroup("I", 0, 1, 8.0, (2.0,), eligible=False),
            UserGroup("E1", 0, 1, 3.0, (0.05,), eligible=True),
            UserGroup("E2", 0, 1, 3.0, (0.08,), eligible=True),
        ], horizon=1)
        policy = CBCPPolicy(TollSchedule(np.array([[0.4]])), np.array([2.0, 0.2]))
        res = solve_cbcp(net, pop, policy)
        dbcp, y_hat, _ = construct_dbcp_from_cbcp(net, pop, policy, res.flow)
        # E2 (higher VoT) is served before E1
        if y_hat.express[0, 0, 1] > 1e-9:
            assert y_hat.express[0, 0, 2] == pytest.approx(3.0, abs=1e-9)


class TestProp7Construction:
    def test_derived_budget_assignment(self):
        net, pop = derived_edge()
        dbcp = DBCPPolicy(TollSchedule(np.array([[0.5]])), np.array([[0.8]]))
        res = solve_dbcp(net, pop, dbcp)
        # eligible effective VoT = 0.2/0.2 = 1.0 ties the ineligible group;
        # build the flow with eligible express = 2 directly
        from tollgrid import Flow

        express = np.zeros((1, 1, 2))
        express[0, 0, 0] = 5.5
        express[0, 0, 1] = 2.0
        y = Flow.from_express(pop, express)
        cbcp, cert = construct_cbcp_from_dbcp(net, pop, dbcp, y)
        assert cbcp.budgets[0] == pytest.approx(1.0)
        assert cert.certified
        assert cert.eligible_revenue_term == pytest.approx((1 - 0.8) * 0.5 * 2.0)

    def test_zero_eligible_flow_zero_budget(self):
        net, pop = derived_edge()
        dbcp = DBCPPolicy(TollSchedule(np.array([[0.5]])), np.array([[0.5]]))
        res = solve_dbcp(net, pop, dbcp)
        cbcp, cert = construct_cbcp_from_dbcp(net, pop, dbcp, res.flow)
        assert cbcp.budgets[0] == 0.0
        assert cert.cost_gap(SocietalWeights(2.0, 1.0, 1.0)) == pytest.approx(0.0)

    def test_cost_gap_formula(self):
        cert = Prop7Certificate(budget=1.0, vi_residual=0.0, certified=True,
                                eligible_revenue_term=(1 - 0.8) * 0.5 * 2.0)
        w = SocietalWeights(2.0, 1.0, 1.0)
        assert cert.cost_gap(w) == pytest.approx(0.2)

    def test_multi_edge_refused(self):
        spec = LatencySpec(free_flow=1.0, slope=0.1)
        net = ChainNetwork.from_edges([("e0", spec), ("e1", spec)])
        pop = Population(net, [UserGroup("E", 0, 2, 2.0, (0.1,), eligible=True)], horizon=1)
        dbcp = DBCPPolicy(TollSchedule(np.zeros((2, 1))), np.zeros((2, 1)))
        res = solve_dbcp(net, pop, dbcp)
        with pytest.raises(ConstructionError):
            construct_cbcp_from_dbcp(net, pop, dbcp, res.flow)


class TestTheoremCheck:
    def test_derived_margin(self):
        net, pop, policy, res = derived_cbcp()
        w = SocietalWeights(1.0, 2.0, 1.0)   # lambda_R - lambda_E = 1
        report = theorem_check(net, pop, w, [("derived", policy, res.flow)])
        entry = report.entries[0]
        assert entry.ok and entry.precondition_ok
        # constructed DBCP collects 0.2 eligible revenue at alpha = 0.8
        assert entry.eligible_revenue == pytest.approx(0.2, abs=1e-6)
        assert entry.margin >= (2.0 - 1.0) * 0.2 - 1e-9
        assert entry.strict_checked and entry.strict_ok

    def test_equal_weights_nonstrict(self):
        net, pop, policy, res = derived_cbcp()
        w = SocietalWeights(1.0, 1.0, 1.0)
        report = theorem_check(net, pop, w, [("derived", policy, res.flow)])
        entry = report.entries[0]
        assert entry.ok
        assert entry.margin >= -1e-9
        assert not entry.strict_checked

    def test_lambda_r_below_lambda_e_reported_not_asserted(self):
        net, pop, policy, res = derived_cbcp()
        w = SocietalWeights(2.0, 1.0, 1.0)
        report = theorem_check(net, pop, w, [("derived", policy, res.flow)])
        assert not report.entries[0].precondition_ok
        assert not report.all_ok

    def test_randomized_dominance(self, rng):
        checked = 0
        attempts = 0
        while checked < 15 and attempts < 200:
            attempts += 1
            net, pop = random_instance(rng)
            if pop.n_eligible == 0:
                continue
            policy = random_cbcp_policy(rng, net, pop)
            res = solve_cbcp(net, pop, policy)
            w = SocietalWeights(1.0, 3.0, 1.0)
            report = theorem_check(net, pop, w, [("r", policy, res.flow)])
            e = report.entries[0]
            if not e.precondition_ok:
                continue
            checked += 1
            assert e.ok
            assert e.f_dbcp <= e.f_cbcp + 1e-9
        assert checked == 15


class TestAssumption4Gate:
    def test_gate_passes_low_vot_eligible(self):
        net, pop = derived_edge()
        verify_assumption_4(net, pop, TollSchedule(np.array([[0.5]])))

    def test_gate_catches_high_vot_eligible(self):
        spec = LatencySpec(free_flow=1.0, slope=0.1, threshold=0.0, n_gp=1)
        net = ChainNetwork.from_edges([("e0", spec)])
        pop = Population(net, [
            UserGroup("I", 0, 1, 10.0, (0.3,), eligible=False),
            UserGroup("E", 0, 1, 10.0, (2.0,), eligible=True),
        ], horizon=1)
        with pytest.raises(AssumptionViolation):
            verify_assumption_4(net, pop, TollSchedule(np.array([[0.5]])))
