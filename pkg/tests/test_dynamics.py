import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import two_region_loop
from mfd_dso.dynamics import (SimulationFault, alt_origin_step, check_conservation, disaggregate_flows,
                              exit_flows, kkt_merge_flows, partial_demands, simulate_forward,
                              strada_flows, write_flows_csv, write_trajectory_csv)
from mfd_dso.network import Controls, compile_network, uniform_controls
from mfd_dso.optimizer import initial_assignment
from mfd_dso.presets import scenario_8region, scenario_chain4, scenario_single_od
from oracles import merge_qp_oracle


class TestPartialDemands:
    def test_empty_region(self):
        assert partial_demands(0.0, 0.0, np.array([1.0, 1.0]), np.zeros(2)) == 0.0

    def test_single_class_collapses(self):
        assert partial_demands(0.7, 50.0, np.array([1.0]), np.array([50.0])) == pytest.approx(0.7)

    def test_two_class_mix(self):
        got = partial_demands(0.1, 100.0, np.array([1.0, 0.5]), np.array([60.0, 40.0]))
        assert got == pytest.approx(0.08)


class TestStrada:
    def test_zero_demand(self):
        q, s = strada_flows(0.0, 2.0, 0.5)
        assert q == 0.0 and not s

    def test_supply_bound(self):
        q, s = strada_flows(3.0, 2.0, 0.5)
        assert q == pytest.approx(1.0) and s

    def test_demand_bound(self):
        q, s = strada_flows(0.4, 2.0, 0.5)
        assert q == pytest.approx(0.4) and not s


class TestKktMerge:
    def test_single_unconstrained(self):
        res = kkt_merge_flows([0.8], [1.0], 5.0)
        np.testing.assert_allclose(res.q, [0.8])
        assert not res.supply_bound

    def test_equal_split(self):
        res = kkt_merge_flows([800.0, 600.0], [1000.0, 1000.0], 1000.0)
        np.testing.assert_allclose(res.q, [500.0, 500.0])
        assert res.zeta == pytest.approx(0.5)

    def test_clamped_inflow(self):
        res = kkt_merge_flows([100.0, 600.0], [1000.0, 1000.0], 500.0)
        np.testing.assert_allclose(res.q, [100.0, 400.0])
        assert res.zeta == pytest.approx(0.6)
        assert list(res.interior) == [False, True]

    def test_examples_match_oracle(self):
        for delta, sigma in (([800.0, 600.0], 1000.0), ([100.0, 600.0], 500.0)):
            got = kkt_merge_flows(delta, [1000.0, 1000.0], sigma).q
            np.testing.assert_allclose(got, merge_qp_oracle(delta, [1000.0, 1000.0], sigma), atol=1e-9)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 10), st.floats(0.1, 10)), min_size=1, max_size=4),
           st.floats(0, 30))
    def test_matches_oracle(self, pairs, sigma):
        delta = np.array([p[0] for p in pairs])
        q_x = np.array([p[1] for p in pairs])
        got = kkt_merge_flows(delta, q_x, sigma).q
        np.testing.assert_allclose(got, merge_qp_oracle(delta, q_x, sigma), atol=1e-8)
        assert got.sum() == pytest.approx(min(sigma, delta.sum()), abs=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 10), st.floats(0.1, 10)), min_size=1, max_size=4),
           st.floats(0, 30), st.floats(0, 5))
    def test_monotone_in_supply(self, pairs, sigma, extra):
        delta = np.array([p[0] for p in pairs])
        q_x = np.array([p[1] for p in pairs])
        lo = kkt_merge_flows(delta, q_x, sigma).q
        hi = kkt_merge_flows(delta, q_x, sigma + extra).q
        assert np.all(hi >= lo - 1e-9)


class TestDisaggregation:
    def test_single_class(self):
        np.testing.assert_allclose(disaggregate_flows(0.7, np.array([1.0]), np.array([20.0])), [0.7])

    def test_proportional(self):
        got = disaggregate_flows(1.0, np.array([1.0, 1.0]), np.array([60.0, 40.0]))
        np.testing.assert_allclose(got, [0.6, 0.4])

    def test_excluded_class(self):
        got = disaggregate_flows(1.0, np.array([1.0, 0.0]), np.array([60.0, 40.0]))
        np.testing.assert_allclose(got, [1.0, 0.0])

    def test_flow_without_vehicles_is_a_fault(self):
        with pytest.raises(SimulationFault):
            disaggregate_flows(1.0, np.array([0.0]), np.array([10.0]))


class TestExitFlows:
    def test_no_bound_vehicles(self):
        q, qc, s = exit_flows(1.0, 100.0, np.array([100.0]), np.array([0.0]))
        assert q == 0.0 and np.all(qc == 0.0)

    def test_unlimited_supply(self):
        q, qc, s = exit_flows(1.0, 100.0, np.array([100.0]), np.array([1.0]))
        assert q == pytest.approx(1.0) and not s

    def test_class_split(self):
        q, qc, s = exit_flows(0.5, 100.0, np.array([30.0, 70.0]), np.array([1.0, 1.0]))
        np.testing.assert_allclose(qc, [0.15, 0.35])

    def test_supply_binds(self):
        q, qc, s = exit_flows(1.0, 100.0, np.array([100.0]), np.array([1.0]), exit_supply=0.25)
        assert q == pytest.approx(0.25) and s


class TestQueueOrigin:
    def test_empty(self):
        nxt, q, qc = alt_origin_step(np.zeros(1), np.zeros(1), np.ones((1, 1)), np.array([5.0]), 10.0)
        assert q[0] == 0.0 and nxt[0] == 0.0

    def test_drains_in_one_step(self):
        nxt, q, qc = alt_origin_step(np.array([50.0]), np.zeros(1), np.ones((1, 1)), np.array([100.0]), 10.0)
        assert q[0] == pytest.approx(5.0) and nxt[0] == pytest.approx(0.0)

    def test_supply_caps(self):
        nxt, q, qc = alt_origin_step(np.zeros(1), np.array([3.0]), np.ones((1, 1)), np.array([1.0]), 10.0)
        assert q[0] == pytest.approx(1.0)
        assert nxt[0] == pytest.approx((3.0 - 1.0) * 10.0)


def _all_models():
    for flow in ("strada", "kkt_optimization"):
        for origin in ("buffer", "homogeneous_queue"):
            yield flow, origin


class TestSimulation:
    def test_zero_demand(self):
        net = compile_network(scenario_single_od(total=0.0))
        traj = simulate_forward(net, uniform_controls(net))
        assert np.all(traj.n_agg == 0.0) and np.all(traj.q == 0.0) and np.all(traj.qx == 0.0)

    def test_closed_loop_conserved(self):
        net = compile_network(two_region_loop())
        traj = simulate_forward(net, uniform_controls(net))
        assert net.K == 1000
        np.testing.assert_allclose(traj.n_agg.sum(axis=1), 65.0, rtol=0, atol=1e-9)

    def test_inflow_accumulates(self):
        net = compile_network(scenario_single_od(total=300.0, window=(0.0, 0.0, 300.0, 300.0), dt=10.0,
                                                 nu=100.0, q_max=2.0))
        ctrl = uniform_controls(net)
        ctrl.departures[:] = 0.0
        ctrl.departures[0, :30] = 1.0
        traj = simulate_forward(net, ctrl)
        o = net.node_index("O")
        assert traj.n_agg[1, o] == pytest.approx(10.0)

    def test_uncongested_single_od_delivers_everything(self):
        cfg = scenario_single_od(total=300.0, t_f=6000.0)
        net = compile_network(cfg)
        traj = simulate_forward(net, initial_assignment(net))
        assert traj.arrived[-1] == pytest.approx(300.0, rel=1e-6)

    @pytest.mark.parametrize("flow, origin", list(_all_models()))
    def test_invariants(self, flow, origin):
        net = compile_network(scenario_chain4(flow_model=flow, origin_model=origin))
        traj = simulate_forward(net, initial_assignment(net))
        err, drift = check_conservation(traj)
        assert err <= 1e-9 * net.total_demand and drift <= 1e-9 * max(1.0, traj.n_agg.max())
        regions = ~net.is_buffer
        assert traj.n_agg.min() >= 0.0
        assert np.all(traj.n_agg[:, regions] <= net.jam[regions] + 1e-9)
        for k in range(0, net.K, 7):
            qc = traj.class_edge_flows(k)
            assert qc.min() >= 0.0
            np.testing.assert_allclose(qc.sum(axis=1), traj.q[k], rtol=1e-9, atol=1e-12)
            assert np.all(traj.q[k] <= traj.delta[k] + 1e-12)
            if flow == "strada":
                assert np.all(traj.q[k] <= net.beta * traj.sigma[k][net.e_dst] + 1e-12)

    def test_symmetric_kkt_split(self):
        res = kkt_merge_flows([3.0, 3.0], [2.0, 2.0], 4.0)
        assert res.q[0] == pytest.approx(res.q[1])

    def test_eight_region_below_jam(self):
        net = compile_network(scenario_8region(scale=0.1, dt=5.0))
        traj = simulate_forward(net, initial_assignment(net))
        r5 = net.node_index("R5")
        assert traj.n_agg[:, r5].max() < net.jam[r5]

    def test_negative_state_is_a_fault(self):
        net = compile_network(scenario_single_od())
        ctrl = uniform_controls(net)
        ctrl.departures[:] = -1.0
        with pytest.raises(SimulationFault):
            simulate_forward(net, ctrl)

    def test_deterministic(self, chain4):
        a = simulate_forward(chain4, initial_assignment(chain4))
        b = simulate_forward(chain4, initial_assignment(chain4))
        assert np.array_equal(a.n_cls, b.n_cls)


class TestExport:
    def test_trajectory_csv(self, tmp_path, single_od):
        traj = simulate_forward(single_od, initial_assignment(single_od))
        path = tmp_path / "traj.csv"
        write_trajectory_csv(traj, path, per_class=True, every=10)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0].keys() >= {"step", "time_s", "region", "N_total"}
        r = single_od.node_index("R")
        row = next(x for x in rows if x["step"] == "100" and x["region"] == "R")
        assert float(row["N_total"]) == pytest.approx(traj.n_agg[100, r], rel=1e-8)

    def test_flows_csv(self, tmp_path, single_od):
        traj = simulate_forward(single_od, initial_assignment(single_od))
        path = tmp_path / "flows.csv"
        write_flows_csv(traj, path, every=50)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["to"] for r in rows} == {"R", "D"}
        assert all(float(r["q"]) >= 0 for r in rows)
