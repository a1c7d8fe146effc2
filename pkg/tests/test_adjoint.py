import csv
import dataclasses

import numpy as np
import pytest

from conftest import two_region_loop
from mfd_dso.adjoint import (backward_sweep, control_gradient, control_index, control_jacobian,
                             fd_gradient_oracle, gradient_check, stage_cost_gradient, state_jacobian,
                             terminal_adjoint, write_gradcheck_csv, write_gradient_csv)
from mfd_dso.dynamics import simulate_forward
from mfd_dso.network import compile_network
from mfd_dso.objective import criterion
from mfd_dso.optimizer import initial_assignment
from mfd_dso.presets import scenario_chain4, scenario_single_od

MODELS = [("strada", "buffer"), ("kkt_optimization", "buffer"),
          ("strada", "homogeneous_queue"), ("kkt_optimization", "homogeneous_queue")]


def short_chain(flow="strada", origin="buffer", n_steps=40):
    return compile_network(scenario_chain4(n_steps=n_steps, flow_model=flow, origin_model=origin))


class TestTerminal:
    def test_zero_weight(self):
        np.testing.assert_array_equal(terminal_adjoint([3.0, 4.0], [0.0, 0.0]), 0.0)

    def test_scaled_occupancy(self):
        ya, yc = terminal_adjoint([7.0], [2.0], n_classes=3)
        assert ya[0] == pytest.approx(14.0)
        assert np.all(yc == 0.0)

    def test_empty_network(self):
        np.testing.assert_array_equal(terminal_adjoint(np.zeros(4), np.full(4, 3.0)), 0.0)


class TestRecursion:
    def test_zero_demand_accumulates_time_cost(self):
        net = compile_network(two_region_loop(n0=0.0, t_f=50.0))
        traj = simulate_forward(net, initial_assignment(net))
        adj = backward_sweep(traj).adjoint
        k = np.arange(net.K + 1)
        np.testing.assert_allclose(adj.agg, ((net.K - k) * net.dt)[:, None] * net.tts_weight, atol=1e-12)
        np.testing.assert_allclose(adj.cls, 0.0, atol=1e-12)

    @pytest.mark.parametrize("flow, origin", MODELS)
    def test_fused_matches_explicit_jacobians(self, flow, origin):
        net = short_chain(flow, origin)
        traj = simulate_forward(net, initial_assignment(net))
        a = backward_sweep(traj)
        b = backward_sweep(traj, method="jacobian")
        scale = max(np.abs(a.gamma).max(), np.abs(a.departures).max())
        np.testing.assert_allclose(a.gamma, b.gamma, rtol=0, atol=1e-12 * scale)
        np.testing.assert_allclose(a.departures, b.departures, rtol=0, atol=1e-12 * scale)
        np.testing.assert_allclose(a.adjoint.agg, b.adjoint.agg, rtol=1e-12, atol=1e-12 * scale)

    def test_one_step_horizon(self):
        net = compile_network(scenario_single_od(t_f=2.0, horizon=1.0, t_a=2.0, total=1.0,
                                                 window=(0.0, 0.0, 1.0, 1.0)))
        assert net.K == 2
        traj = simulate_forward(net, initial_assignment(net))
        adj = backward_sweep(traj).adjoint
        ga, gc = stage_cost_gradient(traj, 0)
        jx = state_jacobian(traj, 0).toarray()
        nxt = np.concatenate([adj.agg[1], adj.cls[1].ravel()])
        np.testing.assert_allclose(np.concatenate([adj.agg[0], adj.cls[0].ravel()]),
                                   np.concatenate([ga, gc.ravel()]) + jx.T @ nxt, atol=1e-12)

    def test_stored_adjoint_gives_same_gradient(self, chain4):
        traj = simulate_forward(chain4, initial_assignment(chain4))
        full = backward_sweep(traj)
        again = control_gradient(traj, full.adjoint)
        np.testing.assert_allclose(again.gamma, full.gamma, atol=1e-12)
        np.testing.assert_allclose(again.departures, full.departures, atol=1e-12)

    @pytest.mark.parametrize("flow", ["strada", "kkt_optimization"])
    def test_initial_state_sensitivity(self, flow):
        net = short_chain(flow, n_steps=60)
        rng = np.random.default_rng(3)
        n0 = np.where(net.route_mask.any(axis=0)[None, :] & ~net.is_buffer[:, None],
                      rng.uniform(5.0, 40.0, (net.n, net.C)), 0.0)
        net = dataclasses.replace(net, n0_cls=n0)
        ctrl = initial_assignment(net)
        traj = simulate_forward(net, ctrl)
        adj = backward_sweep(traj).adjoint
        h = 1e-4
        for i, c in zip(*np.nonzero(n0)):
            vals = []
            for sign in (1, -1):
                pert = n0.copy()
                pert[i, c] += sign * h
                t = simulate_forward(dataclasses.replace(net, n0_cls=pert), ctrl, check=False,
                                     dtype=np.longdouble)
                vals.append(criterion(t))
            fd = float((vals[0] - vals[1]) / (2 * h))
            an = adj.agg[0, i] + adj.cls[0, i, c]
            assert an == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestStepJacobians:
    def test_state_jacobian_sparsity(self, chain4):
        traj = simulate_forward(chain4, initial_assignment(chain4))
        n, C = chain4.n, chain4.C
        coupled = np.eye(n, dtype=bool)
        coupled[chain4.e_src, chain4.e_dst] = True
        coupled[chain4.e_dst, chain4.e_src] = True
        node_of = np.concatenate([np.arange(n), np.repeat(np.arange(n), C)])
        allowed = coupled[node_of][:, node_of]
        for k in (10, 60, 120):
            jx = state_jacobian(traj, k).toarray()
            assert not np.any((jx != 0) & ~allowed)

    def test_departure_column_is_dt(self, single_od):
        traj = simulate_forward(single_od, initial_assignment(single_od))
        ju = control_jacobian(traj, 50).toarray()
        o = single_od.node_index("O")
        col = ju[:, -1]
        assert col[o] == pytest.approx(single_od.dt)
        assert col[single_od.n + o * single_od.C] == pytest.approx(single_od.dt)
        assert np.count_nonzero(col) == 2

    def test_stage_gradient_away_from_exits(self, chain4):
        traj = simulate_forward(chain4, initial_assignment(chain4))
        ga, gc = stage_cost_gradient(traj, 80)
        for r in ("R1", "R2", "O1", "O2"):
            i = chain4.node_index(r)
            assert ga[i] == pytest.approx(chain4.dt * chain4.tts_weight[i])
            np.testing.assert_array_equal(gc[i], 0.0)


class TestControlGradient:
    def test_unused_class_has_zero_routing_gradient(self, chain4):
        traj = simulate_forward(chain4, initial_assignment(chain4))
        g = backward_sweep(traj, keep_adjoint=False).gamma
        r1 = chain4.node_index("R1")
        o2_classes = [c for c, (d, _) in enumerate(chain4.classes) if d == "D3"]
        assert np.all(traj.n_cls[:, r1, o2_classes] == 0.0)
        out_r1 = np.flatnonzero(chain4.e_src == r1)
        np.testing.assert_array_equal(g[:, out_r1][:, :, o2_classes], 0.0)

    def test_departure_gradient_composition(self, chain4):
        traj = simulate_forward(chain4, initial_assignment(chain4))
        res = backward_sweep(traj)
        adj = res.adjoint
        for p in range(chain4.P):
            o, c = chain4.p_node[p], chain4.p_class[p]
            k = np.arange(chain4.K_dep)
            expect = chain4.dt * (adj.agg[k + 1, o] + adj.cls[k + 1, o, c])
            np.testing.assert_allclose(res.departures[p], expect, rtol=1e-12, atol=1e-12)

    def test_fd_step_plateau(self, chain4):
        ctrl = initial_assignment(chain4)
        g = backward_sweep(simulate_forward(chain4, ctrl), keep_adjoint=False)
        idx = (0, 30)
        a = g.departures[idx]
        flat = control_index(ctrl, "departure", idx)
        for h in (1e-3, 1e-4, 1e-5, 1e-6, 1e-7):
            est = fd_gradient_oracle(chain4, ctrl, flat, h=h)
            assert not est.nonsmooth
            assert est.value == pytest.approx(a, rel=1e-5)

    def test_large_step_is_flagged(self, chain4):
        ctrl = initial_assignment(chain4)
        est = fd_gradient_oracle(chain4, ctrl, control_index(ctrl, "departure", (0, 30)), h=50.0)
        assert est.nonsmooth

    def test_quadratic_terminal_only(self):
        # a near-closed region keeps almost everything until t_f, so the terminal term dominates
        cfg = scenario_single_od(total=10.0, t_f=20.0, horizon=10.0, t_a=20.0, q_max=0.01, n_c=1.0,
                                 n_j=4.0, nu=1e6, window=(0.0, 0.0, 10.0, 10.0), dt=1.0)
        cfg = cfg.replace(penalties=dataclasses.replace(cfg.penalties, default_terminal_weight=0.5))
        net = compile_network(cfg, validate=False)
        ctrl = initial_assignment(net)
        g = backward_sweep(simulate_forward(net, ctrl), keep_adjoint=False)
        est = fd_gradient_oracle(net, ctrl, control_index(ctrl, "departure", (0, 9)))
        assert g.departures[0, 9] == pytest.approx(est.value, rel=1e-7)

    @pytest.mark.parametrize("flow, origin", MODELS)
    def test_sampled_components(self, flow, origin):
        net = short_chain(flow, origin, n_steps=60)
        recs = gradient_check(net, initial_assignment(net), n=40, seed=1)
        smooth = [r for r in recs if not r.nonsmooth]
        assert len(smooth) == 40
        assert max(r.rel_error for r in smooth) < 1e-5


class TestExport:
    def test_gradient_csv(self, tmp_path, chain4):
        g = backward_sweep(simulate_forward(chain4, initial_assignment(chain4)), keep_adjoint=False)
        path = tmp_path / "grad.csv"
        write_gradient_csv(g.controls, chain4, path, tol=1e-9)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert rows and set(rows[0]) == {"k", "control", "value"}

    def test_gradcheck_csv(self, tmp_path, chain4):
        recs = gradient_check(chain4, initial_assignment(chain4), n=3, seed=2)
        path = tmp_path / "gc.csv"
        write_gradcheck_csv(recs, path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(recs)
        assert float(rows[0]["rel_error"]) == pytest.approx(recs[0].rel_error, rel=1e-3)
