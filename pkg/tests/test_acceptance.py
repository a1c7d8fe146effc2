"""End-to-end acceptance checks; each test prints one PASS/FAIL line.

The same lines are repeated in the terminal summary of the pytest run.
"""
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from conftest import record_acceptance, two_region_loop
from mfd_dso.adjoint import gradient_check
from mfd_dso.cli import _run_algorithm
from mfd_dso.dynamics import check_conservation, kkt_merge_flows, simulate_forward
from mfd_dso.network import Controls, compile_network, uniform_controls
from mfd_dso.optimizer import OptimizerConfig, initial_assignment, read_convergence_csv, write_convergence_csv
from mfd_dso.presets import scenario_8region, scenario_chain4, scenario_single_od
from mfd_dso.projection import ControlProjector, project_demand_budget, qp_oracle
from mfd_dso.scenario import ScenarioError, cfl_timestep, validate_scenario
from oracles import merge_qp_oracle

ITERATIONS = 50


# ---------------------------------------------------------------------------
# 1. gradient correctness


@pytest.mark.parametrize("flow", ["strada", "kkt_optimization"])
def test_gradient_matches_finite_differences(flow):
    cfg = scenario_chain4(dt=5.0, n_steps=200, flow_model=flow)
    net = compile_network(cfg)
    assert (net.K, net.dt, net.P, len(net.config.demand.arrival_times)) == (200, 5.0, 4, 2)
    # an interior point: every routing block mixes its shortest path with the uniform split
    base, uni = initial_assignment(net), uniform_controls(net)
    point = ControlProjector(net)(Controls(0.7 * base.gamma + 0.3 * uni.gamma,
                                           0.7 * base.departures + 0.3 * uni.departures))
    t0 = time.perf_counter()
    recs = gradient_check(net, point, n=200, seed=0)
    elapsed = time.perf_counter() - t0
    smooth = [r for r in recs if not r.nonsmooth]
    worst = max(r.rel_error for r in smooth)
    nonzero = sum(r.fd != 0.0 for r in smooth)
    ok = len(smooth) >= 200 and worst < 1e-5 and elapsed < 60.0
    record_acceptance(f"1 ({flow})", ok,
                      f"{len(smooth)} smooth components ({nonzero} nonzero, {len(recs) - len(smooth)} "
                      f"nonsmooth skipped), max rel error {worst:.2e} < 1e-5, {elapsed:.1f} s < 60 s")
    assert ok


# ---------------------------------------------------------------------------
# 2. projection exactness


def test_projection_matches_oracle():
    rng = np.random.default_rng(2024)
    worst, ties = 0.0, 0
    t0 = time.perf_counter()
    for i in range(10_000):
        m = int(rng.integers(2, 17))
        if i % 3 == 0:
            # repeated values give equal cut values (zero-length segments)
            v = rng.choice(rng.normal(0, 1, 3), size=m)
            ties += 1
        else:
            v = rng.normal(0, rng.choice([0.1, 1.0, 10.0]), m)
        budget = 1.0 if i % 2 == 0 else float(rng.uniform(0.1, 50.0))
        x = project_demand_budget(v, budget)
        worst = max(worst, float(np.abs(x - qp_oracle(v, budget)).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 30.0
    record_acceptance(2, ok, f"10000 projections (dims 2-16, {ties} with ties), max deviation {worst:.1e} "
                             f"<= 1e-10, {elapsed:.1f} s < 30 s")
    assert ok


# ---------------------------------------------------------------------------
# 3. merge solver


def test_merge_solver():
    rng = np.random.default_rng(7)
    worst, mono_fail = 0.0, 0
    for _ in range(1000):
        m = int(rng.integers(1, 5))
        delta = rng.uniform(0, 10, m) * (rng.random(m) > 0.1)
        q_x = rng.uniform(0.5, 10, m)
        sigma = float(rng.uniform(0, 1.2 * delta.sum() + 1))
        q = kkt_merge_flows(delta, q_x, sigma).q
        worst = max(worst, float(np.abs(q - merge_qp_oracle(delta, q_x, sigma)).max()))
        more_supply = kkt_merge_flows(delta, q_x, sigma + float(rng.uniform(0, 5))).q
        j = int(rng.integers(m))
        bumped = delta.copy()
        bumped[j] += float(rng.uniform(0, 5))
        more_demand = kkt_merge_flows(bumped, q_x, sigma).q
        mono_fail += bool(np.any(more_supply < q - 1e-9) or more_demand[j] < q[j] - 1e-9
                          or more_demand.sum() < q.sum() - 1e-9)
    sym = [kkt_merge_flows([d, d], [x, x], s).q for d, x, s in ((5.0, 2.0, 4.0), (1.0, 7.0, 0.3), (3.0, 3.0, 10.0))]
    sym_ok = all(abs(a - b) <= 1e-12 for a, b in sym)
    ok = worst <= 1e-8 and mono_fail == 0 and sym_ok
    record_acceptance(3, ok, f"1000 merges vs active-set oracle, max deviation {worst:.1e} <= 1e-8; "
                             f"monotonicity violations {mono_fail}; symmetric split equal: {sym_ok}")
    assert ok


# ---------------------------------------------------------------------------
# 4. conservation


def _battery():
    for flow in ("strada", "kkt_optimization"):
        for origin in ("buffer", "homogeneous_queue"):
            net = compile_network(scenario_chain4(flow_model=flow, origin_model=origin))
            yield f"chain4/{flow}/{origin}", net, initial_assignment(net)
            yield f"chain4/{flow}/{origin}/uniform", net, uniform_controls(net)
            rng = np.random.default_rng(len(flow) + len(origin))
            u = uniform_controls(net)
            rand = ControlProjector(net)(Controls(u.gamma + rng.uniform(0, 1, u.gamma.shape),
                                                  u.departures * rng.uniform(0, 2, u.departures.shape)))
            yield f"chain4/{flow}/{origin}/random", net, rand
    for origin in ("buffer", "homogeneous_queue"):
        net = compile_network(scenario_single_od(origin_model=origin))
        yield f"single_od/{origin}", net, initial_assignment(net)
    net = compile_network(scenario_8region(scale=0.1, dt=5.0))
    yield "8region/desk", net, initial_assignment(net)
    net = compile_network(two_region_loop())
    yield "closed loop", net, uniform_controls(net)


def test_conservation():
    worst_rel, worst_drift, count = 0.0, 0.0, 0
    for name, net, ctrl in _battery():
        traj = simulate_forward(net, ctrl, check=False)
        inside = traj.n_agg.sum(axis=1)
        err = np.abs(traj.departed + net.n0_cls.sum() - inside - traj.arrived).max()
        worst_rel = max(worst_rel, float(err) / max(net.total_demand, 1.0))
        per_vehicle = np.abs(traj.n_cls.sum(axis=2) - traj.n_agg) / np.maximum(1.0, traj.n_agg)
        worst_drift = max(worst_drift, float(per_vehicle.max()))
        check_conservation(traj)
        count += 1
    ok = worst_rel <= 1e-9 and worst_drift <= 1e-9
    record_acceptance(4, ok, f"{count} simulations, worst per-step error {worst_rel:.1e} x total demand, "
                             f"worst class/aggregate mismatch {worst_drift:.1e} per vehicle (both <= 1e-9); "
                             f"every other simulation in the session is checked by the simulator itself")
    assert ok


# ---------------------------------------------------------------------------
# 5 and 6. desk-scale optimisation


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    config = scenario_8region(scale=0.1, dt=5.0)
    cfg = OptimizerConfig(max_iter=ITERATIONS, early_stop=False)
    algs = ["so", "msa", "gap"]
    t0 = time.perf_counter()
    with ProcessPoolExecutor(max_workers=3) as pool:
        results = list(pool.map(_run_algorithm, algs, [config] * 3, [ITERATIONS] * 3, [cfg] * 3))
    elapsed = time.perf_counter() - t0
    out = tmp_path_factory.mktemp("desk") / "convergence.csv"
    write_convergence_csv(results[0][1], out)
    return {alg: (logs, summary, metrics) for alg, logs, summary, metrics in results}, elapsed, out, config


def test_desk_improvement(desk_runs):
    runs, elapsed, csv_path, config = desk_runs
    best = {alg: min(log.J for log in logs) for alg, (logs, _, _) in runs.items()}
    final = {alg: logs[-1].J for alg, (logs, _, _) in runs.items()}
    initial = {alg: logs[0].J for alg, (logs, _, _) in runs.items()}
    common = len({round(v, 6) for v in initial.values()}) == 1
    so = best["so"]
    rows = read_convergence_csv(csv_path)
    r5 = {alg: next(m["max_accumulation"] for m in metrics if m["region"] == "R5")
          for alg, (_, _, metrics) in runs.items()}
    a = so < initial["so"]
    b = so <= 0.95 * best["msa"]
    c = so <= best["gap"]
    ok = common and a and b and c and len(rows) <= ITERATIONS and elapsed < 300.0
    record_acceptance(5, ok,
                      f"best J: SO {so:.4g}, MSA {best['msa']:.4g}, gap {best['gap']:.4g}, initial {initial['so']:.4g}; "
                      f"SO/initial {so / initial['so']:.3f}, SO/MSA {so / best['msa']:.3f}, SO/gap {so / best['gap']:.3f}; "
                      f"last iterates MSA {final['msa']:.4g}, gap {final['gap']:.4g}; "
                      f"R5 peak SO {r5['so']:.0f}, MSA {r5['msa']:.0f} (n_j {config.mfd['R5'].n_j:.0f}); "
                      f"{elapsed:.0f} s < 300 s")
    assert ok


def test_desk_convergence(desk_runs):
    runs, _, _, _ = desk_runs
    logs = runs["so"][0]
    best = np.minimum.accumulate([log.J for log in logs])
    assert len(logs) == ITERATIONS
    change = abs(best[-6] - best[-1]) / best[-6]
    ok = change < 0.005
    record_acceptance(6, ok, f"best-so-far J changed {100 * change:.2f}% over the last 5 of {ITERATIONS} "
                             f"iterations (< 0.5%)")
    assert ok


# ---------------------------------------------------------------------------
# 7. CFL safety


def test_cfl_safety():
    config = scenario_8region(scale=1.0, dt=1.0)
    bound = cfl_timestep(config)
    net = compile_network(config)
    regions = ~net.is_buffer
    lo, over = np.inf, -np.inf
    for ctrl in (initial_assignment(net), uniform_controls(net)):
        traj = simulate_forward(net, ctrl)
        lo = min(lo, float(traj.n_agg.min()))
        over = max(over, float((traj.n_agg[:, regions] - net.jam[regions]).max()))
    too_big = config.replace(dt=2.0 * bound)
    rejected = any(f.code == "CFL" for f in validate_scenario(too_big))
    try:
        compile_network(too_big)
        raised = False
    except ScenarioError:
        raised = True
    ok = lo >= 0.0 and over <= 0.0 and rejected and raised
    record_acceptance(7, ok, f"full-scale 8-region at dt=1 s (bound {bound:.3g} s): min N {lo:.3g} >= 0, "
                             f"max N - n_j {over:.4g} <= 0; dt={2 * bound:.3g} s rejected: {rejected and raised}")
    assert ok


# ---------------------------------------------------------------------------
# 8. buffer vs queue origins


def _origin_outflow(origin_model, nu, total, window):
    net = compile_network(scenario_single_od(origin_model=origin_model, nu=nu, total=total, window=window))
    traj = simulate_forward(net, initial_assignment(net))
    out = net.e_src == net.node_index("O")
    assert traj.n_agg[:, net.node_index("R")].max() < net.knee[net.node_index("R")]
    return np.concatenate(([0.0], np.cumsum(traj.q[:, out].sum(axis=1)) * net.dt))


def test_buffer_and_queue_origins_agree():
    cases = [(4.0, 300.0, (0.0, 100.0, 400.0, 500.0)), (20.0, 900.0, (0.0, 100.0, 400.0, 500.0)),
             (50.0, 600.0, (0.0, 0.0, 600.0, 600.0))]
    details, ok = [], True
    for nu, total, window in cases:
        gap = float(np.abs(_origin_outflow("buffer", nu, total, window)
                           - _origin_outflow("homogeneous_queue", nu, total, window)).max())
        ok &= gap <= 2 * nu
        details.append(f"nu={nu:g}: {gap:.2f} <= {2 * nu:g}")
    record_acceptance(8, ok, "max cumulative origin outflow difference " + ", ".join(details))
    assert ok
