"""Reassignment baselines on the same control parameterization: MSA and a gap-based swap.

Both rely on *experienced* costs read off a simulated trajectory.  A vehicle of
class c entering node u at step k waits theta = (vehicles queued for its next
move) / (flow serving that move), then either exits (paying its schedule-delay
cost at the exit time) or continues from the successor at step k + theta/dt.
A backward pass over k gives the cost-to-go V(k, u, c); departures are costed
by V at the origin buffer and routing options by theta + V downstream.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dynamics import simulate_forward
from .network import Controls, Network, arrival_penalty, compile_network
from .objective import total_cost
from .optimizer import (IterationLog, OptimizeResult, free_flow_cost_to_go, initial_assignment)
from .projection import ControlProjector, feasibility_error
from .scenario import ScenarioConfig


@dataclass
class ExperiencedCosts:
    value: np.ndarray      # (K+1, n, C) cost-to-go of a vehicle entering u at step k
    options: np.ndarray    # (K, E, C) cost of taking edge e at step k (inf where not routable)


def _wait_times(traj, k):
    net = traj.net
    dt, t_f = net.dt, net.K * net.dt
    rate = np.asarray(traj.rate[k], dtype=float)
    free = net.knee / net.cap
    idle = np.where(rate > 0, 1.0 / np.where(rate > 0, rate, 1.0), free)
    w, q = traj.w_sum[k], traj.q[k]
    te = np.where(w > 0, np.where(q > 0, w / np.where(q > 0, q, 1.0), t_f), idle[net.e_src])
    mx, qx = traj.mx[k], traj.qx[k]
    tx = np.where(mx > 0, np.where(qx > 0, mx / np.where(qx > 0, qx, 1.0), t_f), idle[net.x_src])
    return np.clip(te, dt, t_f), np.clip(tx, dt, t_f)


def experienced_costs(traj) -> ExperiencedCosts:
    net = traj.net
    K, dt = net.K, net.dt
    pen = net.config.penalties
    ff = free_flow_cost_to_go(net)[:, net.class_dest]                  # (n, C)
    ta = net.class_ta[None, :]

    # past the horizon: wait behind the residual load (the per-vehicle share of the
    # terminal cost), then travel at free flow and pay the implied schedule delay
    drain = 0.5 * net.terminal_weight * np.asarray(traj.n_agg[K], dtype=float)

    def beyond(kf, nodes):
        t = kf[:, None] * dt + ff[nodes]
        return drain[nodes][:, None] + ff[nodes] + net.class_weight * arrival_penalty(ta, t, pen)

    V = np.zeros((K + 1, net.n, net.C))
    V[K] = beyond(np.full(net.n, float(K)), np.arange(net.n))
    options = np.full((K, net.E, net.C), np.inf)
    exits_here = np.zeros((net.n, net.C), dtype=bool)
    exits_here[net.x_src] |= net.x_mask.astype(bool)
    x_of = np.full((net.n, net.C), -1)
    for x in range(net.X):
        x_of[net.x_src[x], net.x_mask[x].astype(bool)] = x
    routable = net.route_mask
    heads = net.e_dst
    by_src = np.argsort(net.e_src, kind="stable")
    srcs, starts = np.unique(net.e_src[by_src], return_index=True)
    for k in range(K - 1, -1, -1):
        te, tx = _wait_times(traj, k)
        kf = k + te / dt
        k0 = np.floor(kf).astype(int)
        fr = (kf - k0)[:, None]
        inside = k0 + 1 <= K
        past = beyond(kf, heads)
        lo = np.where(inside[:, None], V[np.minimum(k0, K), heads], past)
        hi = np.where(inside[:, None], V[np.minimum(k0 + 1, K), heads], past)
        lo, hi = np.where(routable, lo, 0.0), np.where(routable, hi, 0.0)
        opt = np.where(routable, te[:, None] + (1 - fr) * lo + fr * hi, np.inf)
        options[k] = opt
        best = np.full((net.n, net.C), np.inf)
        best[srcs] = np.minimum.reduceat(opt[by_src], starts, axis=0)
        xi = np.where(x_of >= 0, x_of, 0)
        t_exit = tx[xi]
        exit_cost = t_exit + net.class_weight * arrival_penalty(ta, k * dt + t_exit, pen)
        v = np.where(exits_here, exit_cost, best)
        V[k] = np.where(np.isfinite(v), v, ff)
    return ExperiencedCosts(V, options)


def departure_costs(net: Network, costs: ExperiencedCosts):
    """(P, K_dep) experienced cost of departing in each slot."""
    return costs.value[: net.K_dep, net.p_node, net.p_class].T


class _BlockView:
    def __init__(self, net):
        self.groups = ControlProjector(net).groups

    def best_edge_gamma(self, options):
        """All-or-nothing splits on the cheapest option of every block and step."""
        K = options.shape[0]
        out = np.zeros_like(options)
        for width, edges, cls in self.groups:
            vals = options[:, edges, cls]                          # (K, B, w)
            pick = np.argmin(vals, axis=2)
            e = np.take_along_axis(np.broadcast_to(edges, vals.shape), pick[..., None], axis=2)[..., 0]
            kk = np.broadcast_to(np.arange(K)[:, None], e.shape)
            out[kk, e, np.broadcast_to(cls[:, 0], e.shape)] = 1.0
        return out

    def gap_shift(self, gamma, options, rho):
        """Apply ``_gap_swap`` to every routing block at every step."""
        out = gamma.copy()
        for width, edges, cls in self.groups:
            if width == 1:
                continue
            out[:, edges, cls] = _gap_swap(gamma[:, edges, cls], options[:, edges, cls], rho)
        return out


def _aon_departures(net, dcost):
    out = np.zeros((net.P, net.K_dep))
    best = np.argmin(dcost, axis=1)
    out[np.arange(net.P), best] = net.p_total / net.dt
    return out


def _gap_swap(mass, cost, rho):
    """Shift rho * (c - c_min) / c of the mass on above-average alternatives to the cheapest.

    Works on the last axis; the average is weighted by the current mass.
    """
    total = mass.sum(axis=-1, keepdims=True)
    avg = (mass * cost).sum(axis=-1, keepdims=True) / np.where(total > 0, total, 1.0)
    cmin = cost.min(axis=-1, keepdims=True)
    gap = np.where((cost > avg) & (cost > cmin), (cost - cmin) / np.where(cost > 0, cost, 1.0), 0.0)
    moved = rho * gap * mass
    out = mass - moved
    pick = np.argmin(cost, axis=-1)[..., None]
    np.put_along_axis(out, pick, np.take_along_axis(out, pick, axis=-1)
                      + moved.sum(axis=-1, keepdims=True), axis=-1)
    return out


def _run(net, algorithm, iterations, update, init=None, check=True):
    if isinstance(net, ScenarioConfig):
        net = compile_network(net)
    projector = ControlProjector(net)
    beta = projector(init if init is not None else initial_assignment(net))
    blocks = _BlockView(net)
    t0 = time.perf_counter()
    logs, best_J, best, initial_J = [], np.inf, beta, None
    for it in range(iterations):
        traj = simulate_forward(net, beta)
        cb = total_cost(traj)
        if initial_J is None:
            initial_J = cb.total
        if cb.total < best_J:
            best_J, best = cb.total, beta
        step = 1.0 / (it + 2)
        logs.append(IterationLog(algorithm, it, cb.total, cb.tts, cb.tac, cb.tc, step, float("nan"),
                                 (time.perf_counter() - t0) * 1e3, best_J))
        if it == iterations - 1:
            break
        costs = experienced_costs(traj)
        beta = update(net, beta, costs, blocks, it)
        if check:
            err = feasibility_error(net, beta)
            if err > 1e-9:
                raise RuntimeError(f"{algorithm} iterate {it + 1} infeasible (error {err:.3g})")
    return OptimizeResult(best, best_J, logs, initial_J)


def msa_baseline(net, iterations=50, init=None):
    """Method of successive averages towards all-or-nothing least-experienced-cost choices.

    beta <- beta + (aux - beta) / (tau + 2): the initial assignment counts as
    the first averaged iterate, so it is never discarded outright.
    """
    def update(net, beta, costs, blocks, it):
        aux = Controls(blocks.best_edge_gamma(costs.options),
                       _aon_departures(net, departure_costs(net, costs)))
        w = 1.0 / (it + 2)
        return Controls((1 - w) * beta.gamma + w * aux.gamma,
                        (1 - w) * beta.departures + w * aux.departures)
    return _run(net, "msa", iterations, update, init)


def gap_baseline(net, iterations=50, init=None, rho=0.5):
    """Swap mass from costlier alternatives to the cheapest, proportionally to the relative gap."""
    def update(net, beta, costs, blocks, it):
        g = blocks.gap_shift(beta.gamma, costs.options, rho)
        d = _gap_swap(beta.departures, departure_costs(net, costs), rho)
        return ControlProjector(net)(Controls(g, d))
    return _run(net, "gap", iterations, update, init)
