"""Projected-gradient DSO loop and its supporting pieces."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import networkx as nx
import numpy as np

from .adjoint import backward_sweep
from .dynamics import simulate_forward
from .network import Controls, Network, compile_network
from .objective import total_cost
from .projection import ControlProjector, feasibility_error
from .scenario import ScenarioConfig, ScenarioError

LOG_FIELDS = ("algorithm", "iteration", "J", "TTS", "TAC", "TC", "step_size", "grad_norm",
              "wall_ms", "best_J")


@dataclass
class IterationLog:
    algorithm: str
    iteration: int
    J: float
    TTS: float
    TAC: float
    TC: float
    step_size: float
    grad_norm: float
    wall_ms: float
    best_J: float

    def row(self):
        return [getattr(self, f) for f in LOG_FIELDS]


@dataclass
class OptimizerConfig:
    max_iter: int = 50
    alpha0: float | None = None       # None: backtracking probe at the first iteration
    probe_halvings: int = 30
    probe_doublings: int = 12
    gamma_move: float = 0.5           # largest split change of a unit-scaled step
    departure_move: float = 50.0      # largest rate change, relative to the mean budget rate
    stop_rel: float = 0.005
    stop_window: int = 5
    early_stop: bool = True
    check_feasibility: bool = True
    seed: int = 0
    departure_spread: float = 600.0   # half-width of the initial departure window (s)

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.alpha0 is not None and self.alpha0 <= 0:
            raise ValueError("alpha0 must be positive")


@dataclass
class OptimizeResult:
    controls: Controls
    J: float
    logs: list
    initial_J: float
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def best_history(self):
        return np.array([log.best_J for log in self.logs])


# ---------------------------------------------------------------------------
# Initial assignment


def free_flow_times(net: Network):
    """theta_i = 1 / (dDelta_i/dN at 0): n_c / Q_max (nu / Q_Ox for buffers)."""
    return net.knee / net.cap


def free_flow_cost_to_go(net: Network, theta=None):
    """(n, D) shortest free-flow time from each node to leaving at each destination."""
    theta = free_flow_times(net) if theta is None else theta
    g = nx.DiGraph()
    for e in range(net.E):
        g.add_edge(int(net.e_dst[e]), int(net.e_src[e]), weight=float(theta[net.e_src[e]]))
    for x in range(net.X):
        g.add_edge(("dest", int(net.x_dest[x])), int(net.x_src[x]), weight=float(theta[net.x_src[x]]))
    out = np.full((net.n, len(net.destinations)), np.inf)
    for d in range(len(net.destinations)):
        src = ("dest", d)
        if src not in g:
            continue
        dist = nx.single_source_dijkstra_path_length(g, src, weight="weight")
        for u, v in dist.items():
            if not isinstance(u, tuple):
                out[u, d] = v
    return out


def shortest_path_splits(net: Network, cost_to_go):
    """All-or-nothing (E, C) splits towards the successor with the least cost-to-go."""
    g = np.zeros((net.E, net.C))
    for u in range(net.n):
        out_edges = np.flatnonzero(net.e_src == u)
        for c in range(net.C):
            idx = out_edges[net.route_mask[out_edges, c]]
            if idx.size:
                best = idx[np.argmin(cost_to_go[net.e_dst[idx], net.class_dest[c]])]
                g[best, c] = 1.0
    return g


def window_profile(net: Network, total, center, half_width):
    """Uniform rate over [center - w, center + w] clipped to [0, T), as cell averages."""
    edges = np.arange(net.K_dep + 1) * net.dt
    horizon = net.K_dep * net.dt
    lo, hi = center - half_width, center + half_width
    lo, hi = min(max(lo, 0.0), horizon), min(max(hi, 0.0), horizon)
    if hi - lo < net.dt:
        # window squeezed against a boundary: keep one step's worth inside [0, T)
        lo = min(max(lo, 0.0), horizon - net.dt)
        hi = lo + net.dt
    cover = np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None)
    return total * cover / (cover.sum() * net.dt)


def initial_assignment(net, half_width=600.0):
    """Free-flow shortest-path splits; departures centred on t_a minus the path time."""
    if isinstance(net, ScenarioConfig):
        net = compile_network(net)
    ctg = free_flow_cost_to_go(net)
    for p in range(net.P):
        if not np.isfinite(ctg[net.p_node[p], net.class_dest[net.p_class[p]]]):
            raise ScenarioError(f"no path from {net.nodes[net.p_node[p]]}")
    g = shortest_path_splits(net, ctg)
    gamma = np.broadcast_to(g, (net.K, net.E, net.C)).copy()
    dep = np.zeros((net.P, net.K_dep))
    for p in range(net.P):
        c = net.p_class[p]
        tt = ctg[net.p_node[p], net.class_dest[c]]
        dep[p] = window_profile(net, net.p_total[p], net.class_ta[c] - tt, half_width)
    return Controls(gamma, dep)


# ---------------------------------------------------------------------------
# Steps


def step_size(tau, alpha0=1.0):
    """Divergent-series rule alpha0 / (1 + tau)."""
    if tau < 0:
        raise ValueError("iteration index must be >= 0")
    return alpha0 / (1.0 + tau)


def projected_gradient_iterate(controls: Controls, grad: Controls, alpha, projector, scale=(1.0, 1.0)):
    """P[beta - alpha * S grad] with S the diagonal block scaling (gamma, departures)."""
    moved = Controls(controls.gamma - alpha * scale[0] * grad.gamma,
                     controls.departures - alpha * scale[1] * grad.departures)
    return projector(moved)


def gradient_scales(net: Network, grad: Controls, cfg: OptimizerConfig):
    """Per-block scale so a unit step moves each block by a bounded amount."""
    gmax = float(np.abs(grad.gamma).max(initial=0.0))
    dmax = float(np.abs(grad.departures).max(initial=0.0))
    peak = float((net.p_total / (net.K_dep * net.dt)).max(initial=0.0))
    s_g = cfg.gamma_move / gmax if gmax > 0 else 0.0
    s_d = cfg.departure_move * peak / dmax if dmax > 0 else 0.0
    return s_g, s_d


def stationarity_residual(controls, grad, alpha, projector, scale=(1.0, 1.0)):
    nxt = projected_gradient_iterate(controls, grad, alpha, projector, scale)
    diff = np.concatenate([(nxt.gamma - controls.gamma).ravel(),
                           (nxt.departures - controls.departures).ravel()])
    return float(np.linalg.norm(diff))


def _log(algorithm, it, cb, alpha, gnorm, t0, best):
    return IterationLog(algorithm, it, cb.total, cb.tts, cb.tac, cb.tc, alpha, gnorm,
                        (time.perf_counter() - t0) * 1e3, best)


def converged(history, window, rel):
    """Relative change of best-so-far J over the last ``window`` iterations below ``rel``."""
    if len(history) <= window:
        return False
    old, new = history[-window - 1], history[-1]
    return abs(old - new) <= rel * abs(old)


def optimize(net, cfg: OptimizerConfig | None = None, init: Controls | None = None, callback=None):
    """Forward, adjoint, projected step; keeps the best control seen."""
    cfg = cfg or OptimizerConfig()
    if isinstance(net, ScenarioConfig):
        net = compile_network(net)
    projector = ControlProjector(net)
    beta = projector(init if init is not None else initial_assignment(net, cfg.departure_spread))
    t0 = time.perf_counter()
    traj = simulate_forward(net, beta)
    cb = total_cost(traj)
    J = cb.total
    best_J, best = J, beta
    logs = [_log("so", 0, cb, 0.0, 0.0, t0, best_J)]
    history = [best_J]
    initial_J = J
    alpha0 = cfg.alpha0
    scale = None
    stopped = False
    for tau in range(cfg.max_iter - 1):
        grad = backward_sweep(traj, keep_adjoint=False).controls
        gnorm = float(np.sqrt(grad.dot(grad)))
        if scale is None:
            scale = gradient_scales(net, grad, cfg)
        if alpha0 is None:
            alpha0, cand, traj_c = _probe(net, beta, grad, J, projector, scale, cfg)
        else:
            cand = projected_gradient_iterate(beta, grad, step_size(tau, alpha0), projector, scale)
            traj_c = simulate_forward(net, cand)
        alpha = step_size(tau, alpha0)
        if cfg.check_feasibility:
            err = feasibility_error(net, cand)
            if err > 1e-9:
                raise RuntimeError(f"iterate {tau + 1} left the feasible set (error {err:.3g})")
        beta, traj = cand, traj_c
        cb = total_cost(traj)
        J = cb.total
        if J < best_J:
            best_J, best = J, beta
        history.append(best_J)
        logs.append(_log("so", tau + 1, cb, alpha, gnorm, t0, best_J))
        if callback:
            callback(logs[-1])
        if cfg.early_stop and converged(history, cfg.stop_window, cfg.stop_rel):
            stopped = True
            break
    return OptimizeResult(best, best_J, logs, initial_J, stopped,
                          {"alpha0": alpha0, "scale": scale})


def _probe(net, beta, grad, J, projector, scale, cfg):
    """Pick alpha0 for the first step: double from 1 while J keeps falling, else halve."""
    def trial(a):
        cand = projected_gradient_iterate(beta, grad, a, projector, scale)
        traj = simulate_forward(net, cand)
        return total_cost(traj).total, cand, traj

    alpha = 1.0
    best = trial(alpha)
    if best[0] < J:
        for _ in range(cfg.probe_doublings):
            nxt = trial(2.0 * alpha)
            if nxt[0] >= best[0]:
                break
            alpha, best = 2.0 * alpha, nxt
        return alpha, best[1], best[2]
    for _ in range(cfg.probe_halvings):
        alpha *= 0.5
        best = trial(alpha)
        if best[0] < J:
            break
    return alpha, best[1], best[2]


# ---------------------------------------------------------------------------
# Time-step refinement


def refine_timestep(config: ScenarioConfig, controls: Controls):
    """Halve dt; each coarse value is copied into both fine steps (rates preserved)."""
    fine = replace(config, dt=config.dt / 2.0)
    net = compile_network(fine)
    gamma = np.repeat(controls.gamma, 2, axis=0)[: net.K]
    dep = np.repeat(controls.departures, 2, axis=1)
    out = np.zeros((dep.shape[0], net.K_dep))
    m = min(net.K_dep, dep.shape[1])
    out[:, :m] = dep[:, :m]
    return fine, Controls(gamma, out)


def write_convergence_csv(logs, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOG_FIELDS)
        for log in logs:
            wr.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in log.row()])


def read_convergence_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [IterationLog(r["algorithm"], int(r["iteration"]), *(float(r[f]) for f in LOG_FIELDS[2:]))
            for r in rows]
