"""Index-array form of a scenario used by the simulator, adjoint and optimizer.

State nodes are the regions followed by the origin buffers; destinations are
sinks and carry no state.  A *class* is a (destination, desired arrival time)
pair.  Three edge families exist:

* transfer edges ``e`` between state nodes (buffer->region, region->region),
* exits ``x`` from a region into a destination,
* departures ``p``: one per demand entry, injecting into its origin buffer.

Routing splits are defined on (transfer edge, class) pairs whose head can still
reach the class destination.  A class sitting in a region with an exit towards
its destination leaves the network there (its split into the destination is 1).
"""
from __future__ import annotations

from dataclasses import dataclass

import networkx as nx
import numpy as np

from .scenario import ScenarioConfig, ScenarioError, ensure_valid


def arrival_penalty(t_a, t, penalties):
    """Schedule-delay cost per vehicle arriving at ``t`` for desired arrival ``t_a``."""
    w = penalties.plateau
    early = np.maximum(0.0, np.asarray(t_a, dtype=float) - w - t)
    late = np.maximum(0.0, np.asarray(t, dtype=float) - np.asarray(t_a, dtype=float) - w)
    return penalties.early_rate * early + penalties.late_rate * late


@dataclass
class Network:
    config: ScenarioConfig
    nodes: list            # state node ids, regions first then buffers
    n_regions: int
    destinations: list
    classes: list          # (destination id, t_a)
    class_dest: np.ndarray
    class_ta: np.ndarray
    # node parameters (buffers use n_c := nu, n_j := inf)
    knee: np.ndarray
    jam: np.ndarray
    cap: np.ndarray
    # transfer edges
    e_src: np.ndarray
    e_dst: np.ndarray
    beta: np.ndarray
    pair_max: np.ndarray
    route_mask: np.ndarray   # (E, C) bool
    # exits
    x_src: np.ndarray
    x_dest: np.ndarray
    x_supply: np.ndarray
    x_mask: np.ndarray       # (X, C) float 0/1
    # departures
    p_node: np.ndarray
    p_class: np.ndarray
    p_total: np.ndarray
    # incidence
    a_in: np.ndarray         # (n, E)
    a_out: np.ndarray        # (n, E)
    x_out: np.ndarray        # (n, X)
    # costs
    tts_weight: np.ndarray
    terminal_weight: np.ndarray
    class_weight: np.ndarray
    arrival_cost: np.ndarray  # (K, C): penalty at exit time k*dt
    n0_cls: np.ndarray        # (n, C)
    dt: float
    K: int
    K_dep: int
    kkt: bool
    queue_origins: bool

    @property
    def n(self):
        return len(self.nodes)

    @property
    def E(self):
        return self.e_src.size

    @property
    def X(self):
        return self.x_src.size

    @property
    def C(self):
        return len(self.classes)

    @property
    def P(self):
        return self.p_node.size

    @property
    def is_buffer(self):
        return np.arange(self.n) >= self.n_regions

    @property
    def total_demand(self):
        return float(self.p_total.sum() + self.n0_cls.sum())

    def node_index(self, node_id):
        return self.nodes.index(node_id)

    def demand_slope(self):
        return self.cap / self.knee

    def supply_slope(self):
        out = np.zeros(self.n)
        reg = ~self.is_buffer
        out[reg] = self.cap[reg] / (self.jam[reg] - self.knee[reg])
        return out

    def route_blocks(self):
        """Routing simplex blocks as a list of (node, class, edge indices)."""
        blocks = []
        for u in range(self.n):
            out_edges = np.flatnonzero(self.e_src == u)
            for c in range(self.C):
                idx = out_edges[self.route_mask[out_edges, c]]
                if idx.size:
                    blocks.append((u, c, idx))
        return blocks

    def graph(self):
        """Directed graph on state nodes and destinations (destinations prefixed 'dest:')."""
        g = nx.DiGraph()
        g.add_nodes_from(range(self.n))
        for e in range(self.E):
            g.add_edge(int(self.e_src[e]), int(self.e_dst[e]), kind="edge", index=e)
        for x in range(self.X):
            g.add_edge(int(self.x_src[x]), ("dest", int(self.x_dest[x])), kind="exit", index=x)
        return g


def compile_network(config: ScenarioConfig, validate=True) -> Network:
    if validate:
        ensure_valid(config)
    regions = list(config.regions)
    buffers = list(config.buffers)
    nodes = regions + buffers
    node_ix = {v: i for i, v in enumerate(nodes)}
    dests = list(config.destinations)
    dest_ix = {d: i for i, d in enumerate(dests)}
    n = len(nodes)
    n_reg = len(regions)

    knee = np.empty(n)
    jam = np.empty(n)
    cap = np.empty(n)
    for i, r in enumerate(regions):
        c = config.mfd[r]
        knee[i], jam[i], cap[i] = c.n_c, c.n_j, c.q_max
    for j, b in enumerate(buffers):
        buf = config.buffers[b]
        knee[n_reg + j], jam[n_reg + j], cap[n_reg + j] = buf.nu, np.inf, buf.q_max

    transfer = [e for e in config.edges if e.dst not in dest_ix]
    exits = [e for e in config.edges if e.dst in dest_ix]

    keys = set()
    for ent in config.demand.entries:
        if ent.total > 0:
            keys.add((ent.destination, ent.t_a))
    for load in config.initial_state:
        if load.vehicles > 0:
            keys.add((load.destination, load.t_a))
    classes = sorted(keys, key=lambda k: (dest_ix[k[0]], k[1]))
    class_ix = {k: i for i, k in enumerate(classes)}
    C = len(classes)
    class_dest = np.array([dest_ix[d] for d, _ in classes], dtype=int)
    class_ta = np.array([t for _, t in classes], dtype=float)

    e_src = np.array([node_ix[e.src] for e in transfer], dtype=int)
    e_dst = np.array([node_ix[e.dst] for e in transfer], dtype=int)
    beta = np.array([config.beta(e) for e in transfer], dtype=float)
    pair_max = np.array([config.q_x(e) for e in transfer], dtype=float)
    x_src = np.array([node_ix[e.src] for e in exits], dtype=int)
    x_dest = np.array([dest_ix[e.dst] for e in exits], dtype=int)
    x_supply = np.array([np.inf if e.exit_supply is None else e.exit_supply for e in exits], dtype=float)
    E, X = e_src.size, x_src.size
    x_mask = (x_dest[:, None] == class_dest[None, :]).astype(float)

    # which nodes reach which destination, and which nodes exit it directly
    g = nx.DiGraph()
    g.add_nodes_from(range(n))
    g.add_edges_from(zip(e_src.tolist(), e_dst.tolist()))
    exits_from = {d: set(x_src[x_dest == d].tolist()) for d in range(len(dests))}
    reaches = {}
    for d in range(len(dests)):
        r = set(exits_from[d])
        for u in list(exits_from[d]):
            r |= nx.ancestors(g, u)
        reaches[d] = r
    route_mask = np.zeros((E, C), dtype=bool)
    for e in range(E):
        for c in range(C):
            d = class_dest[c]
            route_mask[e, c] = (e_dst[e] in reaches[d]) and (e_src[e] not in exits_from[d])

    p_node = np.array([node_ix[ent.origin] for ent in config.demand.entries], dtype=int)
    p_class = np.array([class_ix.get((ent.destination, ent.t_a), -1) for ent in config.demand.entries],
                       dtype=int)
    p_total = np.array([ent.total for ent in config.demand.entries], dtype=float)
    keep = p_class >= 0
    p_node, p_class, p_total = p_node[keep], p_class[keep], p_total[keep]

    a_in = np.zeros((n, E))
    a_out = np.zeros((n, E))
    a_in[e_dst, np.arange(E)] = 1.0
    a_out[e_src, np.arange(E)] = 1.0
    x_out = np.zeros((n, X))
    x_out[x_src, np.arange(X)] = 1.0

    pen = config.penalties
    tts_weight = np.array([pen.tts_weight(v) for v in nodes])
    terminal_weight = np.array([pen.terminal_weight(v) for v in nodes])
    class_weight = np.array([pen.arrival_weight(d) for d, _ in classes])
    dt = float(config.dt)
    K = config.n_steps
    t = np.arange(K) * dt
    arrival_cost = arrival_penalty(class_ta[None, :], t[:, None], pen) if C else np.zeros((K, 0))

    n0 = np.zeros((n, C))
    for load in config.initial_state:
        if load.vehicles <= 0:
            continue
        u = node_ix[load.node]
        c = class_ix[(load.destination, load.t_a)]
        d = class_dest[c]
        if u not in reaches[d]:
            raise ScenarioError(f"initial load in {load.node} cannot reach {load.destination}")
        n0[u, c] += load.vehicles

    for p in range(p_node.size):
        if p_node[p] not in reaches[class_dest[p_class[p]]]:
            raise ScenarioError(f"origin {nodes[p_node[p]]} cannot reach {classes[p_class[p]][0]}")

    return Network(
        config=config, nodes=nodes, n_regions=n_reg, destinations=dests, classes=classes,
        class_dest=class_dest, class_ta=class_ta, knee=knee, jam=jam, cap=cap,
        e_src=e_src, e_dst=e_dst, beta=beta, pair_max=pair_max, route_mask=route_mask,
        x_src=x_src, x_dest=x_dest, x_supply=x_supply, x_mask=x_mask,
        p_node=p_node, p_class=p_class, p_total=p_total,
        a_in=a_in, a_out=a_out, x_out=x_out,
        tts_weight=tts_weight, terminal_weight=terminal_weight, class_weight=class_weight,
        arrival_cost=arrival_cost, n0_cls=n0, dt=dt, K=K, K_dep=config.n_departure_steps,
        kkt=config.flow_model == "kkt_optimization",
        queue_origins=config.origin_model == "homogeneous_queue",
    )


@dataclass
class Controls:
    """Decision vector: routing splits (K, E, C) and departure rates (P, K_dep)."""

    gamma: np.ndarray
    departures: np.ndarray

    def copy(self):
        return Controls(self.gamma.copy(), self.departures.copy())

    def flat(self):
        return np.concatenate([self.gamma.ravel(), self.departures.ravel()])

    @classmethod
    def from_flat(cls, v, like):
        ng = like.gamma.size
        return cls(v[:ng].reshape(like.gamma.shape).copy(), v[ng:].reshape(like.departures.shape).copy())

    def __add__(self, other):
        return Controls(self.gamma + other.gamma, self.departures + other.departures)

    def scaled(self, a_gamma, a_dep=None):
        a_dep = a_gamma if a_dep is None else a_dep
        return Controls(self.gamma * a_gamma, self.departures * a_dep)

    def dot(self, other):
        return float(np.vdot(self.gamma, other.gamma) + np.vdot(self.departures, other.departures))


def zero_controls(net: Network):
    return Controls(np.zeros((net.K, net.E, net.C)), np.zeros((net.P, net.K_dep)))


def uniform_controls(net: Network):
    """Equal splits over every routing block and departures spread evenly over [0, T)."""
    counts = net.route_mask.astype(float)
    per_block = np.zeros((net.n, net.C))
    np.add.at(per_block, net.e_src, counts)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(net.route_mask, 1.0 / per_block[net.e_src], 0.0)
    gamma = np.broadcast_to(g, (net.K, net.E, net.C)).copy()
    dep = np.repeat((net.p_total / (net.K_dep * net.dt))[:, None], net.K_dep, axis=1)
    return Controls(gamma, dep)


def profile_departures(net: Network):
    """Departure rates taken from the scenario's declared inflow profiles."""
    out = np.zeros((net.P, net.K_dep))
    ents = [e for e in net.config.demand.entries]
    keep = [e for e in ents if (e.destination, e.t_a) in set(net.classes)]
    for p, ent in enumerate(keep):
        out[p] = ent.profile.cell_rates(net.dt, net.K_dep)
    return out
