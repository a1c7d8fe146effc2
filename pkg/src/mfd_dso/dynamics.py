"""Forward simulation of disaggregated MFD accumulations.

The state at step k is the aggregate accumulation per node ``n_agg`` (n,) and
the per-class accumulation ``n_cls`` (n, C).  Both are advanced by explicit
Euler; the aggregate drives the MFD curves and the class values drive the
partial demands and the class split of every flow.  Regime flags are recorded
for every min/max and curve piece so the adjoint can reuse them verbatim.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .network import Controls, Network, compile_network
from .scenario import ScenarioConfig, cfl_timestep  # noqa: F401  (re-exported)

NEG_TOL = 1e-9


class SimulationFault(RuntimeError):
    """Negative accumulation (CFL violation) or a broken conservation identity."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


# ---------------------------------------------------------------------------
# Elementary flow operations (vectorised over leading axes)


def _safe_div(num, den):
    den = np.asarray(den)
    out = np.zeros(np.broadcast(num, den).shape, dtype=np.result_type(num, den, float))
    np.divide(num, den, out=out, where=den != 0)
    return out


def partial_demands(region_demand, n_total, gamma, n_cls):
    """Demand of a region towards one successor: D(N) * sum_c gamma_c N_c / N.

    ``gamma`` and ``n_cls`` share a trailing class axis; an empty region sends 0.
    """
    w = np.sum(np.asarray(gamma) * np.asarray(n_cls), axis=-1)
    return _safe_div(np.asarray(region_demand) * w, n_total)


def strada_flows(delta, supply, beta):
    """Fixed-share flows q = min(beta * sigma, delta); flag 1 where supply binds (ties included)."""
    share = np.asarray(beta) * np.asarray(supply)
    delta = np.asarray(delta)
    s = share <= delta
    return np.where(s, share, delta), s


@dataclass
class MergeResult:
    q: np.ndarray
    zeta: float
    interior: np.ndarray   # inflows set by the multiplier, not clamped at their demand
    supply_bound: bool


def kkt_merge_flows(delta, q_x, sigma):
    """Exact merge of several inflows into one region.

    q_l = clip(q_x,l * (1 - zeta), 0, delta_l) with sum_l q_l = min(sigma, sum delta).
    The breakpoints of the piecewise-linear total are the cut values
    1 - delta_l / q_x,l; after sorting them the root is found by interpolation.
    """
    delta = np.asarray(delta, dtype=float)
    q_x = np.asarray(q_x, dtype=float)
    m = delta.size
    if m == 0:
        return MergeResult(np.zeros(0), 1.0, np.zeros(0, dtype=bool), False)
    total = delta.sum()
    if total <= 0.0:
        return MergeResult(np.zeros(m), 1.0, np.zeros(m, dtype=bool), sigma <= 0.0)
    cut = 1.0 - delta / q_x
    if sigma > total:
        return MergeResult(delta.copy(), float(cut.min()), np.zeros(m, dtype=bool), False)
    order = np.argsort(cut, kind="stable")
    cs, ds, xs = cut[order], delta[order], q_x[order]
    suffix = np.cumsum(ds[::-1])[::-1]
    prefix = np.concatenate(([0.0], np.cumsum(xs)[:-1]))
    xi = suffix + (1.0 - cs) * prefix
    i = int(np.flatnonzero(xi >= sigma)[-1])
    base = suffix[i + 1] if i + 1 < m else 0.0
    q_a = xs[: i + 1].sum()
    one_minus = max((sigma - base) / q_a, 0.0)
    zeta = 1.0 - one_minus
    q = np.clip(q_x * one_minus, 0.0, delta)
    interior = np.zeros(m, dtype=bool)
    interior[order[: i + 1]] = True
    interior &= delta > 0
    return MergeResult(q, float(zeta), interior, True)


def disaggregate_flows(q, gamma, n_cls):
    """Split aggregate flows over classes in proportion to gamma_c * N_c."""
    w = np.asarray(gamma) * np.asarray(n_cls)
    big_w = w.sum(axis=-1)
    if np.any((np.asarray(q) > 0) & (big_w <= 0)):
        raise SimulationFault("positive flow out of a node with no routable vehicles")
    return _safe_div(np.asarray(q)[..., None] * w, big_w[..., None])


def exit_flows(region_demand, n_total, n_cls, dest_mask, exit_supply=np.inf):
    """Flows leaving regions into their adjacent destinations.

    Returns (q_x, per-class q_x, supply flag).  Demand towards the exit is
    D(N) * M / N with M the vehicles in the region bound for that destination.
    """
    m = np.sum(np.asarray(n_cls) * dest_mask, axis=-1)
    delta = _safe_div(np.asarray(region_demand) * m, n_total)
    supply = np.broadcast_to(np.asarray(exit_supply, dtype=float), delta.shape)
    s = supply <= delta
    q = np.where(s, supply, delta)
    qc = _safe_div(q[..., None] * np.asarray(n_cls) * dest_mask, m[..., None])
    return q, qc, s


def alt_origin_step(n_cls, inflow, gamma, supply_share, dt):
    """Queue-type origin: everything queued or arriving this step may leave now.

    ``n_cls`` (C,) queue content, ``inflow`` (C,) departure rates, ``gamma``
    (E_out, C) splits, ``supply_share`` (E_out,) downstream supply available to
    each outgoing edge.  Returns (next queue content, q (E_out,), class flows).
    """
    mass = np.asarray(n_cls, dtype=float) + dt * np.asarray(inflow, dtype=float)
    delta = (np.asarray(gamma) * mass).sum(axis=-1) / dt
    q = np.minimum(delta, supply_share)
    qc = disaggregate_flows(q, gamma, mass)
    nxt = mass - dt * qc.sum(axis=0)
    return np.maximum(nxt, 0.0), q, qc


# ---------------------------------------------------------------------------
# Curves on the compiled node arrays


def node_demand(net: Network, n_agg):
    return net.cap * np.minimum(n_agg / net.knee, 1.0)


def node_supply(net: Network, n_agg):
    with np.errstate(invalid="ignore"):
        frac = np.clip((net.jam - n_agg) / (net.jam - net.knee), 0.0, 1.0)
    return net.cap * np.where(np.isfinite(net.jam), frac, 1.0)


# ---------------------------------------------------------------------------
# Trajectories


@dataclass
class Trajectory:
    net: Network
    controls: Controls
    n_agg: np.ndarray      # (K+1, n)
    n_cls: np.ndarray      # (K+1, n, C)
    q: np.ndarray          # (K, E)
    w_sum: np.ndarray      # (K, E) sum_c gamma N_c of the edge source
    delta: np.ndarray      # (K, E)
    s: np.ndarray          # (K, E) STRADA: supply binds; KKT: inflow set by the multiplier
    qx: np.ndarray         # (K, X)
    mx: np.ndarray         # (K, X)
    sx: np.ndarray         # (K, X)
    rate: np.ndarray       # (K, n) D(N)/N, or 1/dt for queue origins
    sigma: np.ndarray      # (K, n)
    saturated: np.ndarray  # (K, n) N >= knee
    supply_piece: np.ndarray  # (K, n) 0 flat, 1 decaying, 2 jammed
    merge_bound: np.ndarray   # (K, n) KKT merge supply-bound
    injections: np.ndarray    # (K, P)
    zeta: np.ndarray | None = None
    departed: np.ndarray = field(default=None)   # cumulative, (K+1,)
    arrived: np.ndarray = field(default=None)    # cumulative, (K+1,)

    @property
    def K(self):
        return self.net.K

    def class_edge_flows(self, k):
        gam = self.controls.gamma[k]
        mass = self.mass(k)
        return _safe_div(self.q[k][:, None] * gam * mass[self.net.e_src], self.w_sum[k][:, None])

    def class_exit_flows(self, k):
        net = self.net
        return _safe_div(self.qx[k][:, None] * self.n_cls[k][net.x_src] * net.x_mask, self.mx[k][:, None])

    def mass(self, k):
        """Class content that generates demand at step k (queue origins add this step's inflow)."""
        net = self.net
        if not net.queue_origins:
            return self.n_cls[k]
        m = self.n_cls[k].copy()
        np.add.at(m, (net.p_node, net.p_class), net.dt * self.injections[k])
        return m

    def signature(self):
        """Every discrete regime decision, for detecting nonsmooth perturbations."""
        return np.concatenate([
            self.s.ravel(), self.sx.ravel(), self.saturated.ravel(), self.supply_piece.ravel(),
            self.merge_bound.ravel(),
        ]).astype(np.int8)


def _padded_departures(net, controls):
    inj = np.zeros((net.K, net.P))
    kd = min(net.K_dep, net.K)
    inj[:kd] = controls.departures[:, :kd].T
    return inj


def simulate_forward(net, controls: Controls, check=True, dtype=float):
    """Run the explicit-Euler dynamics over k = 0..K.

    ``net`` may be a Network or a ScenarioConfig.  ``dtype`` selects the float
    type (``np.longdouble`` gives the finite-difference oracle extra digits).
    With ``check=False`` negative accumulations are neither rejected nor
    clamped, so off-simplex perturbations keep the map smooth.
    """
    if isinstance(net, ScenarioConfig):
        net = compile_network(net)
    K, n, C, E, X, P = net.K, net.n, net.C, net.E, net.X, net.P
    dt = dtype(net.dt)
    knee, jam, cap = (a.astype(dtype) for a in (net.knee, net.jam, net.cap))
    reg = ~net.is_buffer
    jam_r, knee_r, cap_r = jam[reg], knee[reg], cap[reg]
    beta = net.beta.astype(dtype)
    pair_max = net.pair_max.astype(dtype)
    x_supply = net.x_supply.astype(dtype)
    x_mask = net.x_mask.astype(dtype)
    a_in, a_out, x_out = (a.astype(dtype) for a in (net.a_in, net.a_out, net.x_out))
    flow_in = a_in - a_out
    e_src, e_dst, x_src = net.e_src, net.e_dst, net.x_src
    gamma = controls.gamma.astype(dtype, copy=False)
    inj = _padded_departures(net, controls).astype(dtype)
    buf = net.is_buffer
    queue = net.queue_origins
    kkt_groups = [np.flatnonzero(e_dst == v) for v in range(n)] if net.kkt else None

    n_agg = np.zeros((K + 1, n), dtype=dtype)
    n_cls = np.zeros((K + 1, n, C), dtype=dtype)
    n_cls[0] = net.n0_cls
    n_agg[0] = n_cls[0].sum(axis=1)
    rec = {k: np.zeros((K, m), dtype=dtype) for k, m in
           (("q", E), ("w", E), ("delta", E), ("qx", X), ("mx", X), ("rate", n), ("sigma", n))}
    s_all = np.zeros((K, E), dtype=bool)
    sx_all = np.zeros((K, X), dtype=bool)
    sat_all = np.zeros((K, n), dtype=bool)
    piece_all = np.zeros((K, n), dtype=np.int8)
    mbound = np.zeros((K, n), dtype=bool)
    zeta = np.ones((K, n)) if net.kkt else None
    p_node, p_class = net.p_node, net.p_class
    inv_dt = 1.0 / dt
    zero = dtype(0)

    for k in range(K):
        na = n_agg[k]
        nc = n_cls[k]
        inj_c = np.zeros((n, C), dtype=dtype)
        inj_c[p_node, p_class] = inj[k]
        if queue:
            mass = nc + dt * inj_c
        else:
            mass = nc
        sat = na >= knee
        # D(N)/N is flat below the knee, so an empty node keeps the limit Q/n_c
        rate = np.where(sat, cap / np.where(sat, na, 1), cap / knee)
        if queue:
            rate = np.where(buf, inv_dt, rate)
            sat = sat & ~buf
        sig = np.full(n, np.inf, dtype=dtype)
        nr = na[reg]
        piece = np.where(nr <= knee_r, 0, np.where(nr < jam_r, 1, 2)).astype(np.int8)
        sig[reg] = np.where(piece == 0, cap_r,
                            np.where(piece == 1, cap_r * (jam_r - nr) / (jam_r - knee_r), zero))
        # exits
        mx_cls = mass[x_src] * x_mask
        mx = mx_cls.sum(axis=1)
        dx = rate[x_src] * mx
        sx = x_supply <= dx
        qx = np.where(sx, x_supply, dx)
        qxc = np.zeros((X, C), dtype=dtype)
        # dividing wherever the mass is nonzero keeps off-simplex perturbations smooth
        np.divide(qx[:, None] * mx_cls, mx[:, None], out=qxc, where=mx[:, None] != 0)
        # transfers
        wc = gamma[k] * mass[e_src]
        w = wc.sum(axis=1)
        de = rate[e_src] * w
        if kkt_groups is None:
            share = beta * sig[e_dst]
            s = share <= de
            q = np.where(s, share, de)
        else:
            q = np.zeros(E, dtype=dtype)
            s = np.zeros(E, dtype=bool)
            for v, grp in enumerate(kkt_groups):
                if grp.size == 0:
                    continue
                res = kkt_merge_flows(de[grp], pair_max[grp], sig[v])
                q[grp] = res.q
                s[grp] = res.interior
                mbound[k, v] = res.supply_bound
                zeta[k, v] = res.zeta
        qc = np.zeros((E, C), dtype=dtype)
        np.divide(q[:, None] * wc, w[:, None], out=qc, where=w[:, None] != 0)
        n_cls[k + 1] = nc + dt * (flow_in @ qc - x_out @ qxc + inj_c)
        n_agg[k + 1] = na + dt * (flow_in @ q - x_out @ qx + inj_c.sum(axis=1))

        nxt = n_cls[k + 1]
        if check and (nxt.min(initial=0) < 0 or n_agg[k + 1].min(initial=0) < 0):
            worst = min(nxt.min(initial=0), n_agg[k + 1].min(initial=0))
            if worst < -NEG_TOL * max(1.0, float(np.abs(nxt).max(initial=0))):
                bad = int(np.argmin(n_agg[k + 1]))
                raise SimulationFault(
                    f"negative accumulation {float(worst):.3g} in {net.nodes[bad]}; dt={net.dt} "
                    f"may violate the CFL bound", step=k)
            np.maximum(nxt, 0, out=nxt)
            np.maximum(n_agg[k + 1], 0, out=n_agg[k + 1])

        rec["q"][k], rec["w"][k], rec["delta"][k] = q, w, de
        rec["qx"][k], rec["mx"][k], rec["rate"][k], rec["sigma"][k] = qx, mx, rate, sig
        s_all[k], sx_all[k], sat_all[k] = s, sx, sat
        piece_all[k, reg] = piece

    departed = np.concatenate(([0.0], np.cumsum(inj.sum(axis=1)) * dt))
    arrived = np.concatenate(([0.0], np.cumsum(rec["qx"].sum(axis=1)) * dt))
    traj = Trajectory(net, controls, n_agg, n_cls, rec["q"], rec["w"], rec["delta"], s_all,
                      rec["qx"], rec["mx"], sx_all, rec["rate"], rec["sigma"], sat_all, piece_all,
                      mbound, inj, zeta, departed, arrived)
    if check:
        check_conservation(traj)
    return traj


def check_conservation(traj: Trajectory, rtol=1e-9):
    """Raise SimulationFault if vehicles are created/lost or classes drift from totals."""
    net = traj.net
    scale = max(net.total_demand, 1.0)
    inside = traj.n_agg.sum(axis=1)
    err = np.abs(traj.departed + net.n0_cls.sum() - inside - traj.arrived)
    if err.max() > rtol * scale:
        k = int(np.argmax(err))
        raise SimulationFault(f"conservation error {float(err[k]):.3g} veh", step=k)
    drift = np.abs(traj.n_cls.sum(axis=2) - traj.n_agg)
    tol = rtol * np.maximum(1.0, traj.n_agg)
    if np.any(drift > tol):
        k, i = np.unravel_index(np.argmax(drift - tol), drift.shape)
        raise SimulationFault(f"class totals drift from aggregate in {net.nodes[i]} by {float(drift[k, i]):.3g}",
                              step=int(k))
    return float(err.max()), float(drift.max())


# ---------------------------------------------------------------------------
# CSV export


def write_trajectory_csv(traj: Trajectory, path, per_class=False, every=1):
    net = traj.net
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        head = ["step", "time_s", "region", "N_total"]
        if per_class:
            head += [f"N[{d}|{ta:g}]" for d, ta in net.classes]
        wr.writerow(head)
        for k in range(0, net.K + 1, every):
            for i, node in enumerate(net.nodes):
                row = [k, k * net.dt, node, f"{float(traj.n_agg[k, i]):.9g}"]
                if per_class:
                    row += [f"{float(v):.9g}" for v in traj.n_cls[k, i]]
                wr.writerow(row)


def write_flows_csv(traj: Trajectory, path, every=1):
    net = traj.net
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "from", "to", "q", "s_flag"])
        for k in range(0, net.K, every):
            for e in range(net.E):
                wr.writerow([k, net.nodes[net.e_src[e]], net.nodes[net.e_dst[e]],
                             f"{float(traj.q[k, e]):.9g}", int(traj.s[k, e])])
            for x in range(net.X):
                wr.writerow([k, net.nodes[net.x_src[x]], net.destinations[net.x_dest[x]],
                             f"{float(traj.qx[k, x]):.9g}", int(traj.sx[k, x])])
