"""Exact gradient of the discrete criterion by the backward adjoint recursion.

With E_k the one-step map and g_k the stage cost,

    Y_K = dJ/dN_K = mu * N_K,     Y_k = dg_k/dN_k + Y_{k+1} . dE_k/dN_k,
    dJ/du_k = Y_{k+1} . dE_k/du_k      (g_k does not depend on the controls).

Two implementations are provided.  ``backward_sweep`` applies the transposed
step as a fused vector-Jacobian product (the production path).  The
``state_jacobian``/``control_jacobian`` pair assembles the same derivatives as
explicit sparse matrices from an independent tangent-linear step; it is meant
for small networks and for cross-checking.  Both read the regime flags stored
by the forward pass and never re-derive them.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dynamics import Trajectory, simulate_forward
from .network import Controls
from .objective import criterion


@dataclass
class AdjointTrajectory:
    agg: np.ndarray   # (K+1, n)
    cls: np.ndarray   # (K+1, n, C)


@dataclass
class StepData:
    """Per-step quantities reconstructed from a trajectory."""

    na: np.ndarray
    mass: np.ndarray
    gamma: np.ndarray
    wc: np.ndarray
    frac: np.ndarray
    ratio: np.ndarray      # d q^c / d w^c scale: q/W, or the demand rate when W = 0
    demand_bound: np.ndarray
    fracx: np.ndarray
    ratio_x: np.ndarray
    drate: np.ndarray      # d rate / d N_agg
    dsig: np.ndarray       # d sigma / d N_agg (regions; 0 for buffers)
    merges: list           # KKT: (region, edge group, interior mask, Q_A) for supply-bound merges


def _step_data(traj: Trajectory, k: int) -> StepData:
    net = traj.net
    dt = net.dt
    na = np.asarray(traj.n_agg[k], dtype=float)
    mass = np.asarray(traj.mass(k), dtype=float)
    gam = np.asarray(traj.controls.gamma[k], dtype=float)
    src = net.e_src
    wc = gam * mass[src]
    w = np.asarray(traj.w_sum[k], dtype=float)
    q = np.asarray(traj.q[k], dtype=float)
    rate = np.asarray(traj.rate[k], dtype=float)
    s = traj.s[k]
    pos = w > 0
    frac = np.zeros_like(wc)
    np.divide(wc, w[:, None], out=frac, where=pos[:, None])
    # STRADA: demand attains the min; KKT: the inflow is clamped at its demand
    demand_bound = ~s
    ratio = np.where(pos, q / np.where(pos, w, 1.0), np.where(demand_bound, rate[src], 0.0))

    mx = np.asarray(traj.mx[k], dtype=float)
    qx = np.asarray(traj.qx[k], dtype=float)
    xpos = mx > 0
    fracx = np.zeros((net.X, net.C))
    np.divide(mass[net.x_src] * net.x_mask, mx[:, None], out=fracx, where=xpos[:, None])
    ratio_x = np.where(xpos, qx / np.where(xpos, mx, 1.0),
                       np.where(~traj.sx[k], rate[net.x_src], 0.0))

    sat = traj.saturated[k]
    drate = np.where(sat, -net.cap / np.maximum(na, net.knee) ** 2, 0.0)
    if net.queue_origins:
        drate[net.is_buffer] = 0.0
    dsig = np.zeros(net.n)
    reg = ~net.is_buffer
    slope = -net.cap[reg] / (net.jam[reg] - net.knee[reg])
    dsig[reg] = np.where(traj.supply_piece[k, reg] == 1, slope, 0.0)

    merges = []
    if net.kkt:
        for v in range(net.n):
            grp = np.flatnonzero(net.e_dst == v)
            if grp.size == 0 or not traj.merge_bound[k, v]:
                continue
            inner = traj.s[k, grp]
            if not inner.any():
                continue
            merges.append((v, grp, inner, float(net.pair_max[grp][inner].sum())))
    return StepData(na, mass, gam, wc, frac, ratio, demand_bound, fracx, ratio_x, drate, dsig, merges)


# ---------------------------------------------------------------------------
# Reverse mode


def _vjp_step(traj: Trajectory, k: int, lam_a, lam_c, sd: StepData | None = None, with_dynamics=True):
    """Pull (lam_a, lam_c) = Y_{k+1} back through E_k and add dg_k/dN_k.

    Returns (Y_k aggregate, Y_k classes, d/d gamma_k (E, C), d/d departures_k (P,)).
    """
    net = traj.net
    dt = net.dt
    sd = sd or _step_data(traj, k)
    src, dst, xs = net.e_src, net.e_dst, net.x_src
    rate = np.asarray(traj.rate[k], dtype=float)
    w = np.asarray(traj.w_sum[k], dtype=float)
    mx = np.asarray(traj.mx[k], dtype=float)

    if with_dynamics:
        qbar_c = dt * (lam_c[dst] - lam_c[src])
        qbar = dt * (lam_a[dst] - lam_a[src])
        qxbar_c = -dt * lam_c[xs] * net.x_mask
        qxbar = -dt * lam_a[xs]
    else:
        qbar_c = np.zeros((net.E, net.C))
        qbar = np.zeros(net.E)
        qxbar_c = np.zeros((net.X, net.C))
        qxbar = np.zeros(net.X)
    qxbar_c = qxbar_c + dt * (net.class_weight * net.arrival_cost[k])[None, :] * net.x_mask

    # transfers: class split, then aggregate flow
    avg = (qbar_c * sd.frac).sum(axis=1)
    qbar_tot = qbar + avg
    wbar = sd.ratio[:, None] * (qbar_c - avg[:, None])
    sigbar = np.zeros(net.n)
    if not net.kkt:
        s = traj.s[k]
        sigbar += np.bincount(dst, weights=np.where(s, net.beta * qbar_tot, 0.0), minlength=net.n)
        dbar = np.where(s, 0.0, qbar_tot)
    else:
        dbar = qbar_tot.copy()
        for v, grp, inner, q_a in sd.merges:
            share = float((qbar_tot[grp][inner] * net.pair_max[grp][inner]).sum()) / q_a
            sigbar[v] += share
            dbar[grp] = np.where(inner, 0.0, qbar_tot[grp] - share)
    wbar += (dbar * rate[src])[:, None]
    rbar = np.bincount(src, weights=dbar * w, minlength=net.n)
    gbar = wbar * sd.mass[src]
    massbar = net.a_out @ (wbar * sd.gamma)

    # exits
    avgx = (qxbar_c * sd.fracx).sum(axis=1)
    qxbar_tot = qxbar + avgx
    massbar += net.x_out @ (sd.ratio_x[:, None] * (qxbar_c - avgx[:, None]) * net.x_mask)
    dxbar = np.where(traj.sx[k], 0.0, qxbar_tot)
    rbar += np.bincount(xs, weights=dxbar * mx, minlength=net.n)
    massbar += net.x_out @ ((dxbar * rate[xs])[:, None] * net.x_mask)

    ya = rbar * sd.drate + sigbar * sd.dsig + dt * net.tts_weight
    yc = massbar.copy()
    if with_dynamics:
        ya += lam_a
        yc += lam_c

    dep_bar = np.zeros(net.P)
    if k < net.K_dep:
        if with_dynamics:
            dep_bar += dt * (lam_a[net.p_node] + lam_c[net.p_node, net.p_class])
        if net.queue_origins:
            dep_bar += dt * massbar[net.p_node, net.p_class]
    return ya, yc, np.where(net.route_mask, gbar, 0.0), dep_bar


def terminal_adjoint(n_final, mu, n_classes=None):
    """Y_K: mu * N_K for the aggregate, zero for the classes."""
    ya = np.asarray(mu, dtype=float) * np.asarray(n_final, dtype=float)
    if n_classes is None:
        return ya
    return ya, np.zeros((ya.size, n_classes))


def stage_cost_gradient(traj: Trajectory, k: int):
    """dg_k/dN_k as (aggregate (n,), classes (n, C))."""
    net = traj.net
    ya, yc, _, _ = _vjp_step(traj, k, np.zeros(net.n), np.zeros((net.n, net.C)), with_dynamics=False)
    return ya, yc


@dataclass
class Gradient:
    controls: Controls
    adjoint: AdjointTrajectory | None
    J: float

    @property
    def gamma(self):
        return self.controls.gamma

    @property
    def departures(self):
        return self.controls.departures


def backward_sweep(traj: Trajectory, keep_adjoint=True, method="fused"):
    """Run the adjoint recursion from K down to 0 and assemble the control gradient."""
    if method == "jacobian":
        return _backward_sweep_jacobian(traj)
    net = traj.net
    lam_a, lam_c = terminal_adjoint(np.asarray(traj.n_agg[-1], dtype=float), net.terminal_weight, net.C)
    gg = np.zeros((net.K, net.E, net.C))
    gd = np.zeros((net.P, net.K_dep))
    if keep_adjoint:
        adj = AdjointTrajectory(np.zeros((net.K + 1, net.n)), np.zeros((net.K + 1, net.n, net.C)))
        adj.agg[-1], adj.cls[-1] = lam_a, lam_c
    for k in range(net.K - 1, -1, -1):
        lam_a, lam_c, gg[k], dbar = _vjp_step(traj, k, lam_a, lam_c)
        if k < net.K_dep:
            gd[:, k] = dbar
        if keep_adjoint:
            adj.agg[k], adj.cls[k] = lam_a, lam_c
    return Gradient(Controls(gg, gd), adj if keep_adjoint else None, float(criterion(traj)))


def control_gradient(traj: Trajectory, adjoint: AdjointTrajectory | None = None):
    """dJ/d(gamma, departures); with a stored adjoint the step k gradient uses Y_{k+1} only."""
    if adjoint is None:
        return backward_sweep(traj, keep_adjoint=False).controls
    net = traj.net
    gg = np.zeros((net.K, net.E, net.C))
    gd = np.zeros((net.P, net.K_dep))
    for k in range(net.K):
        _, _, gg[k], dbar = _vjp_step(traj, k, adjoint.agg[k + 1], adjoint.cls[k + 1])
        if k < net.K_dep:
            gd[:, k] = dbar
    return Controls(gg, gd)


def gradient(net, controls: Controls):
    """Forward pass followed by the adjoint sweep."""
    traj = simulate_forward(net, controls)
    return backward_sweep(traj, keep_adjoint=False), traj


# ---------------------------------------------------------------------------
# Forward mode and explicit Jacobians


def _jvp_step(traj: Trajectory, k: int, dna, dnc, dgam, ddep, sd: StepData | None = None):
    """Tangent of (N_{k+1}, g_k) for a state/control perturbation at step k."""
    net = traj.net
    dt = net.dt
    sd = sd or _step_data(traj, k)
    src, dst, xs = net.e_src, net.e_dst, net.x_src
    rate = np.asarray(traj.rate[k], dtype=float)
    w = np.asarray(traj.w_sum[k], dtype=float)
    mx = np.asarray(traj.mx[k], dtype=float)
    q = np.asarray(traj.q[k], dtype=float)
    qx = np.asarray(traj.qx[k], dtype=float)

    dinj = np.zeros((net.n, net.C))
    if k < net.K_dep:
        dinj[net.p_node, net.p_class] = ddep
    dmass = dnc + (dt * dinj if net.queue_origins else 0.0)
    drate = sd.drate * dna
    dsig = sd.dsig * dna

    dmx = (dmass[xs] * net.x_mask).sum(axis=1)
    ddx = drate[xs] * mx + rate[xs] * dmx
    dqx = np.where(traj.sx[k], 0.0, ddx)
    xpos = mx > 0
    ratio_x = np.where(xpos, qx / np.where(xpos, mx, 1.0), sd.ratio_x)
    dqxc = dqx[:, None] * sd.fracx + ratio_x[:, None] * (dmass[xs] * net.x_mask - sd.fracx * dmx[:, None])

    dwc = dgam * sd.mass[src] + sd.gamma * dmass[src]
    dw = dwc.sum(axis=1)
    dde = drate[src] * w + rate[src] * dw
    if not net.kkt:
        dq = np.where(traj.s[k], net.beta * dsig[dst], dde)
    else:
        dq = dde.copy()
        for v, grp, inner, q_a in sd.merges:
            free = dsig[v] - dde[grp][~inner].sum()
            dq[grp] = np.where(inner, net.pair_max[grp] * free / q_a, dde[grp])
    pos = w > 0
    ratio = np.where(pos, q / np.where(pos, w, 1.0), sd.ratio)
    dqc = dq[:, None] * sd.frac + ratio[:, None] * (dwc - sd.frac * dw[:, None])

    flow_in = net.a_in - net.a_out
    dnc1 = dnc + dt * (flow_in @ dqc - net.x_out @ dqxc + dinj)
    dna1 = dna + dt * (flow_in @ dq - net.x_out @ dqx + dinj.sum(axis=1))
    dg = dt * (net.tts_weight @ dna + np.sum(net.class_weight * net.arrival_cost[k] * dqxc))
    return dna1, dnc1, dg


def _state_size(net):
    return net.n * (1 + net.C)


def _split_state(net, v):
    return v[: net.n], v[net.n:].reshape(net.n, net.C)


def _explicit_jacobians(traj: Trajectory, k: int):
    net = traj.net
    sd = _step_data(traj, k)
    m = _state_size(net)
    zero_g = np.zeros((net.E, net.C))
    zero_d = np.zeros(net.P)
    cols, dg_row = [], np.zeros(m)
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        dna, dnc = _split_state(net, e)
        a1, c1, dg = _jvp_step(traj, k, dna, dnc, zero_g, zero_d, sd)
        cols.append(np.concatenate([a1, c1.ravel()]))
        dg_row[j] = dg
    jx = sp.csc_matrix(np.array(cols).T)
    jx.eliminate_zeros()
    ucols = []
    ge, gc = np.nonzero(net.route_mask)
    for e_i, c_i in zip(ge, gc):
        dgam = np.zeros((net.E, net.C))
        dgam[e_i, c_i] = 1.0
        a1, c1, _ = _jvp_step(traj, k, np.zeros(net.n), np.zeros((net.n, net.C)), dgam, zero_d, sd)
        ucols.append(np.concatenate([a1, c1.ravel()]))
    for p in range(net.P):
        dd = np.zeros(net.P)
        dd[p] = 1.0
        a1, c1, _ = _jvp_step(traj, k, np.zeros(net.n), np.zeros((net.n, net.C)), zero_g, dd, sd)
        ucols.append(np.concatenate([a1, c1.ravel()]))
    ju = sp.csc_matrix(np.array(ucols).T if ucols else np.zeros((m, 0)))
    ju.eliminate_zeros()
    return jx, ju, dg_row


def state_jacobian(traj: Trajectory, k: int):
    """Sparse dE_k/dN_k with state order [N_agg (n), N_cls (n*C row-major)]."""
    return _explicit_jacobians(traj, k)[0]


def control_jacobian(traj: Trajectory, k: int):
    """Sparse dE_k/du_k; columns are the routed (edge, class) pairs in row-major order, then departures."""
    return _explicit_jacobians(traj, k)[1]


def _backward_sweep_jacobian(traj: Trajectory):
    net = traj.net
    lam = np.concatenate([net.terminal_weight * np.asarray(traj.n_agg[-1], dtype=float),
                          np.zeros(net.n * net.C)])
    adj = AdjointTrajectory(np.zeros((net.K + 1, net.n)), np.zeros((net.K + 1, net.n, net.C)))
    adj.agg[-1], adj.cls[-1] = _split_state(net, lam)
    gg = np.zeros((net.K, net.E, net.C))
    gd = np.zeros((net.P, net.K_dep))
    ge, gc = np.nonzero(net.route_mask)
    for k in range(net.K - 1, -1, -1):
        jx, ju, dg = _explicit_jacobians(traj, k)
        gu = ju.T @ lam
        gg[k][ge, gc] = gu[: ge.size]
        if k < net.K_dep:
            gd[:, k] = gu[ge.size:]
        lam = dg + jx.T @ lam
        adj.agg[k], adj.cls[k] = _split_state(net, lam)
    return Gradient(Controls(gg, gd), adj, float(criterion(traj)))


# ---------------------------------------------------------------------------
# Finite-difference oracle


@dataclass
class FdEstimate:
    value: float
    nonsmooth: bool


def control_index(controls: Controls, kind, idx):
    """Flat index of ('gamma', (k, e, c)) or ('departure', (p, k))."""
    if kind == "gamma":
        return int(np.ravel_multi_index(idx, controls.gamma.shape))
    return controls.gamma.size + int(np.ravel_multi_index(idx, controls.departures.shape))


def fd_gradient_oracle(net, controls: Controls, index, h=1e-4, dtype=np.longdouble, base_signature=None):
    """Central difference of J along one control component, without projection.

    The two runs use ``dtype`` arithmetic.  If either run changes any regime
    flag relative to the unperturbed run the estimate is marked nonsmooth.
    """
    if base_signature is None:
        base_signature = simulate_forward(net, controls, dtype=dtype).signature()
    vals, smooth = [], True
    flat = controls.flat()
    for sign in (1.0, -1.0):
        v = flat.copy()
        v[index] += sign * h
        traj = simulate_forward(net, Controls.from_flat(v, controls), check=False, dtype=dtype)
        vals.append(criterion(traj))
        smooth &= bool(np.array_equal(traj.signature(), base_signature))
    return FdEstimate(float((vals[0] - vals[1]) / (2 * h)), not smooth)


def write_gradient_csv(grad: Controls, net, path, tol=0.0):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "control", "value"])
        for k, e, c in zip(*np.nonzero(np.abs(grad.gamma) > tol)):
            cid = f"gamma[{net.nodes[net.e_src[e]]}->{net.nodes[net.e_dst[e]]}|{net.classes[c][0]}@{net.classes[c][1]:g}]"
            wr.writerow([int(k), cid, f"{grad.gamma[k, e, c]:.12g}"])
        for p, k in zip(*np.nonzero(np.abs(grad.departures) > tol)):
            d, ta = net.classes[net.p_class[p]]
            wr.writerow([int(k), f"departure[{net.nodes[net.p_node[p]]}->{d}@{ta:g}]",
                         f"{grad.departures[p, k]:.12g}"])


@dataclass
class GradCheckRecord:
    kind: str
    index: tuple
    adjoint: float
    fd: float
    rel_error: float
    nonsmooth: bool


def sample_components(net, controls: Controls, rng):
    """Random order over free control components.

    Free means routing entries of blocks with more than one successor, and
    departure rates.  Yields ("gamma", (k, e, c)) or ("departure", (p, k)).
    """
    width = np.zeros((net.n, net.C), dtype=int)
    np.add.at(width, net.e_src, net.route_mask.astype(int))
    free = net.route_mask & (width[net.e_src] > 1)
    ge, gc = np.nonzero(free)
    pool_g = len(ge) * net.K
    for j in rng.permutation(pool_g + net.P * net.K_dep):
        if j < pool_g:
            k, m = divmod(int(j), len(ge))
            yield "gamma", (k, int(ge[m]), int(gc[m]))
        else:
            p, k = divmod(int(j) - pool_g, net.K_dep)
            yield "departure", (p, k)


def gradient_check(net, controls: Controls, n=200, seed=0, h=1e-4, floor=1e-12):
    """Compare adjoint components with long-double central differences.

    Components are drawn until ``n`` of them are regime-smooth (nonsmooth draws
    are returned too, flagged).  The relative error divides by
    max(|fd|, |adjoint|, floor * max|gradient|).
    """
    traj = simulate_forward(net, controls)
    grad = backward_sweep(traj, keep_adjoint=False).controls
    scale = max(float(np.abs(grad.gamma).max(initial=0.0)), float(np.abs(grad.departures).max(initial=0.0)))
    base = simulate_forward(net, controls, dtype=np.longdouble).signature()
    records, smooth = [], 0
    for kind, idx in sample_components(net, controls, np.random.default_rng(seed)):
        if smooth >= n:
            break
        a = float(grad.gamma[idx] if kind == "gamma" else grad.departures[idx])
        est = fd_gradient_oracle(net, controls, control_index(controls, kind, idx), h=h, base_signature=base)
        den = max(abs(est.value), abs(a), floor * scale, 1e-300)
        records.append(GradCheckRecord(kind, idx, a, est.value, abs(a - est.value) / den, est.nonsmooth))
        smooth += not est.nonsmooth
    return records


def write_gradcheck_csv(records, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["kind", "index", "adjoint", "fd", "rel_error", "nonsmooth"])
        for r in records:
            wr.writerow([r.kind, " ".join(map(str, r.index)), f"{r.adjoint:.15g}", f"{r.fd:.15g}",
                         f"{r.rel_error:.3e}", int(r.nonsmooth)])
