"""Euclidean projections onto scaled simplexes {x >= 0, sum x = b}.

The projection of v is x_j = max(v_j + zeta, 0) with zeta the root of the
piecewise-linear, nondecreasing xi(zeta) = sum_j max(v_j + zeta, 0) = b.
Its breakpoints are the cut values -v_j; sorting them and interpolating on
the bracketing segment gives zeta exactly.
"""
from __future__ import annotations

import functools

import numpy as np

from .network import Controls, Network


def _project_scalar(v, budget):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("projection needs a non-empty 1-D vector")
    if not budget > 0:
        raise ValueError(f"budget must be positive, got {budget}")
    cuts = np.sort(-v)             # ascending breakpoints of xi
    vals = np.sort(v)[::-1]        # vals[l-1] = -cuts[l-1]
    m = v.size
    # xi at breakpoint cut_l counts the l-1 coordinates already positive
    xi_prev = 0.0
    zeta = None
    l = 1
    while l <= m:
        # Case 3: equal cut values give zero-length segments; absorb them
        j = l
        while j < m and cuts[j] == cuts[l - 1]:
            j += 1
        # on [cut_l, next cut) exactly j coordinates are active
        nxt = cuts[j] if j < m else np.inf
        xi_next = xi_prev + j * (nxt - cuts[l - 1]) if np.isfinite(nxt) else np.inf
        if xi_next >= budget:
            # Case 1 (interior segment) / Case 2 (last segment): interpolate with slope j
            zeta = cuts[l - 1] + (budget - xi_prev) / j
            break
        xi_prev = xi_next
        l = j + 1
    x = np.maximum(v + zeta, 0.0)
    return x, float(zeta)


def project_routing_simplex(g, return_multiplier=False):
    """Projection onto the unit simplex (routing splits)."""
    x, zeta = _project_scalar(g, 1.0)
    return (x, zeta) if return_multiplier else x


def project_demand_budget(d, budget, return_multiplier=False):
    """Projection of a departure-rate profile onto {d >= 0, sum d = budget}."""
    x, zeta = _project_scalar(d, budget)
    return (x, zeta) if return_multiplier else x


def project_simplex_rows(v, budget=1.0, mask=None):
    """Row-wise projection of ``v`` (R, m); entries outside ``mask`` are fixed at 0.

    Rows without any admissible entry are returned as zeros.
    """
    v = np.asarray(v, dtype=float)
    r, m = v.shape
    b = np.broadcast_to(np.asarray(budget, dtype=float), (r,))
    if mask is None:
        u = -np.sort(-v, axis=1)
        css = np.cumsum(u, axis=1)
        theta_j = (css - b[:, None]) / np.arange(1, m + 1)
        rho = m - 1 - np.argmax((u - theta_j > 0)[:, ::-1], axis=1)
        return np.maximum(v - theta_j[np.arange(r), rho][:, None], 0.0)
    work = np.where(mask, v, -np.inf)
    u = -np.sort(-work, axis=1)                       # descending, -inf padding last
    valid = np.isfinite(u)
    css = np.cumsum(np.where(valid, u, 0.0), axis=1)
    j = np.arange(1, m + 1)
    theta_j = (css - b[:, None]) / j
    cond = valid & (u - theta_j > 0)
    rho = np.where(cond.any(axis=1), m - 1 - np.argmax(cond[:, ::-1], axis=1), 0)
    theta = theta_j[np.arange(r), rho]
    out = np.where(mask, np.maximum(v - theta[:, None], 0.0), 0.0)
    out[~mask.any(axis=1)] = 0.0
    return out


@functools.lru_cache(maxsize=None)
def _supports(m):
    bits = (np.arange(1, 2 ** m)[:, None] >> np.arange(m)[None, :]) & 1
    masks = bits.astype(float)
    return masks, masks.sum(axis=1)


def qp_oracle(v, budget=1.0):
    """Brute-force projection: enumerate supports, keep the best feasible candidate."""
    v = np.asarray(v, dtype=float)
    m = v.size
    if m > 20:
        raise ValueError("oracle is exponential in the dimension")
    masks, size = _supports(m)
    zeta = (budget - masks @ v) / size
    cand = masks * (v[None, :] + zeta[:, None])
    ok = (cand >= -1e-12).all(axis=1)
    obj = ((cand - v) ** 2).sum(axis=1)
    best = np.flatnonzero(ok)[np.argmin(obj[ok])]
    return np.maximum(cand[best], 0.0)


# ---------------------------------------------------------------------------
# Projection of full control trajectories


class ControlProjector:
    """Precomputed block layout for projecting Controls of one network.

    Routing blocks are grouped by width so each group is one dense batched
    projection; single-successor blocks are simply set to 1.
    """

    def __init__(self, net: Network):
        self.net = net
        by_width = {}
        for _, c, idx in net.route_blocks():
            by_width.setdefault(idx.size, []).append((c, idx))
        self.groups = []
        for width, items in sorted(by_width.items()):
            edges = np.array([idx for _, idx in items], dtype=int)        # (B, w)
            cls = np.array([c for c, _ in items], dtype=int)[:, None]     # (B, 1)
            self.groups.append((width, edges, np.broadcast_to(cls, edges.shape)))
        self.budgets = net.p_total / net.dt

    def gamma(self, gamma):
        out = np.zeros_like(gamma)
        for width, edges, cls in self.groups:
            if width == 1:
                out[:, edges, cls] = 1.0
                continue
            vals = gamma[:, edges, cls]                                   # (K, B, w)
            proj = project_simplex_rows(vals.reshape(-1, width)).reshape(vals.shape)
            out[:, edges, cls] = proj
        return out

    def departures(self, dep):
        out = np.zeros_like(dep)
        pos = self.budgets > 0
        if pos.any():
            out[pos] = project_simplex_rows(dep[pos], self.budgets[pos])
        return out

    def __call__(self, controls: Controls):
        return Controls(self.gamma(controls.gamma), self.departures(controls.departures))


def project_controls(net: Network, controls: Controls, projector: ControlProjector | None = None):
    """Project every routing block onto its simplex and every profile onto its budget."""
    return (projector or ControlProjector(net))(controls)


def feasibility_error(net: Network, controls: Controls):
    """Largest violation of the control constraints (0 for a feasible control)."""
    g = controls.gamma
    neg = max(0.0, -float(g.min(initial=0.0)), -float(controls.departures.min(initial=0.0)))
    off = float(np.abs(np.where(net.route_mask, 0.0, g)).max(initial=0.0))
    sums = np.zeros((g.shape[0], net.n, net.C))
    np.add.at(sums, (slice(None), net.e_src), g)
    has_block = np.zeros((net.n, net.C), dtype=bool)
    np.logical_or.at(has_block, net.e_src, net.route_mask)
    simplex = float(np.abs(np.where(has_block, sums - 1.0, 0.0)).max(initial=0.0))
    budget = np.abs(controls.departures.sum(axis=1) * net.dt - net.p_total)
    rel = float((budget / np.maximum(net.p_total, 1.0)).max(initial=0.0))
    return max(neg, off, simplex, rel)
