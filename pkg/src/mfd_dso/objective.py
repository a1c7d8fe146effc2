"""Total-cost criterion: time spent, schedule-delay cost at exit, terminal occupancy."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import arrival_penalty  # noqa: F401  (public re-export)


@dataclass
class CostBreakdown:
    tts: float
    tac: float
    tc: float
    stage: np.ndarray  # g_k for k = 0..K-1
    terminal: float

    @property
    def total(self):
        return self.tts + self.tac + self.tc

    def as_row(self):
        return {"J": self.total, "TTS": self.tts, "TAC": self.tac, "TC": self.tc}


def stage_cost(n_total, exit_class_flows, penalty, dt, c=1.0, s=1.0):
    """g_k = dt * (c . N + sum s * q_exit * L).

    ``n_total`` per node, ``exit_class_flows`` (..., C) per exit and class,
    ``penalty`` the schedule-delay cost per class at this step.
    """
    tts = np.sum(np.asarray(c) * np.asarray(n_total))
    tac = np.sum(np.asarray(s) * np.asarray(exit_class_flows) * np.asarray(penalty))
    return float(dt * (tts + tac))


def terminal_cost(n_final, mu):
    """Half the mu-weighted squared accumulations left at the final time."""
    n_final = np.asarray(n_final, dtype=float)
    return float(0.5 * np.sum(np.asarray(mu) * n_final ** 2))


def exit_class_flows(traj):
    """(K, X, C) per-class exit flows of a trajectory."""
    net = traj.net
    num = traj.qx[:, :, None] * traj.n_cls[:-1][:, net.x_src] * net.x_mask[None]
    den = traj.mx[:, :, None]
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def total_cost(traj) -> CostBreakdown:
    net = traj.net
    dt = net.dt
    tts_k = dt * (traj.n_agg[:-1] @ net.tts_weight)
    qxc = exit_class_flows(traj)
    tac_k = dt * np.einsum("kxc,kc,c->k", qxc, net.arrival_cost, net.class_weight)
    tc = terminal_cost(traj.n_agg[-1], net.terminal_weight)
    stage = np.asarray(tts_k + tac_k, dtype=float)
    return CostBreakdown(tts=math.fsum(np.asarray(tts_k, dtype=float)),
                         tac=math.fsum(np.asarray(tac_k, dtype=float)),
                         tc=tc, stage=stage, terminal=tc)


def average_cost(breakdown: CostBreakdown, net):
    """Cost per traveller in report units (the scenario's cost_to_euro scale)."""
    trips = max(net.total_demand, 1e-300)
    return breakdown.total / trips * net.config.penalties.cost_to_euro


def criterion(traj):
    """J as a scalar in the trajectory's own float type (used by the FD oracle)."""
    net = traj.net
    dt = traj.n_agg.dtype.type(net.dt)
    w = net.tts_weight.astype(traj.n_agg.dtype)
    tts = dt * np.sum(traj.n_agg[:-1] @ w)
    num = traj.qx[:, :, None] * traj.n_cls[:-1][:, net.x_src] * net.x_mask[None]
    den = traj.mx[:, :, None]
    qxc = np.zeros_like(num)
    np.divide(num, den, out=qxc, where=den != 0)
    tac = dt * np.einsum("kxc,kc,c->", qxc, net.arrival_cost.astype(num.dtype),
                         net.class_weight.astype(num.dtype))
    mu = net.terminal_weight.astype(traj.n_agg.dtype)
    tc = np.sum(mu * traj.n_agg[-1] ** 2) / 2
    return tts + tac + tc
