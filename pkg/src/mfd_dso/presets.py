"""Built-in scenarios: the 8-region metropolitan network and small test networks."""
from __future__ import annotations

import numpy as np

from .scenario import (DemandEntry, DemandSpec, Edge, MfdCurve, OriginBuffer, PenaltySpec,
                       ScenarioConfig, trapezoid_profile)

REGIONS_8 = tuple(f"R{i}" for i in range(1, 9))

# undirected adjacency of the 8-region layout; every link is usable both ways
LINKS_8 = (
    ("R1", "R2"), ("R1", "R4"), ("R1", "R7"), ("R2", "R3"), ("R2", "R4"),
    ("R2", "R5"), ("R3", "R6"), ("R4", "R5"), ("R4", "R7"), ("R5", "R6"),
    ("R5", "R7"), ("R5", "R3"), ("R5", "R8"), ("R6", "R8"), ("R7", "R8"),
)

# share of trips (percent) from origin row to destination column
OD_PERCENT_8 = np.array([
    [2, 0, 0, 0, 10, 0, 0, 0],
    [0, 2, 0, 0, 9, 0, 0, 0],
    [0, 0, 2, 0, 8, 0, 0, 0],
    [0, 0, 0, 2, 7, 0, 0, 0],
    [4, 3, 0, 0, 15, 3, 2, 0],
    [0, 0, 0, 0, 6, 2, 0, 0],
    [0, 0, 0, 0, 6, 0, 2, 0],
    [0, 0, 0, 0, 5, 0, 0, 2],
], dtype=float)

FREE_FLOW_SPEED_8 = {"R1": 24.0, "R2": 24.0, "R3": 24.0, "R4": 14.0,
                     "R5": 10.0, "R6": 14.0, "R7": 24.0, "R8": 24.0}
TRIP_LENGTH_8 = {r: (10_000.0 if r == "R5" else 15_000.0) for r in REGIONS_8}

TOTAL_TRIPS_8 = 150_000.0
ARRIVAL_TIMES_8 = tuple(7200.0 + 900.0 * i for i in range(7))  # 08:00 .. 09:30 from 06:00
PROFILE_WINDOW_8 = (0.0, 3600.0, 10800.0, 12600.0)
HORIZON_8 = 12600.0
FINAL_TIME_8 = 14400.0


def origin_id(region):
    return f"O{region[1:]}"


def dest_id(region):
    return f"D{region[1:]}"


def scenario_8region(scale=1.0, dt=1.0, flow_model="strada", origin_model="buffer",
                     early_rate=0.5, late_rate=2.0, plateau=0.0, buffer_ramp_time=5.0,
                     terminal_factor=1.0):
    """Eight-region morning-peak scenario.

    ``scale`` multiplies trips, critical/jam accumulations and all capacities,
    so travel times and the dynamics shape are unchanged.  Each origin feeds its
    own region through a buffer whose ramp lasts ``buffer_ramp_time`` seconds at
    capacity; each destination is fed by its own region only.

    Every region and buffer gets terminal weight ``terminal_factor / Q``: a
    queue of N vehicles served at Q needs N**2 / (2 Q) vehicle-seconds to clear,
    so the terminal cost prices what is left in the network at t_f.
    """
    mfd = {}
    for r in REGIONS_8:
        base = MfdCurve.from_speed(3000.0, 12000.0, FREE_FLOW_SPEED_8[r], TRIP_LENGTH_8[r])
        mfd[r] = MfdCurve(base.n_c * scale, base.n_j * scale, base.q_max * scale, base.trip_length)
    buffers = {origin_id(r): OriginBuffer(nu=buffer_ramp_time * mfd[r].q_max, q_max=mfd[r].q_max)
               for r in REGIONS_8}
    edges = []
    for a, b in LINKS_8:
        edges += [Edge(a, b), Edge(b, a)]
    edges += [Edge(origin_id(r), r) for r in REGIONS_8]
    edges += [Edge(r, dest_id(r)) for r in REGIONS_8]

    share = OD_PERCENT_8 / OD_PERCENT_8.sum()
    total = TOTAL_TRIPS_8 * scale
    entries = []
    for i, o in enumerate(REGIONS_8):
        for j, d in enumerate(REGIONS_8):
            if share[i, j] <= 0:
                continue
            per_ta = total * share[i, j] / len(ARRIVAL_TIMES_8)
            for ta in ARRIVAL_TIMES_8:
                entries.append(DemandEntry(origin_id(o), dest_id(d), ta, per_ta,
                                           trapezoid_profile(per_ta, PROFILE_WINDOW_8)))
    demand = DemandSpec(ARRIVAL_TIMES_8, HORIZON_8, FINAL_TIME_8, tuple(entries))
    penalties = PenaltySpec(
        early_rate=early_rate, late_rate=late_rate, plateau=plateau,
        terminal_weights={**{r: terminal_factor / mfd[r].q_max for r in REGIONS_8},
                          **{o: terminal_factor / b.q_max for o, b in buffers.items()}},
        cost_to_euro=1.0 / 3600.0 * 10.0,
    )
    return ScenarioConfig(
        regions=REGIONS_8, edges=tuple(edges), mfd=mfd, buffers=buffers,
        destinations=tuple(dest_id(r) for r in REGIONS_8), demand=demand, penalties=penalties,
        dt=dt, flow_model=flow_model, origin_model=origin_model,
        name=f"8-region metropolitan peak (scale {scale:g})",
    )


def scenario_chain4(dt=5.0, n_steps=200, flow_model="strada", origin_model="buffer",
                    exit_supply=0.3, early_rate=0.5, late_rate=2.0, terminal=5.0, load=4.0):
    """Four-region chain R1->R2->R3->R4 with shortcuts R1->R3 and R2->R4.

    Two OD pairs (O1 at R1 bound to D4, O2 at R2 bound to D3), two desired
    arrival times each.  Sized so that supply limits, the MFD knee and the
    finite exit supply of D3 are all active during the horizon.
    """
    regions = ("R1", "R2", "R3", "R4")
    curve = MfdCurve(n_c=100.0, n_j=400.0, q_max=1.0)
    mfd = {r: curve for r in regions}
    buffers = {"O1": OriginBuffer(nu=10.0, q_max=2.0), "O2": OriginBuffer(nu=10.0, q_max=2.0)}
    edges = (
        Edge("O1", "R1"), Edge("O2", "R2"),
        Edge("R1", "R2"), Edge("R2", "R3"), Edge("R3", "R4"),
        Edge("R1", "R3"), Edge("R2", "R4"),
        Edge("R3", "D3", exit_supply=exit_supply), Edge("R4", "D4"),
    )
    t_f = dt * n_steps
    horizon = 0.6 * t_f
    tas = (0.5 * t_f, 0.7 * t_f)
    window = (0.0, 0.15 * t_f, 0.35 * t_f, 0.5 * t_f)
    entries = []
    for o, d, tot in (("O1", "D4", 120.0 * load), ("O2", "D3", 100.0 * load)):
        for ta in tas:
            entries.append(DemandEntry(o, d, ta, tot / 2, trapezoid_profile(tot / 2, window)))
    demand = DemandSpec(tas, horizon, t_f, tuple(entries))
    penalties = PenaltySpec(early_rate=early_rate, late_rate=late_rate,
                            default_terminal_weight=terminal)
    return ScenarioConfig(regions=regions, edges=edges, mfd=mfd, buffers=buffers,
                          destinations=("D3", "D4"), demand=demand, penalties=penalties, dt=dt,
                          flow_model=flow_model, origin_model=origin_model, name="4-region chain")


def scenario_single_od(dt=1.0, total=300.0, q_max=2.0, n_c=200.0, n_j=800.0, nu=4.0,
                       t_f=1200.0, horizon=600.0, t_a=600.0, origin_model="buffer", window=None):
    """One origin buffer, one region, one destination."""
    curve = MfdCurve(n_c=n_c, n_j=n_j, q_max=q_max)
    window = window or (0.0, 100.0, 400.0, 500.0)
    demand = DemandSpec((t_a,), horizon, t_f,
                        (DemandEntry("O", "D", t_a, total, trapezoid_profile(total, window)),))
    return ScenarioConfig(regions=("R",), edges=(Edge("O", "R"), Edge("R", "D")), mfd={"R": curve},
                          buffers={"O": OriginBuffer(nu=nu, q_max=q_max)}, destinations=("D",),
                          demand=demand, penalties=PenaltySpec(), dt=dt, origin_model=origin_model,
                          name="single OD")
