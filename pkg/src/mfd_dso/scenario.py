"""Regional network description: MFD curves, origin buffers, demand and penalties.

A scenario has three kinds of nodes:

* regions   -- regular MFD regions (the intermediate set, also the regions that
               feed destinations),
* buffers   -- origin buffers, virtual queues that receive the departure rates
               and feed one or more regions,
* destinations -- sinks; traffic bound to D leaves the network from any region
               with an edge into D.

A physical region that is both an origin and a destination is therefore three
nodes (buffer -> region -> sink).  All times are seconds since simulation start,
vehicle counts are vehicles and rates are vehicles/second.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Mapping

import networkx as nx
import numpy as np

FLOW_MODELS = ("strada", "kkt_optimization")
ORIGIN_MODELS = ("buffer", "homogeneous_queue")


class ScenarioError(ValueError):
    """Raised for structurally invalid scenarios (bad ids, failed validation)."""

    def __init__(self, message, findings=()):
        super().__init__(message)
        self.findings = list(findings)


# ---------------------------------------------------------------------------
# MFD curves and buffer demand


@dataclass(frozen=True)
class MfdCurve:
    n_c: float
    n_j: float
    q_max: float
    trip_length: float | None = None  # metres, only used for speed reporting

    @classmethod
    def from_speed(cls, n_c, n_j, free_flow_speed, trip_length):
        """Triangular MFD with capacity v_f * n_c / L."""
        return cls(n_c=n_c, n_j=n_j, q_max=free_flow_speed * n_c / trip_length,
                   trip_length=trip_length)

    @property
    def demand_slope(self):
        return self.q_max / self.n_c

    @property
    def supply_slope(self):
        return self.q_max / (self.n_j - self.n_c)

    @property
    def free_flow_time(self):
        return self.n_c / self.q_max

    @property
    def free_flow_speed(self):
        if self.trip_length is None:
            return None
        return self.q_max * self.trip_length / self.n_c

    def speed(self, n):
        """Space-mean speed (m/s) of the triangular flow-accumulation relation."""
        if self.trip_length is None:
            raise ValueError("trip_length is needed to convert flows to speeds")
        n = np.asarray(n, dtype=float)
        vf = self.free_flow_speed
        with np.errstate(divide="ignore", invalid="ignore"):
            cong = self.q_max * self.trip_length * (self.n_j - n) / ((self.n_j - self.n_c) * n)
        return np.where(n <= self.n_c, vf, np.clip(cong, 0.0, vf))


@dataclass(frozen=True)
class OriginBuffer:
    nu: float      # ramp threshold (vehicles)
    q_max: float   # maximum outflow Q_Ox (veh/s)

    @property
    def demand_slope(self):
        return self.q_max / self.nu


def _check_nonneg(n):
    if np.any(np.asarray(n) < 0):
        raise ValueError(f"accumulation must be nonnegative, got {n!r}")


def mfd_demand(curve: MfdCurve, n):
    """Outflow the region can send: Q_max * min(N / n_c, 1)."""
    _check_nonneg(n)
    return curve.q_max * np.minimum(np.asarray(n, dtype=float) / curve.n_c, 1.0)


def mfd_supply(curve: MfdCurve, n):
    """Inflow the region can receive; Q_max up to n_c, linear decay to 0 at n_j."""
    _check_nonneg(n)
    n = np.asarray(n, dtype=float)
    return curve.q_max * np.clip((curve.n_j - n) / (curve.n_j - curve.n_c), 0.0, 1.0)


def buffer_demand(buffer: OriginBuffer, n):
    _check_nonneg(n)
    return buffer.q_max * np.minimum(np.asarray(n, dtype=float) / buffer.nu, 1.0)


# ---------------------------------------------------------------------------
# Inflow profiles


@dataclass(frozen=True)
class TrapezoidProfile:
    """Piecewise-linear rate: 0 -> peak on [t0,t1], flat on [t1,t2], peak -> 0 on [t2,t3]."""

    total: float
    window: tuple[float, float, float, float]

    def __post_init__(self):
        t0, t1, t2, t3 = self.window
        if not (t0 <= t1 <= t2 <= t3):
            raise ValueError(f"trapezoid window must be ordered, got {self.window}")
        if (t3 - t0) + (t2 - t1) <= 0:
            raise ValueError("degenerate trapezoid window (zero area)")

    @property
    def peak(self):
        t0, t1, t2, t3 = self.window
        return 2.0 * self.total / ((t3 - t0) + (t2 - t1))

    def rate(self, t):
        t0, t1, t2, t3 = self.window
        t = np.asarray(t, dtype=float)
        up = np.where(t1 > t0, (t - t0) / max(t1 - t0, 1e-300), 1.0)
        down = np.where(t3 > t2, (t3 - t) / max(t3 - t2, 1e-300), 1.0)
        shape = np.where((t < t0) | (t >= t3), 0.0,
                         np.where(t < t1, up, np.where(t <= t2, 1.0, down)))
        return self.peak * np.clip(shape, 0.0, 1.0)

    def cumulative(self, t):
        """Exact integral of the rate over [-inf, t]."""
        t0, t1, t2, t3 = self.window
        t = np.asarray(t, dtype=float)
        p = self.peak
        a = np.clip(t, t0, t1)
        b = np.clip(t, t1, t2)
        c = np.clip(t, t2, t3)
        ramp_up = 0.5 * p * (a - t0) ** 2 / (t1 - t0) if t1 > t0 else 0.0 * a
        flat = p * (b - t1)
        if t3 > t2:
            ramp_down = p * (c - t2) - 0.5 * p * (c - t2) ** 2 / (t3 - t2)
        else:
            ramp_down = 0.0 * c
        return ramp_up + flat + ramp_down

    def cell_rates(self, dt, n_steps):
        edges = np.arange(n_steps + 1) * dt
        return np.diff(self.cumulative(edges)) / dt

    def to_dict(self):
        return {"kind": "trapezoid", "window": list(self.window)}


@dataclass(frozen=True)
class RateProfile:
    """Explicit per-step departure rates on a grid of spacing ``dt``."""

    rates: tuple[float, ...]
    dt: float

    def cell_rates(self, dt, n_steps):
        src = np.asarray(self.rates, dtype=float)
        ratio = self.dt / dt
        rep = int(round(ratio))
        if abs(ratio - rep) > 1e-9 or rep < 1:
            raise ValueError(f"profile step {self.dt} is not a multiple of dt={dt}")
        fine = np.repeat(src, rep)
        out = np.zeros(n_steps)
        m = min(n_steps, fine.size)
        out[:m] = fine[:m]
        return out

    def integral(self):
        return float(np.sum(self.rates) * self.dt)

    def to_dict(self):
        return {"kind": "rates", "dt": self.dt, "rates": list(self.rates)}


def trapezoid_profile(total, window):
    """Trapezoidal inflow profile integrating to ``total`` vehicles."""
    if total < 0:
        raise ValueError("total demand must be nonnegative")
    return TrapezoidProfile(float(total), tuple(float(w) for w in window))


def profile_from_dict(total, d):
    kind = d.get("kind", "trapezoid")
    if kind == "trapezoid":
        return trapezoid_profile(total, d["window"])
    if kind == "rates":
        return RateProfile(tuple(float(r) for r in d["rates"]), float(d["dt"]))
    raise ScenarioError(f"unknown profile kind {kind!r}")


# ---------------------------------------------------------------------------
# Demand, penalties, topology


@dataclass(frozen=True)
class DemandEntry:
    origin: str
    destination: str
    t_a: float
    total: float
    profile: TrapezoidProfile | RateProfile

    @property
    def key(self):
        return (self.origin, self.destination, self.t_a)


@dataclass(frozen=True)
class DemandSpec:
    arrival_times: tuple[float, ...]
    horizon: float        # departures allowed on [0, horizon)
    final_time: float     # t_f > horizon
    entries: tuple[DemandEntry, ...]

    @property
    def total(self):
        return float(sum(e.total for e in self.entries))


@dataclass(frozen=True)
class PenaltySpec:
    early_rate: float = 0.0
    late_rate: float = 0.0
    plateau: float = 0.0  # half-width of the zero-penalty band around t_a
    tts_weights: Mapping[str, float] = field(default_factory=dict)
    arrival_weights: Mapping[str, float] = field(default_factory=dict)  # per destination
    terminal_weights: Mapping[str, float] = field(default_factory=dict)
    default_tts_weight: float = 1.0
    default_terminal_weight: float = 0.0
    cost_to_euro: float = 1.0

    def tts_weight(self, node):
        return float(self.tts_weights.get(node, self.default_tts_weight))

    def terminal_weight(self, node):
        return float(self.terminal_weights.get(node, self.default_terminal_weight))

    def arrival_weight(self, dest):
        return float(self.arrival_weights.get(dest, 1.0))


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    beta: float | None = None         # STRADA supply split into dst
    q_x: float | None = None          # maximum pair flow for the KKT merge
    exit_supply: float | None = None  # only for edges into a destination


@dataclass(frozen=True)
class InitialLoad:
    node: str
    destination: str
    t_a: float
    vehicles: float


@dataclass(frozen=True)
class RegionalGraph:
    regions: tuple[str, ...]
    origins: tuple[str, ...]
    destinations: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]

    @property
    def nodes(self):
        return self.regions + self.origins + self.destinations

    @property
    def intermediates(self):
        return self.regions

    def successors(self, node):
        return [j for (i, j) in self.edges if i == node]

    def predecessors(self, node):
        return [i for (i, j) in self.edges if j == node]

    def to_networkx(self):
        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        g.add_edges_from(self.edges)
        return g


@dataclass(frozen=True)
class ScenarioConfig:
    regions: tuple[str, ...]
    edges: tuple[Edge, ...]
    mfd: Mapping[str, MfdCurve]
    buffers: Mapping[str, OriginBuffer]
    destinations: tuple[str, ...]
    demand: DemandSpec
    penalties: PenaltySpec
    dt: float
    flow_model: str = "strada"
    origin_model: str = "buffer"
    initial_state: tuple[InitialLoad, ...] = ()
    name: str = ""

    @property
    def graph(self):
        return RegionalGraph(tuple(self.regions), tuple(self.buffers), tuple(self.destinations),
                             tuple((e.src, e.dst) for e in self.edges))

    def predecessors(self, node):
        return [e.src for e in self.edges if e.dst == node]

    def successors(self, node):
        return [e.dst for e in self.edges if e.src == node]

    def beta(self, edge: Edge):
        if edge.beta is not None:
            return float(edge.beta)
        return 1.0 / len(self.predecessors(edge.dst))

    def q_x(self, edge: Edge):
        if edge.q_x is not None:
            return float(edge.q_x)
        if edge.src in self.buffers:
            return self.buffers[edge.src].q_max
        return self.mfd[edge.src].q_max

    def replace(self, **kw):
        from dataclasses import replace
        return replace(self, **kw)

    @property
    def n_steps(self):
        return int(round(self.demand.final_time / self.dt))

    @property
    def n_departure_steps(self):
        return int(math.ceil(self.demand.horizon / self.dt - 1e-9))


# ---------------------------------------------------------------------------
# CFL bound


def cfl_timestep(config: ScenarioConfig):
    """Largest stable step: inverse of the steepest demand/supply slope (buffers included)."""
    slopes = []
    for r in config.regions:
        c = config.mfd[r]
        slopes += [c.demand_slope, c.supply_slope]
    for b in config.buffers.values():
        slopes.append(b.demand_slope)
    return 1.0 / max(slopes)


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Finding:
    code: str
    message: str
    location: str = ""

    def __str__(self):
        loc = f" [{self.location}]" if self.location else ""
        return f"{self.code}: {self.message}{loc}"


def validate_scenario(config: ScenarioConfig, budget_rtol=1e-6):
    """Return the list of violated invariants; an empty list means valid."""
    out: list[Finding] = []
    regions = set(config.regions)
    buffers = set(config.buffers)
    dests = set(config.destinations)
    declared = regions | buffers | dests

    seen = {}
    for kind, ids in (("region", config.regions), ("buffer", config.buffers),
                      ("destination", config.destinations)):
        for i in ids:
            if i in seen:
                out.append(Finding("duplicate id", f"{i} declared as {seen[i]} and {kind}", i))
            seen[i] = kind

    for r in config.regions:
        if r not in config.mfd:
            out.append(Finding("missing mfd", f"region {r} has no MFD curve", r))
            continue
        c = config.mfd[r]
        if not (0 < c.n_c < c.n_j) or c.q_max <= 0:
            out.append(Finding("bad mfd", f"need 0 < n_c < n_j and q_max > 0, got {c}", r))
    for r in config.mfd:
        if r not in regions:
            out.append(Finding("unknown region", f"mfd given for undeclared region {r}", f"mfd.{r}"))
    for b, buf in config.buffers.items():
        if buf.nu <= 0 or buf.q_max <= 0:
            out.append(Finding("bad buffer", f"need nu > 0 and q_max > 0, got {buf}", b))

    structural_ok = True
    for k, e in enumerate(config.edges):
        loc = f"edges[{k}]"
        for end in (e.src, e.dst):
            if end not in declared:
                out.append(Finding("unknown region", f"edge {e.src}->{e.dst} references undeclared {end}", loc))
                structural_ok = False
        if e.dst in buffers:
            out.append(Finding("bad edge", f"origin buffer {e.dst} cannot have predecessors", loc))
        if e.src in dests:
            out.append(Finding("bad edge", f"destination {e.src} cannot have successors", loc))
        if e.src in buffers and e.dst in dests:
            out.append(Finding("bad edge", "buffers must feed a region, not a destination", loc))
        if e.beta is not None and e.beta <= 0:
            out.append(Finding("bad split", f"beta must be > 0 on {e.src}->{e.dst}", loc))
        if e.q_x is not None and e.q_x <= 0:
            out.append(Finding("bad pair flow", f"q_x must be > 0 on {e.src}->{e.dst}", loc))
        if e.exit_supply is not None and (e.dst not in dests or e.exit_supply < 0):
            out.append(Finding("bad exit supply", "exit_supply only on edges into destinations, >= 0", loc))
    pairs = [(e.src, e.dst) for e in config.edges]
    if len(set(pairs)) != len(pairs):
        out.append(Finding("duplicate edge", "an edge is declared twice", "edges"))

    if structural_ok:
        for r in config.regions:
            preds = [e for e in config.edges if e.dst == r]
            if config.flow_model == "strada" and preds:
                tot = sum(config.beta(e) for e in preds)
                if tot > 1.0 + 1e-9:
                    out.append(Finding("bad split", f"STRADA splits into {r} sum to {tot:.6g} > 1", r))
        for b in config.buffers:
            if not config.successors(b):
                out.append(Finding("bad buffer", f"buffer {b} feeds no region", b))
        for d in config.destinations:
            if not config.predecessors(d):
                out.append(Finding("bad destination", f"destination {d} is not fed by any region", d))

    if config.flow_model not in FLOW_MODELS:
        out.append(Finding("bad option", f"flow_model must be one of {FLOW_MODELS}", "flow_model"))
    if config.origin_model not in ORIGIN_MODELS:
        out.append(Finding("bad option", f"origin_model must be one of {ORIGIN_MODELS}", "origin_model"))

    dem = config.demand
    if config.dt <= 0:
        out.append(Finding("bad dt", "time step must be positive", "dt"))
    if not dem.final_time > dem.horizon > 0:
        out.append(Finding("bad horizon", f"need 0 < T < t_f, got T={dem.horizon}, t_f={dem.final_time}", "demand"))
    if config.dt > 0:
        k = dem.final_time / config.dt
        if abs(k - round(k)) > 1e-9:
            out.append(Finding("bad dt", f"t_f={dem.final_time} is not a multiple of dt={config.dt}", "dt"))
        bound = cfl_timestep(config) if not any(f.code in ("bad mfd", "bad buffer", "missing mfd") for f in out) else None
        if bound is not None and config.dt > bound * (1 + 1e-12):
            out.append(Finding("CFL", f"dt={config.dt} exceeds the CFL bound {bound:.6g} s", "dt"))

    graph = nx.DiGraph()
    graph.add_nodes_from(declared)
    graph.add_edges_from(p for p in pairs if p[0] in declared and p[1] in declared)
    ta_set = set(dem.arrival_times)
    seen_keys = set()
    for k, e in enumerate(dem.entries):
        loc = f"demand[{k}]"
        if e.origin not in buffers:
            out.append(Finding("unknown region", f"demand origin {e.origin} is not a declared buffer", loc))
            continue
        if e.destination not in dests:
            out.append(Finding("unknown region", f"demand destination {e.destination} is not declared", loc))
            continue
        if e.key in seen_keys:
            out.append(Finding("duplicate demand", f"{e.key} given twice", loc))
        seen_keys.add(e.key)
        if e.t_a not in ta_set:
            out.append(Finding("bad arrival time", f"t_a={e.t_a} not in arrival_times", loc))
        if e.total < 0:
            out.append(Finding("bad demand", "total demand must be >= 0", loc))
        if e.total > 0 and not nx.has_path(graph, e.origin, e.destination):
            out.append(Finding("no path", f"no directed path {e.origin} -> {e.destination}", loc))
        if config.dt > 0 and dem.horizon > 0:
            try:
                _check_profile(e, config.dt, dem.horizon, budget_rtol, loc, out)
            except ValueError as exc:
                out.append(Finding("bad profile", str(exc), loc))

    for k, load in enumerate(config.initial_state):
        loc = f"initial_state[{k}]"
        if load.node not in regions | buffers:
            out.append(Finding("unknown region", f"initial load in undeclared node {load.node}", loc))
        if load.destination not in dests:
            out.append(Finding("unknown region", f"initial load bound to undeclared {load.destination}", loc))
        if load.vehicles < 0:
            out.append(Finding("bad initial state", "negative initial load", loc))

    p = config.penalties
    if p.early_rate < 0 or p.late_rate < 0 or p.plateau < 0:
        out.append(Finding("bad penalty", "early/late rates and plateau must be >= 0", "penalties"))
    for node in list(config.regions) + list(config.buffers):
        if p.tts_weight(node) <= 0:
            out.append(Finding("bad penalty", f"TTS weight of {node} must be > 0", "penalties"))
        if p.terminal_weight(node) < 0:
            out.append(Finding("bad penalty", f"terminal weight of {node} must be >= 0", "penalties"))
    for key in list(p.tts_weights) + list(p.terminal_weights):
        if key not in regions | buffers:
            out.append(Finding("unknown region", f"penalty weight for undeclared {key}", "penalties"))
    return out


def _check_profile(entry, dt, horizon, rtol, loc, out):
    prof = entry.profile
    if isinstance(prof, RateProfile):
        rates = np.asarray(prof.rates, dtype=float)
        if np.any(rates < 0):
            out.append(Finding("bad profile", "negative inflow rate", loc))
        t_start = np.arange(rates.size) * prof.dt
        if np.any(rates[t_start >= horizon - 1e-9] > 0):
            out.append(Finding("bad profile", "inflow after the departure horizon", loc))
        integral = prof.integral()
    else:
        if prof.window[3] > horizon + 1e-9:
            out.append(Finding("bad profile", "trapezoid extends past the departure horizon", loc))
        if abs(prof.total - entry.total) > rtol * max(entry.total, 1.0):
            out.append(Finding("demand budget mismatch", "profile total differs from demand total", loc))
        n = int(math.ceil(horizon / dt - 1e-9))
        integral = float(prof.cell_rates(dt, n).sum() * dt)
    if abs(integral - entry.total) > rtol * max(entry.total, 1.0):
        out.append(Finding("demand budget mismatch",
                           f"profile integrates to {integral:.6g}, demand total is {entry.total:.6g}", loc))


def ensure_valid(config: ScenarioConfig):
    findings = validate_scenario(config)
    if findings:
        msg = "; ".join(str(f) for f in findings[:5])
        raise ScenarioError(f"invalid scenario: {msg}", findings)
    return config


# ---------------------------------------------------------------------------
# JSON serialisation


def _clean(d):
    return {k: v for k, v in d.items() if v is not None}


def scenario_to_dict(config: ScenarioConfig):
    p = config.penalties
    return {
        "name": config.name,
        "units": {"time": "s", "vehicles": "veh", "rates": "veh/s", "length": "m"},
        "regions": list(config.regions),
        "buffers": {b: asdict(v) for b, v in config.buffers.items()},
        "destinations": list(config.destinations),
        "edges": [_clean(asdict(e)) for e in config.edges],
        "mfd": {r: _clean(asdict(c)) for r, c in config.mfd.items()},
        "demand": {
            "arrival_times": list(config.demand.arrival_times),
            "horizon": config.demand.horizon,
            "final_time": config.demand.final_time,
            "entries": [
                {"origin": e.origin, "destination": e.destination, "t_a": e.t_a,
                 "total": e.total, "profile": e.profile.to_dict()}
                for e in config.demand.entries
            ],
        },
        "penalties": {
            "early_rate": p.early_rate, "late_rate": p.late_rate, "plateau": p.plateau,
            "tts_weights": dict(p.tts_weights), "arrival_weights": dict(p.arrival_weights),
            "terminal_weights": dict(p.terminal_weights),
            "default_tts_weight": p.default_tts_weight,
            "default_terminal_weight": p.default_terminal_weight,
            "cost_to_euro": p.cost_to_euro,
        },
        "initial_state": [asdict(x) for x in config.initial_state],
        "flow_model": config.flow_model,
        "origin_model": config.origin_model,
        "dt": config.dt,
    }


def scenario_from_dict(d):
    try:
        mfd = {}
        for r, c in d["mfd"].items():
            if "q_max" in c:
                mfd[r] = MfdCurve(float(c["n_c"]), float(c["n_j"]), float(c["q_max"]),
                                  None if c.get("trip_length") is None else float(c["trip_length"]))
            else:
                mfd[r] = MfdCurve.from_speed(float(c["n_c"]), float(c["n_j"]),
                                             float(c["free_flow_speed"]), float(c["trip_length"]))
        buffers = {b: OriginBuffer(float(v["nu"]), float(v["q_max"])) for b, v in d.get("buffers", {}).items()}
        edges = []
        for e in d["edges"]:
            if isinstance(e, (list, tuple)):
                edges.append(Edge(str(e[0]), str(e[1])))
            else:
                edges.append(Edge(str(e["src"]), str(e["dst"]),
                                  *(None if e.get(k) is None else float(e[k])
                                    for k in ("beta", "q_x", "exit_supply"))))
        dem = d["demand"]
        entries = tuple(
            DemandEntry(str(x["origin"]), str(x["destination"]), float(x["t_a"]), float(x["total"]),
                        profile_from_dict(float(x["total"]), x["profile"]))
            for x in dem["entries"]
        )
        demand = DemandSpec(tuple(float(t) for t in dem["arrival_times"]), float(dem["horizon"]),
                            float(dem["final_time"]), entries)
        p = d.get("penalties", {})
        penalties = PenaltySpec(
            early_rate=float(p.get("early_rate", 0.0)), late_rate=float(p.get("late_rate", 0.0)),
            plateau=float(p.get("plateau", 0.0)),
            tts_weights={k: float(v) for k, v in p.get("tts_weights", {}).items()},
            arrival_weights={k: float(v) for k, v in p.get("arrival_weights", {}).items()},
            terminal_weights={k: float(v) for k, v in p.get("terminal_weights", {}).items()},
            default_tts_weight=float(p.get("default_tts_weight", 1.0)),
            default_terminal_weight=float(p.get("default_terminal_weight", 0.0)),
            cost_to_euro=float(p.get("cost_to_euro", 1.0)),
        )
        init = tuple(InitialLoad(str(x["node"]), str(x["destination"]), float(x["t_a"]), float(x["vehicles"]))
                     for x in d.get("initial_state", []))
        return ScenarioConfig(
            regions=tuple(str(r) for r in d["regions"]), edges=tuple(edges), mfd=mfd,
            buffers=buffers, destinations=tuple(str(x) for x in d.get("destinations", [])),
            demand=demand, penalties=penalties, dt=float(d["dt"]),
            flow_model=_flow_model_name(d.get("flow_model", "strada")),
            origin_model=_origin_model_name(d.get("origin_model", "buffer")),
            initial_state=init, name=str(d.get("name", "")),
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario document: missing or bad field {exc}") from exc


def _flow_model_name(s):
    return {"kkt": "kkt_optimization"}.get(s, s)


def _origin_model_name(s):
    return {"queue": "homogeneous_queue"}.get(s, s)


def load_scenario(path):
    with open(path, encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))


def save_scenario(config: ScenarioConfig, path):
    Path(path).write_text(json.dumps(scenario_to_dict(config), indent=1), encoding="utf-8")


def demand_keys(entries: Iterable[DemandEntry]):
    return [e.key for e in entries]
