import numpy as np
import pytest

from mfd_dso.network import compile_network
from mfd_dso.presets import scenario_chain4, scenario_single_od
from mfd_dso.scenario import (DemandEntry, DemandSpec, Edge, InitialLoad, MfdCurve, OriginBuffer,
                              PenaltySpec, RateProfile, ScenarioConfig)


def two_region_loop(n0=50.0, dt=1.0, t_f=1000.0):
    """Regions A and B feeding each other, no demand and no usable exit; vehicles circulate."""
    curve = MfdCurve(n_c=100.0, n_j=400.0, q_max=1.0)
    demand = DemandSpec((t_f,), 1.0, t_f, (DemandEntry("O", "D", t_f, 0.0, RateProfile((0.0,), 1.0)),))
    edges = (Edge("O", "A"), Edge("A", "B"), Edge("B", "A"), Edge("B", "D", exit_supply=0.0))
    return ScenarioConfig(regions=("A", "B"), edges=edges, mfd={"A": curve, "B": curve},
                          buffers={"O": OriginBuffer(nu=10.0, q_max=1.0)}, destinations=("D",),
                          demand=demand, penalties=PenaltySpec(), dt=dt,
                          initial_state=(InitialLoad("A", "D", t_f, n0), InitialLoad("B", "D", t_f, 0.3 * n0)))


@pytest.fixture
def chain4():
    return compile_network(scenario_chain4())


@pytest.fixture
def single_od():
    return compile_network(scenario_single_od())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# Acceptance report and session-wide conservation record

ACCEPTANCE_LINES = {}
CONSERVATION = {"runs": 0, "worst_rel": 0.0, "worst_drift": 0.0}


def record_acceptance(number, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES[str(number)] = line
    print(line)
    return passed


@pytest.fixture(autouse=True, scope="session")
def _watch_conservation():
    import mfd_dso.dynamics as dyn

    original = dyn.check_conservation

    def watched(traj, rtol=1e-9):
        err, drift = original(traj, rtol)
        CONSERVATION["runs"] += 1
        CONSERVATION["worst_rel"] = max(CONSERVATION["worst_rel"], err / max(traj.net.total_demand, 1.0))
        CONSERVATION["worst_drift"] = max(CONSERVATION["worst_drift"], drift)
        return err, drift

    dyn.check_conservation = watched
    yield
    dyn.check_conservation = original


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
    if CONSERVATION["runs"]:
        terminalreporter.write_line(
            f"conservation over all {CONSERVATION['runs']} checked simulations of this session: "
            f"worst error {CONSERVATION['worst_rel']:.2e} x total demand, "
            f"worst class drift {CONSERVATION['worst_drift']:.2e} veh")
