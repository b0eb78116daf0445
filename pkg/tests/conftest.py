import numpy as np
import pytest

# One line per acceptance criterion, printed at the end of the session.
ACCEPTANCE: dict[int, str] = {}

from rse.measurements import Meter, MeasurementPlan, flows_and_voltages_plan, measurement_matrices
from rse.network import Line, Network, builtin_case


@pytest.fixture(scope="session")
def net30():
    return builtin_case("ieee30")


@pytest.fixture(scope="session")
def plan30(net30):
    return flows_and_voltages_plan(net30)


@pytest.fixture(scope="session")
def coeffs30(net30, plan30):
    return measurement_matrices(net30, plan30)


def two_bus(y=1 - 2j, shunt_from=0j, shunt_to=0j, ground=(0j, 0j)):
    return Network(2, (Line(1, 2, y, shunt_from, shunt_to),), np.array(ground, dtype=complex))


def random_complex(rng, n):
    return rng.normal(1.0, 0.2, n) * np.exp(1j * rng.uniform(-np.pi, np.pi, n))


def full_plan(net):
    """Every kind: injections and voltages at all buses, flows at both ends of every line."""
    meters = []
    for n in range(1, net.n_buses + 1):
        meters += [Meter("inj_p", n), Meter("inj_q", n), Meter("vmagsq", n)]
    for line in net.lines:
        for m, n in ((line.from_bus, line.to_bus), (line.to_bus, line.from_bus)):
            meters += [Meter("flow_p", m, n), Meter("flow_q", m, n)]
    return MeasurementPlan(tuple(meters), np.full(len(meters), 0.01))


def report(criterion: int, ok: bool, detail: str):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
