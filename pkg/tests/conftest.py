from __future__ import annotations

import math

import pytest

from gridvvo.caseio import load_network
from gridvvo.cases import bundled_case, locate_case
from gridvvo.network import Branch, Bus, Generator, Network, ShuntDevice

ACCEPTANCE_LINES: list[str] = []


def two_bus(
    pd: float = 1.0,
    qd: float = 0.0,
    r: float = 0.0,
    x: float = 0.1,
    shunts: tuple[ShuntDevice, ...] = (),
    gen_cost=(0.0, 1.0, 0.0),
) -> Network:
    """Slack bus 0 feeding a load at bus 1 through one series branch."""
    y = 1.0 / complex(r, x)
    return Network(
        buses=(
            Bus(0, 100.0, 0.9, 1.1, 0.0, 0.0, is_slack=True),
            Bus(1, 100.0, 0.9, 1.1, pd, qd),
        ),
        generators=(Generator(0, 0.0, 20.0, -20.0, 20.0, gen_cost),),
        branches=(Branch(0, 1, y, -y, -y, y),),
        shunts=shunts,
        name="two_bus",
    )


def record_acceptance(number: int, passed: bool, detail: str) -> str:
    line = f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def case4():
    return load_network(bundled_case("case4_vvo"))


@pytest.fixture(scope="session")
def case118():
    loc = locate_case("118_ieee")
    if loc is None:
        pytest.skip("no 118-bus case file available")
    return load_network(loc.path)


@pytest.fixture(scope="session")
def ref118(case118):
    from gridvvo.vvo import solve_reference_acopf

    return solve_reference_acopf(case118)


@pytest.fixture
def two_bus_net():
    return two_bus()


# closed form of the 2-bus power flow (slack 1∠0, x = 0.1, pd = 1, qd = 0):
# v2^2 = (1 + sqrt(1 - 4 x^2 pd^2)) / 2 and sin(theta2) = -pd x / v2
V2_EXACT = math.sqrt((1.0 + math.sqrt(1.0 - 0.04)) / 2.0)
THETA2_EXACT = -math.asin(0.1 / V2_EXACT)
