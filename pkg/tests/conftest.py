import importlib.resources

import pytest

from radialopf import netmodel


TWO_BUS_CASE = """
mpc.baseMVA = 1;
mpc.bus = [
 1 3 0 0 0 0 1 1.0 0 12.66 1 1.1 0.9;
 2 1 1.0 0 0 0 1 1.0 0 12.66 1 1.1 0.9;
];
mpc.branch = [ 1 2 0.01 0.02 0 0; ];
mpc.gen = [ 1 0 0 10 -10 1 1 1 10 0; ];
mpc.gencost = [ 2 0 0 2 30 0; ];
"""


def case_text(name: str) -> str:
    return (importlib.resources.files("radialopf") / "cases" / name).read_text()


@pytest.fixture(scope="session")
def case33():
    return netmodel.parse_matpower_case(case_text("case33.m"))


@pytest.fixture(scope="session")
def case69():
    return netmodel.parse_matpower_case(case_text("case69.m"))


@pytest.fixture(scope="session")
def net2():
    """Two-bus feeder: 1 pu active load behind r=0.01, x=0.02."""
    return netmodel.with_slack_costs(
        netmodel.parse_matpower_case(TWO_BUS_CASE), 30.0, 3.0
    )


@pytest.fixture(scope="session")
def case33_psp(case33):
    """33-bus case at the study supply point: V0 = 1.05, prices 30/3."""
    net = netmodel.with_slack_voltage(case33, 1.05)
    return netmodel.with_slack_costs(net, 30.0, 3.0)
