"""Convex quadratic OPF, nodal pricing and loss allocation for radial feeders.

Typical flow: parse a case, build the path incidence, solve the dispatch,
recover the physical state, price it:

    from radialopf import netmodel, mdopf, qcqpsolver, pricing

    net = netmodel.load_case("case33.m")
    ti = netmodel.build_path_incidence(net)
    prob = mdopf.build(net, ti)
    sol = qcqpsolver.solve(prob)
    sol, state = mdopf.recover_dispatch(net, ti, prob, sol)
    table = pricing.compute_price_table(net, ti, state)
"""

from . import acpf, cli, mdistflow, mdopf, netmodel, pricing, qcqpsolver
from .netmodel import (
    Branch,
    Bus,
    Generator,
    Network,
    NetworkError,
    PathIncidence,
    build_path_incidence,
    duplicate_system,
    load_case,
    parse_matpower_case,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "acpf", "cli", "mdistflow", "mdopf", "netmodel", "pricing", "qcqpsolver",
    "Branch", "Bus", "Generator", "Network", "NetworkError", "PathIncidence",
    "build_path_incidence", "duplicate_system", "load_case",
    "parse_matpower_case", "validate",
]
