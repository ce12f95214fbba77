"""Exact AC power flow in polar form.

Serves as the ground-truth oracle for the approximate feeder models: it
benchmarks voltages and losses, supplies the power-flow Jacobian blocks and
voltage sensitivities used by the marginal-loss pricing chain, and implements
the finite-difference price oracle (slack-cost derivative under load
perturbation).

Array conventions: full-bus vectors follow ``net.buses`` order; "non-slack"
vectors follow ``net.buses`` order with the slack row removed (see
``nonslack_ids``). All quantities per unit on the network base.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse import csgraph

from .netmodel import Network, bus_positions


class PowerFlowError(RuntimeError):
    """Raised when Newton-Raphson fails to converge or the Jacobian is singular."""


class OracleError(RuntimeError):
    """Raised when a finite-difference oracle evaluation cannot be completed."""


@dataclass(frozen=True)
class AcState:
    v: np.ndarray
    delta: np.ndarray
    slack_p: float
    slack_q: float
    pl_exact: float
    ql_exact: float
    iterations: int
    max_mismatch: float


@dataclass(frozen=True)
class JacobianBlocks:
    """Polar power-flow Jacobian over the non-slack buses."""

    dp_ddelta: np.ndarray
    dp_dv: np.ndarray
    dq_ddelta: np.ndarray
    dq_dv: np.ndarray
    bus_ids: tuple[int, ...]


def nonslack_ids(net: Network) -> tuple[int, ...]:
    return tuple(b.id for b in net.buses if b.id != net.slack)


def admittance(net: Network) -> sp.csr_matrix:
    """Bus admittance matrix (series branch elements only)."""
    pos = bus_positions(net)
    n = net.n_bus
    rows, cols, vals = [], [], []
    for br in net.branches:
        y = 1.0 / complex(br.r, br.x)
        f, t = pos[br.from_bus], pos[br.to_bus]
        rows += [f, t, f, t]
        cols += [f, t, t, f]
        vals += [y, y, -y, -y]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def default_injections(net: Network) -> tuple[np.ndarray, np.ndarray]:
    """Net injections (pu) with all generation off: minus the loads, per
    non-slack bus."""
    p = np.array([-b.p_load for b in net.buses if b.id != net.slack])
    q = np.array([-b.q_load for b in net.buses if b.id != net.slack])
    return p, q


def _branch_losses(net: Network, vc: np.ndarray) -> tuple[float, float]:
    pos = bus_positions(net)
    pl = 0.0
    ql = 0.0
    for br in net.branches:
        z = complex(br.r, br.x)
        i = (vc[pos[br.from_bus]] - vc[pos[br.to_bus]]) / z
        i2 = (i * i.conjugate()).real
        pl += br.r * i2
        ql += br.x * i2
    return pl, ql


def newton_pf(
    net: Network,
    p: np.ndarray | None = None,
    q: np.ndarray | None = None,
    v_start: np.ndarray | None = None,
    delta_start: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 30,
) -> AcState:
    """Solve the AC power flow with fixed PQ injections at every non-slack bus.

    ``p``/``q`` default to the negated loads. ``v_start``/``delta_start``
    (full-bus order) warm-start the iteration; the default is a flat start at
    the slack voltage.
    """
    pos = bus_positions(net)
    n = net.n_bus
    slack_pos = pos[net.slack]
    pq = np.array([i for i in range(n) if i != slack_pos])
    if p is None or q is None:
        dp, dq = default_injections(net)
        p = dp if p is None else p
        q = dq if q is None else q
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (n - 1,) or q.shape != (n - 1,):
        raise ValueError("injection vectors must cover every non-slack bus")

    ybus = admittance(net)
    vm = np.full(n, net.v0) if v_start is None else np.array(v_start, dtype=float)
    va = np.zeros(n) if delta_start is None else np.array(delta_start, dtype=float)
    vm[slack_pos] = net.v0
    va[slack_pos] = 0.0
    s_spec = np.zeros(n, dtype=complex)
    s_spec[pq] = p + 1j * q

    def mismatch(vc):
        s_calc = vc * np.conj(ybus.dot(vc))
        mis = s_calc - s_spec
        return np.concatenate([mis[pq].real, mis[pq].imag])

    vc = vm * np.exp(1j * va)
    f = mismatch(vc)
    it = 0
    while np.max(np.abs(f)) >= tol:
        if it >= max_iter:
            raise PowerFlowError(
                f"power flow diverged: mismatch {np.max(np.abs(f)):.3e} "
                f"after {max_iter} iterations"
            )
        j11, j12, j21, j22 = _jacobian_sparse(ybus, vc, pq)
        jac = sp.bmat([[j11, j12], [j21, j22]], format="csc")
        try:
            dx = spla.spsolve(jac, -f)
        except RuntimeError as exc:
            raise PowerFlowError(f"singular power-flow Jacobian: {exc}") from exc
        if not np.all(np.isfinite(dx)):
            raise PowerFlowError("singular power-flow Jacobian (non-finite step)")
        m = len(pq)
        va[pq] += dx[:m]
        vm[pq] += dx[m:]
        vc = vm * np.exp(1j * va)
        f = mismatch(vc)
        it += 1

    s_slack = (vc * np.conj(ybus.dot(vc)))[slack_pos]
    pl, ql = _branch_losses(net, vc)
    return AcState(
        v=vm, delta=va,
        slack_p=float(s_slack.real), slack_q=float(s_slack.imag),
        pl_exact=pl, ql_exact=ql,
        iterations=it, max_mismatch=float(np.max(np.abs(f))),
    )


def _jacobian_sparse(ybus, vc, pq):
    """Blocks of dS/d(angle), dS/d|V| restricted to the given buses."""
    n = len(vc)
    ibus = ybus.dot(vc)
    dv = sp.diags(vc)
    di = sp.diags(ibus)
    dvnorm = sp.diags(vc / np.abs(vc))
    ds_dva = 1j * dv @ (np.conj(di - ybus @ dv))
    ds_dvm = dv @ np.conj(ybus @ dvnorm) + np.conj(di) @ dvnorm
    ds_dva = sp.csr_matrix(ds_dva)[pq][:, pq]
    ds_dvm = sp.csr_matrix(ds_dvm)[pq][:, pq]
    return ds_dva.real, ds_dvm.real, ds_dva.imag, ds_dvm.imag


def jacobian_at(net: Network, v: np.ndarray, delta: np.ndarray) -> JacobianBlocks:
    """Assemble the Jacobian blocks at an arbitrary operating point
    (not necessarily a converged one)."""
    pos = bus_positions(net)
    slack_pos = pos[net.slack]
    pq = np.array([i for i in range(net.n_bus) if i != slack_pos])
    vc = np.asarray(v, dtype=float) * np.exp(1j * np.asarray(delta, dtype=float))
    j11, j12, j21, j22 = _jacobian_sparse(admittance(net), vc, pq)
    ids = tuple(net.buses[i].id for i in pq)
    return JacobianBlocks(
        dp_ddelta=j11.toarray(), dp_dv=j12.toarray(),
        dq_ddelta=j21.toarray(), dq_dv=j22.toarray(),
        bus_ids=ids,
    )


def voltage_sensitivities(jb: JacobianBlocks) -> tuple[np.ndarray, np.ndarray]:
    """Sensitivities of non-slack voltage magnitudes to injections.

    Returns (dV/dP, dV/dQ), the lower blocks of the inverse reduced Jacobian;
    entry [i, j] is the response of V_i to a unit active (reactive) injection
    at bus j. Feeders hanging off the slack independently give a
    block-diagonal Jacobian, so the inverse is taken per connected component.
    """
    m = len(jb.bus_ids)
    coupling = (
        np.abs(jb.dp_ddelta) + np.abs(jb.dp_dv)
        + np.abs(jb.dq_ddelta) + np.abs(jb.dq_dv)
    )
    n_comp, labels = csgraph.connected_components(
        sp.csr_matrix(coupling + coupling.T), directed=False
    )
    dv_dp = np.zeros((m, m))
    dv_dq = np.zeros((m, m))
    for comp in range(n_comp):
        idx = np.flatnonzero(labels == comp)
        k = len(idx)
        jac = np.block([
            [jb.dp_ddelta[np.ix_(idx, idx)], jb.dp_dv[np.ix_(idx, idx)]],
            [jb.dq_ddelta[np.ix_(idx, idx)], jb.dq_dv[np.ix_(idx, idx)]],
        ])
        try:
            jinv = np.linalg.inv(jac)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular reduced Jacobian: {exc}") from exc
        dv_dp[np.ix_(idx, idx)] = jinv[k:, :k]
        dv_dq[np.ix_(idx, idx)] = jinv[k:, k:]
    return dv_dp, dv_dq


def slack_costs(net: Network) -> tuple[float, float]:
    g = net.bus(net.slack).gen
    if g is None:
        raise OracleError("slack bus has no generator (supply-point costs unknown)")
    return g.cost_p, g.cost_q


def fd_price_oracle(
    net: Network,
    bus: int,
    axis: str = "p",
    eps: float = 1e-5,
    p: np.ndarray | None = None,
    q: np.ndarray | None = None,
    v_start: np.ndarray | None = None,
    delta_start: np.ndarray | None = None,
) -> float:
    """Marginal cost of load at ``bus`` in $/MWh ($/MVarh), by central
    finite difference of the slack generation cost over two AC solves.

    ``p``/``q`` fix the base-point injections (defaults: negated loads); all
    non-slack generation is held at that base point, so the slack absorbs the
    perturbation, matching the no-congestion marginal-unit assumption.
    """
    if axis not in ("p", "q"):
        raise ValueError("axis must be 'p' or 'q'")
    if bus == net.slack:
        raise ValueError("price oracle is defined for non-slack buses")
    c0p, c0q = slack_costs(net)
    ids = nonslack_ids(net)
    k = ids.index(bus)
    if p is None or q is None:
        dp, dq = default_injections(net)
        p = dp if p is None else np.asarray(p, dtype=float)
        q = dq if q is None else np.asarray(q, dtype=float)
    costs = []
    for sign in (+1.0, -1.0):
        pp = np.array(p, dtype=float)
        qq = np.array(q, dtype=float)
        # a load increment is an injection decrement
        if axis == "p":
            pp[k] -= sign * eps
        else:
            qq[k] -= sign * eps
        try:
            st = newton_pf(net, pp, qq, v_start=v_start, delta_start=delta_start)
        except PowerFlowError as exc:
            raise OracleError(f"oracle power flow failed at bus {bus}: {exc}") from exc
        costs.append(c0p * st.slack_p + c0q * st.slack_q)
    return (costs[0] - costs[1]) / (2.0 * eps)
