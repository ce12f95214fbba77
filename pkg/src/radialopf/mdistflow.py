"""Closed-form power flow in power-to-voltage ratio variables.

State variables are the modified injections p_hat = P * w and flows, with the
auxiliary per-bus variable w = 2 - V. For fixed injections the whole state
follows from one sparse linear solve; no iteration is involved. The module
also recovers bus angles branch-by-branch and computes the total network loss
with its four-way split into active/reactive flow contributions.

Alignment: full-bus arrays (w, v, delta) follow ``net.buses`` order;
per-non-slack and per-branch arrays follow ``ti.order`` / the matching branch
rows of the path incidence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .netmodel import Network, PathIncidence, bus_positions


class MdfError(RuntimeError):
    """Raised when the closed-form solve or state assembly fails."""


#: residual tolerance for solver-produced states
STATE_RESIDUAL_TOL = 1e-6


@dataclass(frozen=True)
class MdfState:
    w: np.ndarray
    v: np.ndarray
    delta: np.ndarray
    p_hat: np.ndarray
    q_hat: np.ndarray
    p_br_hat: np.ndarray
    q_br_hat: np.ndarray


@dataclass(frozen=True)
class LossReport:
    """Total losses and their decomposition by driving flow.

    ``pl_p`` is the active loss from active-power flows, ``pl_q`` the active
    loss from reactive flows; ``ql_p``/``ql_q`` are the reactive analogues.
    """

    pl: float
    ql: float
    pl_p: float
    pl_q: float
    ql_p: float
    ql_q: float


def system_matrix(ti: PathIncidence, p: np.ndarray, q: np.ndarray) -> sp.csc_matrix:
    """I + T' R T diag(p) + T' X T diag(q) for fixed injections p, q."""
    t = ti.t
    a = t.T @ sp.diags(ti.r) @ t @ sp.diags(p)
    a = a + t.T @ sp.diags(ti.x) @ t @ sp.diags(q)
    return (sp.identity(ti.n, format="csc") + a).tocsc()


def _assemble(net, ti, w_r, p_hat, q_hat):
    pos = bus_positions(net)
    n_all = net.n_bus
    w = np.empty(n_all)
    w0 = 2.0 - net.v0
    w[pos[net.slack]] = w0
    for i, bus_id in enumerate(ti.order):
        w[pos[bus_id]] = w_r[i]
    v = 2.0 - w
    p_br = -(ti.t @ p_hat)
    q_br = -(ti.t @ q_hat)
    delta = _angles(net, ti, v, p_br, q_br)
    return MdfState(
        w=w, v=v, delta=delta,
        p_hat=p_hat, q_hat=q_hat, p_br_hat=p_br, q_br_hat=q_br,
    )


def solve_fixed_load(
    net: Network,
    ti: PathIncidence,
    p: np.ndarray | None = None,
    q: np.ndarray | None = None,
) -> MdfState:
    """Closed-form solve with fixed net injections (default: minus the loads).

    ``p``/``q`` follow ``ti.order``; generators at fixed setpoints should be
    folded into them (see ``netmodel.net_injections``).
    """
    if p is None:
        p = np.array([-net.bus(b).p_load for b in ti.order])
    if q is None:
        q = np.array([-net.bus(b).q_load for b in ti.order])
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    a = system_matrix(ti, p, q)
    w0 = 2.0 - net.v0
    rhs = np.full(ti.n, w0)
    try:
        lu = spla.splu(a)
        w_r = lu.solve(rhs)
    except RuntimeError as exc:
        raise MdfError(f"singular modified power-flow matrix: {exc}") from exc
    if not np.all(np.isfinite(w_r)):
        raise MdfError("singular modified power-flow matrix (non-finite solution)")
    resid = np.max(np.abs(a @ w_r - rhs))
    if resid > 1e-8 * max(1.0, np.max(np.abs(w_r))):
        raise MdfError(
            f"ill-conditioned modified power-flow matrix: solve residual {resid:.3e}"
        )
    return _assemble(net, ti, w_r, p * w_r, q * w_r)


def state_from_solution(
    net: Network,
    ti: PathIncidence,
    p_hat_r: np.ndarray,
    q_hat_r: np.ndarray,
    w_r: np.ndarray,
    tol: float = STATE_RESIDUAL_TOL,
) -> MdfState:
    """Assemble a full state from solver variables, enforcing the voltage-drop
    identity w = w0 - T'R T p_hat - T'X T q_hat within ``tol``."""
    p_hat_r = np.asarray(p_hat_r, dtype=float)
    q_hat_r = np.asarray(q_hat_r, dtype=float)
    w_r = np.asarray(w_r, dtype=float)
    w0 = 2.0 - net.v0
    t = ti.t
    w_expect = w0 - t.T @ (ti.r * (t @ p_hat_r)) - t.T @ (ti.x * (t @ q_hat_r))
    resid = float(np.max(np.abs(w_r - w_expect))) if ti.n else 0.0
    if resid > tol:
        raise MdfError(
            f"solution inconsistent with voltage-drop identity: "
            f"max residual {resid:.3e} exceeds {tol:.1e}"
        )
    return _assemble(net, ti, w_r, p_hat_r, q_hat_r)


def _angles(net, ti, v_full, p_br, q_br):
    pos = bus_positions(net)
    delta = np.empty(net.n_bus)
    delta[pos[net.slack]] = 0.0
    # ti.order is topological, so parents are settled before children
    for i, bus_id in enumerate(ti.order):
        pp = ti.parent_pos[i]
        d_parent = delta[pos[net.slack]] if pp < 0 else delta[pos[ti.order[pp]]]
        vj = v_full[pos[bus_id]]
        arg = (ti.x[i] * p_br[i] - ti.r[i] * q_br[i]) / vj
        if abs(arg) > 1.0:
            raise MdfError(
                f"angle recovery infeasible at bus {bus_id}: |sin| = {abs(arg):.4f}"
            )
        delta[pos[bus_id]] = d_parent - np.arcsin(arg)
    return delta


def recover_angles(net: Network, ti: PathIncidence, state: MdfState) -> np.ndarray:
    """Per-bus angles (rad) accumulated root-to-leaf from the branch flows."""
    return _angles(net, ti, state.v, state.p_br_hat, state.q_br_hat)


def losses(ti: PathIncidence, state: MdfState) -> LossReport:
    """Quadratic network-loss totals with the four-way P/Q decomposition."""
    fp2 = state.p_br_hat ** 2
    fq2 = state.q_br_hat ** 2
    pl_p = float(ti.r @ fp2)
    pl_q = float(ti.r @ fq2)
    ql_p = float(ti.x @ fp2)
    ql_q = float(ti.x @ fq2)
    return LossReport(
        pl=pl_p + pl_q, ql=ql_p + ql_q,
        pl_p=pl_p, pl_q=pl_q, ql_p=ql_p, ql_q=ql_q,
    )
