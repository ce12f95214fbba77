"""Convex quadratic OPF builder for radial feeders.

Variables are the ratio-form quantities of the modified power-flow model:
per-bus W and V, modified injections, modified branch flows, and modified
generator outputs. All constraints are linear except the per-branch thermal
limits, which are diagonal quadratic rows. The objective is the generation
cost with the voltage weights eliminated through the closed-form affine
voltage map, which leaves a quadratic form over the generator variables.

The raw cost quadratic is certified for positive semidefiniteness; when the
certificate fails (which happens for generic P/Q cost ratios, see
``certify_convexity``), the builder replaces it with its nearest PSD matrix
in Frobenius norm and warns. The projection is tiny relative to the linear
cost terms and is validated against dispatch benchmarks in the test suite.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import mdistflow
from .netmodel import Network, PathIncidence, bus_positions
from .qcqpsolver import OpfSolution, QcqpProblem


class MdopfError(RuntimeError):
    """Raised when the OPF cannot be assembled for the given network."""


@dataclass(frozen=True)
class ConvexityCertificate:
    """Outcome of the numerical PSD check plus the cost-trace signal.

    ``trace_condition`` is the sufficient-condition proxy (positive trace of
    the cost quadratic); the numerical ``psd`` verdict is authoritative.
    """

    psd: bool
    min_eigenvalue: float
    trace: float
    trace_condition: bool


def gen_buses(net: Network, ti: PathIncidence) -> list[int]:
    """Generator buses, slack first, then in path order."""
    out = []
    if net.bus(net.slack).gen is not None:
        out.append(net.slack)
    out.extend(b for b in ti.order if net.bus(b).gen is not None)
    return out


def _var_layout(net: Network, ti: PathIncidence) -> dict[str, int]:
    names: list[str] = []
    all_buses = [net.slack, *ti.order]
    for prefix in ("W", "V", "Pinj", "Qinj"):
        names.extend(f"{prefix}:{b}" for b in all_buses)
    for i in range(ti.n):
        pp = ti.parent_pos[i]
        parent = net.slack if pp < 0 else ti.order[pp]
        names.append(f"Pbr:{parent}-{ti.order[i]}")
    for i in range(ti.n):
        pp = ti.parent_pos[i]
        parent = net.slack if pp < 0 else ti.order[pp]
        names.append(f"Qbr:{parent}-{ti.order[i]}")
    for b in gen_buses(net, ti):
        names.append(f"Pg:{b}")
    for b in gen_buses(net, ti):
        names.append(f"Qg:{b}")
    return {name: i for i, name in enumerate(names)}


def certify_convexity(h: sp.spmatrix | np.ndarray) -> ConvexityCertificate:
    """Numerical PSD certificate for a symmetric quadratic-form matrix.

    Checks the eigenvalues of the restriction to the nonzero support with
    tolerance -1e-10 * ||H||; reports the minimum eigenvalue and the
    trace-positivity signal alongside the verdict.
    """
    hc = sp.csr_matrix(h)
    trace = float(hc.diagonal().sum())
    if hc.nnz == 0:
        return ConvexityCertificate(True, 0.0, trace, trace > 0.0)
    support = np.unique(np.concatenate(hc.nonzero()))
    dense = hc[support][:, support].toarray()
    if not np.allclose(dense, dense.T, rtol=0.0, atol=1e-12 * max(1.0, abs(dense).max())):
        raise MdopfError("convexity certificate requires a symmetric matrix")
    min_eig = float(np.linalg.eigvalsh(0.5 * (dense + dense.T))[0])
    tol = 1e-10 * max(1.0, float(abs(hc).max()))
    return ConvexityCertificate(min_eig >= -tol, min_eig, trace, trace > 0.0)


def psd_projection(h: sp.spmatrix) -> sp.csr_matrix:
    """Frobenius-nearest PSD matrix: eigenvalues clipped at zero on the
    nonzero support."""
    hc = sp.csr_matrix(h)
    if hc.nnz == 0:
        return hc
    support = np.unique(np.concatenate(hc.nonzero()))
    dense = hc[support][:, support].toarray()
    dense = 0.5 * (dense + dense.T)
    vals, vecs = np.linalg.eigh(dense)
    clipped = (vecs * np.maximum(vals, 0.0)) @ vecs.T
    clipped[np.abs(clipped) < 1e-14 * max(1.0, abs(clipped).max())] = 0.0
    out = sp.lil_matrix(hc.shape)
    out[np.ix_(support, support)] = clipped
    return out.tocsr()


def build_objective(
    net: Network, ti: PathIncidence
) -> tuple[sp.csr_matrix, np.ndarray, float]:
    """Exact cost terms over the problem variables: returns (H, g, c) with the
    objective x'Hx + g'x + c in $ per hour.

    The linear part carries the slack cost (at the fixed slack voltage) and
    the generator costs weighted by the load-only voltage profile; H is the
    symmetrized quadratic left by the affine voltage response to generation.
    """
    var = _var_layout(net, ti)
    n_vars = len(var)
    base = net.base_power
    g = np.zeros(n_vars)
    slack_gen = net.bus(net.slack).gen
    if slack_gen is None:
        raise MdopfError("supply point has no generator")
    g[var[f"Pg:{net.slack}"]] = net.v0 * slack_gen.cost_p * base
    g[var[f"Qg:{net.slack}"]] = net.v0 * slack_gen.cost_q * base

    dg = [b for b in gen_buses(net, ti) if b != net.slack]
    if dg:
        try:
            load_state = mdistflow.solve_fixed_load(net, ti)
        except mdistflow.MdfError as exc:
            raise MdopfError(f"load-only voltage profile unavailable: {exc}") from exc
        pos = bus_positions(net)
        vd = {b: load_state.v[pos[b]] for b in dg}
        order_pos = {b: i for i, b in enumerate(ti.order)}
        cols = [order_pos[b] for b in dg]
        cp = np.array([net.bus(b).gen.cost_p for b in dg])
        cq = np.array([net.bus(b).gen.cost_q for b in dg])
        for b in dg:
            gen = net.bus(b).gen
            g[var[f"Pg:{b}"]] = vd[b] * gen.cost_p * base
            g[var[f"Qg:{b}"]] = vd[b] * gen.cost_q * base
        t_g = ti.t[:, cols]
        a_g = (t_g.T @ sp.diags(ti.r) @ t_g).toarray()
        b_g = (t_g.T @ sp.diags(ti.x) @ t_g).toarray()
        m = np.block([[a_g * cp, a_g * cq], [b_g * cp, b_g * cq]]) * base
        block = 0.5 * (m + m.T)
        idx = [var[f"Pg:{b}"] for b in dg] + [var[f"Qg:{b}"] for b in dg]
        h = sp.lil_matrix((n_vars, n_vars))
        h[np.ix_(idx, idx)] = block
        h = h.tocsr()
    else:
        h = sp.csr_matrix((n_vars, n_vars))
    return h, g, 0.0


def build(
    net: Network,
    ti: PathIncidence,
    thermal: str = "auto",
) -> QcqpProblem:
    """Assemble the OPF as a convex QCQP.

    ``thermal``: "auto" adds a quadratic flow limit on every branch with a
    current rating, "off" ignores ratings. Raises on negative generator costs
    (the convexity precondition) or a missing supply-point generator.
    """
    if thermal not in ("auto", "off"):
        raise ValueError("thermal must be 'auto' or 'off'")
    for b in net.buses:
        if b.gen is not None and (b.gen.cost_p < 0 or b.gen.cost_q < 0):
            raise MdopfError(
                f"convexity condition unsatisfied: negative generator cost at bus {b.id}"
            )
    var = _var_layout(net, ti)
    n_vars = len(var)
    glist = gen_buses(net, ti)
    gset = set(glist)

    h_exact, g, c = build_objective(net, ti)
    cert = certify_convexity(h_exact)
    if not cert.psd:
        h = psd_projection(h_exact)
        warnings.warn(
            "cost quadratic is indefinite "
            f"(min eigenvalue {cert.min_eigenvalue:.3e}); "
            "projected onto the PSD cone",
            RuntimeWarning,
            stacklevel=2,
        )
    else:
        h = h_exact
    if not cert.trace_condition:
        warnings.warn(
            "cost-trace condition fails; proceeding on the numerical certificate",
            RuntimeWarning,
            stacklevel=2,
        )

    rows: list[tuple[dict[int, float], float, str]] = []
    all_buses = [net.slack, *ti.order]

    def add(coeffs: dict[int, float], rhs: float, label: str):
        rows.append((coeffs, rhs, label))

    add({var[f"V:{net.slack}"]: 1.0}, net.v0, "v_slack")
    for b in all_buses:
        add({var[f"V:{b}"]: 1.0, var[f"W:{b}"]: 1.0}, 2.0, f"v_def:{b}")

    children: dict[int, list[int]] = {-1: []}
    for i in range(ti.n):
        children.setdefault(ti.parent_pos[i], []).append(i)
        children.setdefault(i, [])
    for axis, brkey, injkey in (("p", "Pbr", "Pinj"), ("q", "Qbr", "Qinj")):
        coeffs = {var[f"{injkey}:{net.slack}"]: 1.0}
        for j in children[-1]:
            coeffs[var[_brname(net, ti, brkey, j)]] = -1.0
        add(coeffs, 0.0, f"{axis}_balance:{net.slack}")
        for i, bus_id in enumerate(ti.order):
            coeffs = {
                var[_brname(net, ti, brkey, i)]: 1.0,
                var[f"{injkey}:{bus_id}"]: 1.0,
            }
            for j in children[i]:
                coeffs[var[_brname(net, ti, brkey, j)]] = -1.0
            add(coeffs, 0.0, f"{axis}_balance:{bus_id}")

    for i, bus_id in enumerate(ti.order):
        pp = ti.parent_pos[i]
        parent = net.slack if pp < 0 else ti.order[pp]
        add(
            {
                var[f"W:{bus_id}"]: 1.0,
                var[f"W:{parent}"]: -1.0,
                var[_brname(net, ti, "Pbr", i)]: -ti.r[i],
                var[_brname(net, ti, "Qbr", i)]: -ti.x[i],
            },
            0.0,
            f"w_drop:{parent}-{bus_id}",
        )

    for b in all_buses:
        bus = net.bus(b)
        coeffs = {var[f"Pinj:{b}"]: 1.0, var[f"W:{b}"]: bus.p_load}
        if b in gset:
            coeffs[var[f"Pg:{b}"]] = -1.0
        add(coeffs, 0.0, f"p_inj_def:{b}")
    for b in all_buses:
        bus = net.bus(b)
        coeffs = {var[f"Qinj:{b}"]: 1.0, var[f"W:{b}"]: bus.q_load}
        if b in gset:
            coeffs[var[f"Qg:{b}"]] = -1.0
        add(coeffs, 0.0, f"q_inj_def:{b}")

    a_eq, b_eq, eq_labels = _stack_rows(rows, n_vars)

    irows: list[tuple[dict[int, float], float, str]] = []
    for b in glist:
        gen = net.bus(b).gen
        w = var[f"W:{b}"]
        irows.append(({var[f"Pg:{b}"]: 1.0, w: -gen.p_max}, 0.0, f"pg_cap:{b}"))
        irows.append(({var[f"Pg:{b}"]: -1.0, w: gen.p_min}, 0.0, f"pg_floor:{b}"))
        irows.append(({var[f"Qg:{b}"]: 1.0, w: -gen.q_max}, 0.0, f"qg_cap:{b}"))
        irows.append(({var[f"Qg:{b}"]: -1.0, w: gen.q_min}, 0.0, f"qg_floor:{b}"))
    for b in ti.order:
        bus = net.bus(b)
        irows.append(({var[f"W:{b}"]: 1.0}, 2.0 - bus.v_min, f"v_floor:{b}"))
        irows.append(({var[f"W:{b}"]: -1.0}, -(2.0 - bus.v_max), f"v_cap:{b}"))
    a_in, b_in, in_labels = _stack_rows(irows, n_vars)

    qrows_d: list[dict[int, float]] = []
    q_b: list[float] = []
    q_labels: list[str] = []
    if thermal == "auto":
        for i in range(ti.n):
            if np.isnan(ti.i_max[i]):
                continue
            qrows_d.append(
                {
                    var[_brname(net, ti, "Pbr", i)]: 1.0,
                    var[_brname(net, ti, "Qbr", i)]: 1.0,
                }
            )
            q_b.append(float(ti.i_max[i] ** 2))
            pp = ti.parent_pos[i]
            parent = net.slack if pp < 0 else ti.order[pp]
            q_labels.append(f"thermal:{parent}-{ti.order[i]}")
    quad_diag, _, _ = _stack_rows(
        [(d, 0.0, "") for d in qrows_d], n_vars
    )
    quad_a = sp.csr_matrix((len(qrows_d), n_vars))

    return QcqpProblem(
        n_vars=n_vars,
        h=h, g=g, c=c,
        a_eq=a_eq, b_eq=b_eq, eq_labels=eq_labels,
        a_in=a_in, b_in=b_in, in_labels=in_labels,
        quad_diag=quad_diag, quad_a=quad_a,
        quad_b=np.array(q_b), quad_labels=tuple(q_labels),
        var_map=var,
    )


def _brname(net, ti, prefix, i):
    pp = ti.parent_pos[i]
    parent = net.slack if pp < 0 else ti.order[pp]
    return f"{prefix}:{parent}-{ti.order[i]}"


def _stack_rows(rows, n_vars):
    data, ri, ci = [], [], []
    b = np.empty(len(rows))
    labels = []
    for k, (coeffs, rhs, label) in enumerate(rows):
        for j, val in coeffs.items():
            ri.append(k)
            ci.append(j)
            data.append(val)
        b[k] = rhs
        labels.append(label)
    a = sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n_vars))
    return a, b, tuple(labels)


def recover_dispatch(
    net: Network,
    ti: PathIncidence,
    prob: QcqpProblem,
    sol: OpfSolution,
) -> tuple[OpfSolution, mdistflow.MdfState]:
    """Physical dispatch and full network state from the solver variables.

    Generator outputs are the modified outputs divided by the bus W; the
    state is assembled (and consistency-checked) from the modified injections
    and W profile.
    """
    x = sol.x
    var = prob.var_map
    pg: dict[int, float] = {}
    qg: dict[int, float] = {}
    for b in gen_buses(net, ti):
        w = x[var[f"W:{b}"]]
        if w <= 0.0:
            raise MdopfError(
                f"nonphysical solution: W = {w:.4f} <= 0 at bus {b} "
                "(voltage at or above 2 pu)"
            )
        pg[b] = float(x[var[f"Pg:{b}"]] / w)
        qg[b] = float(x[var[f"Qg:{b}"]] / w)
    p_hat = np.array([x[var[f"Pinj:{b}"]] for b in ti.order])
    q_hat = np.array([x[var[f"Qinj:{b}"]] for b in ti.order])
    w_r = np.array([x[var[f"W:{b}"]] for b in ti.order])
    state = mdistflow.state_from_solution(net, ti, p_hat, q_hat, w_r)
    return replace(sol, pg=pg, qg=qg), state


def evaluate_cost(
    net: Network,
    ti: PathIncidence,
    p_hat_g: dict[int, float],
    q_hat_g: dict[int, float],
) -> tuple[float, float, float]:
    """Closed-form cost split (slack part, load-profile part, quadratic part)
    for given modified generator outputs, in $.

    Evaluates the generation cost with voltages taken from the affine
    response to the generator injections; used for internal-consistency
    checks of the objective assembly.
    """
    base = net.base_power
    slack_gen = net.bus(net.slack).gen
    c1 = net.v0 * base * (
        slack_gen.cost_p * p_hat_g.get(net.slack, 0.0)
        + slack_gen.cost_q * q_hat_g.get(net.slack, 0.0)
    )
    dg = [b for b in gen_buses(net, ti) if b != net.slack]
    if not dg:
        return c1, 0.0, 0.0
    load_state = mdistflow.solve_fixed_load(net, ti)
    pos = bus_positions(net)
    order_pos = {b: i for i, b in enumerate(ti.order)}
    cols = [order_pos[b] for b in dg]
    t_g = ti.t[:, cols]
    pvec = np.array([p_hat_g.get(b, 0.0) for b in dg])
    qvec = np.array([q_hat_g.get(b, 0.0) for b in dg])
    cp = np.array([net.bus(b).gen.cost_p for b in dg])
    cq = np.array([net.bus(b).gen.cost_q for b in dg])
    vd = np.array([load_state.v[pos[b]] for b in dg])
    c2 = base * float(vd @ (cp * pvec) + vd @ (cq * qvec))
    dv = ti.t.T @ (ti.r * (t_g @ pvec)) + ti.t.T @ (ti.x * (t_g @ qvec))
    dv_g = np.array([dv[order_pos[b]] for b in dg])
    c3 = base * float(dv_g @ (cp * pvec) + dv_g @ (cq * qvec))
    return c1, c2, c3
