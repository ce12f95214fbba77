"""Primal-dual interior-point solver for convex QCQPs.

Handles problems of the form

    minimize    x' H x + g' x + c
    subject to  A_eq x  = b_eq
                A_in x <= b_in
                x' diag(d_k) x + a_k' x <= b_k      (d_k >= 0)

with a Mehrotra predictor-corrector iteration. The KKT systems are solved by
sparse LU factorization of the statically regularized quasi-definite matrix;
everything is deterministic for fixed inputs.

The problem and solution containers double as the wire format between the
OPF builder and the solver; ``problem_to_json``/``problem_from_json`` give a
documented standard form for external cross-checks.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    """Raised on non-convex input or numerical failure of the iteration."""


@dataclass(frozen=True)
class SolverConfig:
    tol_gap: float = 1e-8
    tol_feas: float = 1e-8
    max_iter: int = 100
    barrier_decrease: float = 0.1
    regularization: float = 1e-9

    def __post_init__(self):
        if self.tol_gap <= 0 or self.tol_feas <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class SolveStats:
    iterations: int
    final_gap: float
    final_feas: float
    runtime_seconds: float


@dataclass(frozen=True)
class QcqpProblem:
    """Convex QCQP in standard form with named variables and audited rows.

    ``var_map`` names every variable; the ``*_labels`` tuples name every
    constraint row (one audit tag per row). Quadratic inequality rows carry
    their (diagonal) curvature in ``quad_diag``.
    """

    n_vars: int
    h: sp.csr_matrix
    g: np.ndarray
    c: float
    a_eq: sp.csr_matrix
    b_eq: np.ndarray
    eq_labels: tuple[str, ...]
    a_in: sp.csr_matrix
    b_in: np.ndarray
    in_labels: tuple[str, ...]
    quad_diag: sp.csr_matrix
    quad_a: sp.csr_matrix
    quad_b: np.ndarray
    quad_labels: tuple[str, ...]
    var_map: dict[str, int] = field(default_factory=dict)

    @property
    def n_eq(self) -> int:
        return self.a_eq.shape[0]

    @property
    def n_in(self) -> int:
        return self.a_in.shape[0]

    @property
    def n_quad(self) -> int:
        return self.quad_diag.shape[0]

    def objective_at(self, x: np.ndarray) -> float:
        return float(x @ (self.h @ x) + self.g @ x + self.c)


@dataclass(frozen=True)
class OpfSolution:
    x: np.ndarray
    objective_value: float
    status: str
    duals_eq: np.ndarray
    duals_in: np.ndarray
    duals_quad: np.ndarray
    stats: SolveStats
    pg: dict[int, float] | None = None
    qg: dict[int, float] | None = None


def _min_eig_on_support(h: sp.spmatrix) -> float:
    """Smallest eigenvalue of the restriction of h to its nonzero support."""
    hc = sp.csr_matrix(h)
    support = np.unique(np.concatenate([hc.nonzero()[0], hc.nonzero()[1]]))
    if support.size == 0:
        return 0.0
    dense = hc[support][:, support].toarray()
    return float(np.linalg.eigvalsh(0.5 * (dense + dense.T))[0])


def _check_convex(p: QcqpProblem) -> None:
    hnorm = abs(p.h).max() if p.h.nnz else 0.0
    min_eig = _min_eig_on_support(p.h)
    if min_eig < -1e-10 * max(1.0, hnorm):
        raise SolverError(
            f"objective matrix is not positive semidefinite "
            f"(min eigenvalue {min_eig:.3e}); refusing non-convex input"
        )
    if p.n_quad and p.quad_diag.nnz and p.quad_diag.min() < 0:
        raise SolverError("quadratic constraint with negative curvature")


def solve(p: QcqpProblem, cfg: SolverConfig | None = None) -> OpfSolution:
    """Solve the QCQP; returns the optimal point with equality multipliers in
    problem row order, or a diagnostic non-optimal status."""
    cfg = cfg or SolverConfig()
    _check_convex(p)
    t_start = time.perf_counter()
    n = p.n_vars
    me = p.n_eq
    delta = cfg.regularization

    a_ineq = sp.vstack([p.a_in, p.quad_a], format="csr") if p.n_quad else p.a_in
    b_ineq = np.concatenate([p.b_in, p.quad_b]) if p.n_quad else p.b_in
    mi = a_ineq.shape[0]
    two_h = (2.0 * p.h).tocsr()

    def phi(x):
        vals = a_ineq @ x - b_ineq
        if p.n_quad:
            vals[p.n_in:] += p.quad_diag @ (x * x)
        return vals

    def ineq_jac(x):
        if not p.n_quad:
            return a_ineq
        jq = p.quad_diag.multiply(2.0 * x).tocsr()
        return sp.vstack([p.a_in, p.quad_a + jq], format="csr")

    def curvature(x, z):
        # sum_k z_k * 2 diag(d_k) from the quadratic rows
        if not p.n_quad:
            return None
        w = p.quad_diag.T @ z[p.n_in:]
        return sp.diags(2.0 * w)

    # -- starting point: least-norm solution of the equalities ---------------
    if me:
        k0 = sp.bmat(
            [[sp.identity(n), p.a_eq.T], [p.a_eq, -delta * sp.identity(me)]],
            format="csc",
        )
        try:
            sol0 = spla.splu(k0).solve(np.concatenate([np.zeros(n), p.b_eq]))
        except RuntimeError as exc:
            raise SolverError(f"equality system factorization failed: {exc}") from exc
        x = sol0[:n]
        y = np.zeros(me)
    else:
        x = np.zeros(n)
        y = np.zeros(0)

    if mi == 0:
        # equality-constrained QP: one Newton/KKT solve
        kkt = sp.bmat(
            [
                [two_h + delta * sp.identity(n),
                 p.a_eq.T if me else None],
                [p.a_eq if me else None,
                 -delta * sp.identity(me) if me else None],
            ],
            format="csc",
        ) if me else (two_h + delta * sp.identity(n)).tocsc()
        rhs = np.concatenate([-p.g, p.b_eq]) if me else -p.g
        try:
            sol = spla.splu(kkt).solve(rhs)
        except RuntimeError as exc:
            raise SolverError(f"KKT factorization failed: {exc}") from exc
        x = sol[:n]
        y = sol[n:]
        feas = float(np.max(np.abs(p.a_eq @ x - p.b_eq))) if me else 0.0
        stats = SolveStats(1, 0.0, feas, time.perf_counter() - t_start)
        status = "optimal" if feas < 10 * cfg.tol_feas else "max_iter"
        return OpfSolution(
            x=x, objective_value=p.objective_at(x), status=status,
            duals_eq=y, duals_in=np.zeros(0), duals_quad=np.zeros(0),
            stats=stats,
        )

    s = np.maximum(-phi(x), 1.0)
    z = np.ones(mi)

    g_scale = 1.0 + float(np.max(np.abs(p.g))) if n else 1.0
    b_scale = 1.0 + (float(np.max(np.abs(p.b_eq))) if me else 0.0)
    status = "max_iter"
    it = 0
    mu = s @ z / mi
    feas = np.inf

    for it in range(1, cfg.max_iter + 1):
        jac = ineq_jac(x)
        rd = two_h @ x + p.g + jac.T @ z + (p.a_eq.T @ y if me else 0.0)
        rp = p.a_eq @ x - p.b_eq if me else np.zeros(0)
        rs = phi(x) + s
        mu = s @ z / mi

        feas = max(
            float(np.max(np.abs(rp))) / b_scale if me else 0.0,
            float(np.max(np.abs(rs))),
        )
        dfeas = float(np.max(np.abs(rd))) / g_scale
        gap = mu / (1.0 + abs(p.objective_at(x)))
        if feas < cfg.tol_feas and dfeas < cfg.tol_feas and gap < cfg.tol_gap:
            status = "optimal"
            break

        dual_mag = float(np.max(np.abs(z))) + (float(np.max(np.abs(y))) if me else 0.0)
        if dual_mag > 1e12 * g_scale and feas > 100 * cfg.tol_feas:
            status = "infeasible"
            break

        d = z / s
        hbar = two_h + jac.T @ sp.diags(d) @ jac + delta * sp.identity(n)
        extra = curvature(x, z)
        if extra is not None:
            hbar = hbar + extra
        if me:
            kkt = sp.bmat(
                [[hbar, p.a_eq.T], [p.a_eq, -delta * sp.identity(me)]],
                format="csc",
            )
        else:
            kkt = hbar.tocsc()
        try:
            lu = spla.splu(kkt)
        except RuntimeError as exc:
            raise SolverError(
                f"KKT factorization failed at iteration {it}: {exc}"
            ) from exc

        def newton_step(rc):
            r1 = -rd - jac.T @ (d * rs - rc / s)
            rhs = np.concatenate([r1, -rp]) if me else r1
            sol = lu.solve(rhs)
            dx = sol[:n]
            dy = sol[n:] if me else np.zeros(0)
            dz = d * (jac @ dx + rs) - rc / s
            ds = -rs - jac @ dx
            return dx, dy, dz, ds

        # predictor
        dx_a, dy_a, dz_a, ds_a = newton_step(s * z)
        alpha_p = _step_len(s, ds_a)
        alpha_d = _step_len(z, dz_a)
        mu_aff = ((s + alpha_p * ds_a) @ (z + alpha_d * dz_a)) / mi
        sigma = min(1.0, max((mu_aff / mu) ** 3, 1e-12)) if mu > 0 else cfg.barrier_decrease

        # corrector
        rc = s * z + ds_a * dz_a - sigma * mu
        dx, dy, dz, ds = newton_step(rc)
        alpha = 0.995 * min(_step_len(s, ds), _step_len(z, dz))
        alpha = min(1.0, alpha)

        x = x + alpha * dx
        y = y + alpha * dy if me else y
        s = s + alpha * ds
        z = z + alpha * dz

        if not (np.all(np.isfinite(x)) and np.all(s > 0) and np.all(z > 0)):
            raise SolverError(f"iterate left the cone at iteration {it}")

    stats = SolveStats(
        iterations=it,
        final_gap=float(mu),
        final_feas=float(feas),
        runtime_seconds=time.perf_counter() - t_start,
    )
    return OpfSolution(
        x=x, objective_value=p.objective_at(x), status=status,
        duals_eq=np.asarray(y), duals_in=z[:p.n_in], duals_quad=z[p.n_in:],
        stats=stats,
    )


def _step_len(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def kkt_residuals(p: QcqpProblem, sol: OpfSolution) -> dict[str, float]:
    """Stationarity, primal/dual feasibility and complementarity of a solution."""
    x = sol.x
    z = np.concatenate([sol.duals_in, sol.duals_quad])
    a_ineq = sp.vstack([p.a_in, p.quad_a], format="csr") if p.n_quad else p.a_in
    vals = a_ineq @ x - (np.concatenate([p.b_in, p.quad_b]) if p.n_quad else p.b_in)
    if p.n_quad:
        vals[p.n_in:] += p.quad_diag @ (x * x)
        jq = p.quad_diag.multiply(2.0 * x).tocsr()
        jac = sp.vstack([p.a_in, p.quad_a + jq], format="csr")
    else:
        jac = a_ineq
    rd = 2.0 * (p.h @ x) + p.g + jac.T @ z
    if p.n_eq:
        rd = rd + p.a_eq.T @ sol.duals_eq
    return {
        "stationarity": float(np.max(np.abs(rd))) if len(rd) else 0.0,
        "primal_eq": float(np.max(np.abs(p.a_eq @ x - p.b_eq))) if p.n_eq else 0.0,
        "primal_in": max(0.0, float(np.max(vals))) if len(vals) else 0.0,
        "dual": max(0.0, float(-np.min(z))) if len(z) else 0.0,
        "complementarity": float(np.max(np.abs(vals * z))) if len(vals) else 0.0,
    }


def extract_duals(
    p: QcqpProblem, sol: OpfSolution
) -> tuple[dict[int, float], dict[int, float]]:
    """Shadow prices of the per-bus injection-definition rows.

    Returns (active, reactive) dicts keyed by bus id; each value is the
    objective increase per unit of additional modified withdrawal at the bus.
    """
    if sol.status != "optimal":
        raise SolverError(f"duals requested on a non-optimal solution ({sol.status})")
    lam_p: dict[int, float] = {}
    lam_q: dict[int, float] = {}
    for i, label in enumerate(p.eq_labels):
        if label.startswith("p_inj_def:"):
            lam_p[int(label.split(":")[1])] = float(sol.duals_eq[i])
        elif label.startswith("q_inj_def:"):
            lam_q[int(label.split(":")[1])] = float(sol.duals_eq[i])
    return lam_p, lam_q


# ---------------------------------------------------------------------------
# JSON standard form
# ---------------------------------------------------------------------------

def _mat_to_doc(m: sp.spmatrix) -> dict:
    coo = sp.coo_matrix(m)
    return {
        "shape": list(coo.shape),
        "rows": coo.row.tolist(),
        "cols": coo.col.tolist(),
        "vals": coo.data.tolist(),
    }


def _mat_from_doc(doc: dict) -> sp.csr_matrix:
    return sp.csr_matrix(
        (doc["vals"], (doc["rows"], doc["cols"])), shape=tuple(doc["shape"])
    )


def problem_to_json(p: QcqpProblem) -> str:
    doc = {
        "format": "radialopf-qcqp-v1",
        "n_vars": p.n_vars,
        "objective": {"h": _mat_to_doc(p.h), "g": p.g.tolist(), "c": p.c},
        "eq": {"a": _mat_to_doc(p.a_eq), "b": p.b_eq.tolist(),
               "labels": list(p.eq_labels)},
        "ineq": {"a": _mat_to_doc(p.a_in), "b": p.b_in.tolist(),
                 "labels": list(p.in_labels)},
        "quad": {"diag": _mat_to_doc(p.quad_diag), "a": _mat_to_doc(p.quad_a),
                 "b": p.quad_b.tolist(), "labels": list(p.quad_labels)},
        "var_map": p.var_map,
    }
    return json.dumps(doc)


def problem_from_json(text: str) -> QcqpProblem:
    doc = json.loads(text)
    if doc.get("format") != "radialopf-qcqp-v1":
        raise ValueError("not a radialopf QCQP document")
    return QcqpProblem(
        n_vars=doc["n_vars"],
        h=_mat_from_doc(doc["objective"]["h"]),
        g=np.array(doc["objective"]["g"], dtype=float),
        c=float(doc["objective"]["c"]),
        a_eq=_mat_from_doc(doc["eq"]["a"]),
        b_eq=np.array(doc["eq"]["b"], dtype=float),
        eq_labels=tuple(doc["eq"]["labels"]),
        a_in=_mat_from_doc(doc["ineq"]["a"]),
        b_in=np.array(doc["ineq"]["b"], dtype=float),
        in_labels=tuple(doc["ineq"]["labels"]),
        quad_diag=_mat_from_doc(doc["quad"]["diag"]),
        quad_a=_mat_from_doc(doc["quad"]["a"]),
        quad_b=np.array(doc["quad"]["b"], dtype=float),
        quad_labels=tuple(doc["quad"]["labels"]),
        var_map={k: int(v) for k, v in doc["var_map"].items()},
    )


def solution_to_json(sol: OpfSolution) -> str:
    doc = {
        "format": "radialopf-solution-v1",
        "status": sol.status,
        "objective_value": sol.objective_value,
        "x": sol.x.tolist(),
        "duals_eq": sol.duals_eq.tolist(),
        "duals_in": sol.duals_in.tolist(),
        "duals_quad": sol.duals_quad.tolist(),
        "pg": sol.pg,
        "qg": sol.qg,
        "stats": {
            "iterations": sol.stats.iterations,
            "final_gap": sol.stats.final_gap,
            "final_feas": sol.stats.final_feas,
            "runtime_seconds": sol.stats.runtime_seconds,
        },
    }
    return json.dumps(doc)
