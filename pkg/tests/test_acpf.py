import numpy as np
import pytest

from radialopf import acpf, netmodel
from radialopf.acpf import OracleError, PowerFlowError
from radialopf.netmodel import build_path_incidence

from helpers import bus_row, mk_case, random_tree_network


def two_bus_exact_v(net, p_load, q_load):
    """Closed-form receiving-end voltage of a single branch: the high root of
    the quadratic in |V|^2."""
    br = net.branches[0]
    v0 = net.v0
    bq = 2.0 * (br.r * p_load + br.x * q_load) - v0 * v0
    cq = (br.r**2 + br.x**2) * (p_load**2 + q_load**2)
    disc = bq * bq - 4.0 * cq
    return np.sqrt((-bq + np.sqrt(disc)) / 2.0)


def test_zero_load_converges_immediately(case33):
    net = netmodel.with_slack_voltage(case33, 1.05)
    ti = build_path_incidence(net)
    st = acpf.newton_pf(net, p=np.zeros(ti.n), q=np.zeros(ti.n))
    assert st.iterations <= 1
    assert np.allclose(st.v, 1.05)
    assert st.pl_exact == pytest.approx(0.0, abs=1e-14)


def test_two_bus_matches_closed_form(net2):
    st = acpf.newton_pf(net2)
    v_exact = two_bus_exact_v(net2, 1.0, 0.0)
    assert st.v[1] == pytest.approx(v_exact, abs=1e-12)
    # the ratio-model approximation is close but not exact
    assert abs(st.v[1] - 0.989899) < 5e-4


def test_energy_balance(case33_psp):
    st = acpf.newton_pf(case33_psp)
    p_inj = sum(-b.p_load for b in case33_psp.buses if b.id != case33_psp.slack)
    q_inj = sum(-b.q_load for b in case33_psp.buses if b.id != case33_psp.slack)
    assert abs(st.slack_p + p_inj - st.pl_exact) < 1e-9
    assert abs(st.slack_q + q_inj - st.ql_exact) < 1e-9


def test_newton_deterministic(case33_psp):
    a = acpf.newton_pf(case33_psp)
    b = acpf.newton_pf(case33_psp)
    assert np.array_equal(a.v, b.v) and np.array_equal(a.delta, b.delta)


def test_divergence_reported(net2):
    with pytest.raises(PowerFlowError, match="diverged"):
        acpf.newton_pf(net2, p=np.array([-80.0]), q=np.array([0.0]))


def _fd_jacobian(net, v, delta, h=1e-7):
    """Central finite differences of the complex injection equations."""
    pos = netmodel.bus_positions(net)
    slack_pos = pos[net.slack]
    pq = [i for i in range(net.n_bus) if i != slack_pos]
    ybus = acpf.admittance(net)

    def s_calc(vm, va):
        vc = vm * np.exp(1j * va)
        return (vc * np.conj(ybus.dot(vc)))[pq]

    m = len(pq)
    j = np.zeros((2 * m, 2 * m))
    for col, i in enumerate(pq):
        va = delta.copy()
        va[i] += h
        sp_ = s_calc(v, va)
        va[i] -= 2 * h
        sm = s_calc(v, va)
        d = (sp_ - sm) / (2 * h)
        j[:m, col] = d.real
        j[m:, col] = d.imag
        vm = v.copy()
        vm[i] += h
        sp_ = s_calc(vm, delta)
        vm[i] -= 2 * h
        sm = s_calc(vm, delta)
        d = (sp_ - sm) / (2 * h)
        j[:m, col + m] = d.real
        j[m:, col + m] = d.imag
    return j


@pytest.mark.parametrize("fixture", ["net2", "case33_psp"])
def test_jacobian_matches_finite_difference(fixture, request):
    net = request.getfixturevalue(fixture)
    st = acpf.newton_pf(net)
    jb = acpf.jacobian_at(net, st.v, st.delta)
    m = len(jb.bus_ids)
    analytic = np.block(
        [[jb.dp_ddelta, jb.dp_dv], [jb.dq_ddelta, jb.dq_dv]]
    )
    fd = _fd_jacobian(net, st.v, st.delta)
    scale = max(1.0, np.abs(fd).max())
    assert np.max(np.abs(analytic - fd)) / scale < 1e-6


def test_jacobian_any_operating_point(case33):
    rng = np.random.default_rng(0)
    v = 1.0 + 0.02 * rng.standard_normal(case33.n_bus)
    delta = 0.01 * rng.standard_normal(case33.n_bus)
    jb = acpf.jacobian_at(case33, v, delta)
    fd = _fd_jacobian(case33, v, delta)
    analytic = np.block([[jb.dp_ddelta, jb.dp_dv], [jb.dq_ddelta, jb.dq_dv]])
    assert np.max(np.abs(analytic - fd)) / max(1.0, np.abs(fd).max()) < 1e-6


def test_jacobian_symmetric_structure():
    # identical branches from the slack, flat symmetric state
    net = netmodel.parse_matpower_case(mk_case(
        [bus_row(1, 3), bus_row(2, pd=0.1), bus_row(3, pd=0.1)],
        [[1, 2, 0.01, 0.03, 0, 0], [1, 3, 0.01, 0.03, 0, 0]],
    ))
    jb = acpf.jacobian_at(net, np.ones(3), np.zeros(3))
    assert np.allclose(jb.dp_ddelta, jb.dp_ddelta.T)


def _fd_voltage_sens(net, p, q, eps=1e-5):
    ids = acpf.nonslack_ids(net)
    m = len(ids)
    dv_dp = np.zeros((m, m))
    dv_dq = np.zeros((m, m))
    pos = netmodel.bus_positions(net)
    rows = [pos[b] for b in ids]
    for j in range(m):
        for mat, vec in ((dv_dp, p), (dv_dq, q)):
            bump = vec.copy()
            bump[j] += eps
            hi = acpf.newton_pf(net, bump if mat is dv_dp else p,
                                q if mat is dv_dp else bump)
            bump[j] -= 2 * eps
            lo = acpf.newton_pf(net, bump if mat is dv_dp else p,
                                q if mat is dv_dp else bump)
            mat[:, j] = (hi.v[rows] - lo.v[rows]) / (2 * eps)
    return dv_dp, dv_dq


def test_voltage_sensitivities_two_bus(net2):
    st = acpf.newton_pf(net2)
    jb = acpf.jacobian_at(net2, st.v, st.delta)
    dv_dp, dv_dq = acpf.voltage_sensitivities(jb)
    p, q = acpf.default_injections(net2)
    fd_p, fd_q = _fd_voltage_sens(net2, p, q)
    assert np.max(np.abs(dv_dp - fd_p)) / np.abs(fd_p).max() < 1e-4
    assert np.max(np.abs(dv_dq - fd_q)) / np.abs(fd_q).max() < 1e-4


def test_voltage_sensitivities_case33(case33_psp):
    st = acpf.newton_pf(case33_psp)
    jb = acpf.jacobian_at(case33_psp, st.v, st.delta)
    dv_dp, dv_dq = acpf.voltage_sensitivities(jb)
    p, q = acpf.default_injections(case33_psp)
    fd_p, fd_q = _fd_voltage_sens(case33_psp, p, q)
    assert np.max(np.abs(dv_dp - fd_p)) / np.abs(fd_p).max() < 1e-3
    assert np.max(np.abs(dv_dq - fd_q)) / np.abs(fd_q).max() < 1e-3


def test_decoupled_limit_ordering():
    # x >> r: voltage responds far more to reactive than to active power
    net = netmodel.parse_matpower_case(mk_case(
        [bus_row(1, 3), bus_row(2, pd=0.1, qd=0.05), bus_row(3, pd=0.1, qd=0.05)],
        [[1, 2, 0.001, 0.2, 0, 0], [2, 3, 0.001, 0.2, 0, 0]],
    ))
    st = acpf.newton_pf(net)
    jb = acpf.jacobian_at(net, st.v, st.delta)
    dv_dp, dv_dq = acpf.voltage_sensitivities(jb)
    assert np.all(np.abs(np.diag(dv_dq)) > np.abs(np.diag(dv_dp)))


def test_fd_oracle_zero_load(case33_psp):
    ti = build_path_incidence(case33_psp)
    z = np.zeros(ti.n)
    price = acpf.fd_price_oracle(case33_psp, 18, "p", p=z, q=z)
    assert price == pytest.approx(30.0, abs=1e-4)


def test_fd_oracle_two_bus_sign(net2):
    price = acpf.fd_price_oracle(net2, 2, "p")
    assert price > 30.0
    price_q = acpf.fd_price_oracle(net2, 2, "q")
    assert price_q > 3.0


def test_fd_oracle_requires_slack_costs(case33):
    with pytest.raises(OracleError, match="no generator"):
        acpf.slack_costs(netmodel.with_generator(case33, case33.slack, None))


def test_fd_oracle_failure_maps_to_oracle_error(net2):
    with pytest.raises(OracleError):
        acpf.fd_price_oracle(net2, 2, "p", p=np.array([-80.0]), q=np.array([0.0]))


def test_warm_start_extreme_case(case33_psp):
    from radialopf import mdistflow as mdf
    net = netmodel.scale_impedance(case33_psp, 2.9)
    ti = build_path_incidence(net)
    stm = mdf.solve_fixed_load(net, ti)
    st = acpf.newton_pf(net, v_start=stm.v, delta_start=stm.delta)
    assert st.max_mismatch < 1e-10


def test_random_tree_balance():
    rng = np.random.default_rng(9)
    net = random_tree_network(rng, 40)
    st = acpf.newton_pf(net)
    p_inj = sum(-b.p_load for b in net.buses if b.id != net.slack)
    assert abs(st.slack_p + p_inj - st.pl_exact) < 1e-9
