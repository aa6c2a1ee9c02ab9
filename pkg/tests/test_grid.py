import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import two_bus_case
from stabcert.grid import (Bus, CaseError, Generator, Line, PowerSystemCase, FaultScenario, PowerFlowError, TopologyError, case_from_dict,
                           case_to_dict, compute_tsi, load_case, make_ybus, max_angle_gap,
                           power_balance_residual, run_tds, save_case, simulate_tsi,
                           solve_power_flow, tsi_from_gap)
from stabcert.grid.powerflow import (branch_matrices, d2sbr_dv2, d2sbus_dv2, dsbr_dv, dsbus_dv)
from stabcert.grid.tds import integrate_swing, internal_emf, reduce_network


# -- case data -----------------------------------------------------------------

def test_case_round_trip(tmp_path, case9):
    save_case(case9, tmp_path / "c.json")
    assert load_case(tmp_path / "c.json") == case9
    assert case_from_dict(case_to_dict(case9)) == case9


def test_case_validation(case9):
    data = case_to_dict(case9)
    data["buses"][1]["type"] = "slack"
    with pytest.raises(CaseError):
        case_from_dict(data)
    data = case_to_dict(case9)
    data["lines"][0]["to"] = 99
    with pytest.raises(CaseError):
        case_from_dict(data)
    with pytest.raises(CaseError):
        case_from_dict({"buses": []})


def test_feature_layout(case9):
    names = case9.feature_names()
    assert names[0].startswith("ibr_") and names[-1].startswith("qd_")
    x = case9.base_features()
    parts = case9.split_features(x)
    assert np.array_equal(np.concatenate(parts), x)


# -- admittance and power flow ---------------------------------------------------

def test_ybus_two_bus_closed_form():
    case = two_bus_case(r=0.02, x=0.2)
    y = 1 / (0.02 + 0.2j)
    assert np.allclose(make_ybus(case), [[y, -y], [-y, y]])


def test_two_bus_lossless_voltage_closed_form():
    # V2^4 + (2 Q x - V1^2) V2^2 + x^2 (P^2 + Q^2) = 0, upper root
    P, Q, x = 0.8, 0.2, 0.1
    case = two_bus_case(r=0.0, x=x, pd=P * 100, qd=Q * 100)
    op = solve_power_flow(case)
    b = 1.0 - 2 * Q * x
    v2 = math.sqrt((b + math.sqrt(b * b - 4 * x * x * (P * P + Q * Q))) / 2)
    assert op.vm[1] == pytest.approx(v2, abs=1e-10)
    assert op.pg[0] == pytest.approx(P * 100, abs=1e-7)     # lossless
    assert math.sin(-op.theta[1]) * v2 / x == pytest.approx(P, abs=1e-10)


def test_nine_bus_power_flow_residual(case9):
    op = solve_power_flow(case9)
    assert power_balance_residual(case9, op) < 1e-8
    losses = op.pg.sum() + op.p_ibr.sum() - op.pd.sum()
    assert 0 < losses < 10


def test_power_flow_failure_is_reported():
    case = two_bus_case(r=0.0, x=0.5, pd=400.0, qd=200.0)
    with pytest.raises(PowerFlowError):
        solve_power_flow(case)


def _fd_complex(f, V, h=1e-7):
    n = V.size
    va, vm = np.angle(V), np.abs(V)
    da, dm = [], []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        da.append((f(vm * np.exp(1j * (va + e))) - f(vm * np.exp(1j * (va - e)))) / (2 * h))
        dm.append((f((vm + e) * np.exp(1j * va)) - f((vm - e) * np.exp(1j * va))) / (2 * h))
    return np.array(da).T, np.array(dm).T


def test_injection_and_flow_derivatives(case9):
    rng = np.random.default_rng(0)
    V = (1 + 0.05 * rng.normal(size=case9.n_bus)) * np.exp(1j * 0.1 * rng.normal(size=case9.n_bus))
    Y = make_ybus(case9)
    sbus = lambda v: v * np.conj(Y @ v)
    a, m = dsbus_dv(Y, V)
    fa, fm = _fd_complex(sbus, V)
    assert np.allclose(a, fa, atol=1e-6) and np.allclose(m, fm, atol=1e-6)
    Cf, Ct, Yf, Yt = branch_matrices(case9)
    sbr = lambda v: (Cf @ v) * np.conj(Yf @ v)
    a, m = dsbr_dv(Cf, Yf, V)
    fa, fm = _fd_complex(sbr, V)
    assert np.allclose(a, fa, atol=1e-6) and np.allclose(m, fm, atol=1e-6)


def test_second_derivatives(case9):
    rng = np.random.default_rng(1)
    n = case9.n_bus
    V = (1 + 0.05 * rng.normal(size=n)) * np.exp(1j * 0.1 * rng.normal(size=n))
    Y = make_ybus(case9)
    lam = rng.normal(size=n)
    # gradient of Re(lam^T S(V)) over (va, vm), differentiated once more numerically
    def grad(v):
        a, m = dsbus_dv(Y, v)
        return np.concatenate([(lam @ a).real, (lam @ m).real])
    H = d2sbus_dv2(Y, V, lam)
    Hfull = np.block([[H[0], H[1]], [H[2], H[3]]]).real
    fa, fm = _fd_complex(grad, V)
    assert np.allclose(Hfull, np.hstack([fa, fm]).real, atol=1e-5)
    Cf, _, Yf, _ = branch_matrices(case9)
    mu = rng.normal(size=len(case9.lines))
    def gbr(v):
        a, m = dsbr_dv(Cf, Yf, v)
        return np.concatenate([(mu @ a).real, (mu @ m).real])
    H = d2sbr_dv2(Cf, Yf, V, mu)
    Hfull = np.block([[H[0], H[1]], [H[2], H[3]]]).real
    fa, fm = _fd_complex(gbr, V)
    assert np.allclose(Hfull, np.hstack([fa, fm]).real, atol=1e-5)


# -- time-domain simulation --------------------------------------------------------

def test_tsi_formula():
    assert tsi_from_gap(0.0) == 100.0
    assert tsi_from_gap(360.0) == 0.0
    assert tsi_from_gap(1000.0) < 0
    assert tsi_from_gap(120.0) == pytest.approx(240 / 480 * 100)


def test_unfaulted_run_stays_at_equilibrium(case9):
    op = solve_power_flow(case9)
    traj = run_tds(case9, op, FaultScenario(t_end=5.0))
    rel = np.radians(traj.delta - traj.delta[:, [0]])
    assert np.max(np.abs(rel - rel[0])) < 1e-3
    assert not traj.diverged


def test_step_halving_changes_peak_angle_little(case9, fault9):
    op = solve_power_flow(case9)
    a = run_tds(case9, op, FaultScenario(fault9.line, fault9.bus, 0.1, 0.3, 2.0, 0.005))
    b = run_tds(case9, op, FaultScenario(fault9.line, fault9.bus, 0.1, 0.3, 2.0, 0.0025))
    assert not a.diverged
    assert abs(math.radians(max_angle_gap(a) - max_angle_gap(b))) < 1e-4


def test_bundled_fault_base_case_is_stable(case9, fault9):
    op = solve_power_flow(case9)
    tsi = simulate_tsi(case9, op, fault9)
    assert 0 < tsi < 100


def test_long_clearing_destabilizes(case9, fault9):
    op = solve_power_flow(case9)
    slow = FaultScenario(fault9.line, fault9.bus, 0.1, 0.8, 3.0, 0.005)
    traj = run_tds(case9, op, slow)
    assert compute_tsi(traj) < 0


def test_islanding_line_rejected(case9):
    op = solve_power_flow(case9)
    radial = next(ln.id for ln in case9.lines if {ln.from_bus, ln.to_bus} == {1, 4})
    with pytest.raises(TopologyError):
        run_tds(case9, op, FaultScenario(line=radial, bus=4, t_clear=0.2, t_end=1.0))


def test_fault_scenario_validation():
    with pytest.raises(ValueError):
        FaultScenario(t_fault=0.3, t_clear=0.2)
    with pytest.raises(ValueError):
        FaultScenario(h=0.0)


def smib_case(p_mw=90.0, x_line=0.3):
    """One machine at bus 1 against a near-infinite bus (slack, huge inertia) at bus 2."""
    buses = (Bus(1, "PV", 1.0, 0.9, 1.1), Bus(2, "slack", 1.0, 0.9, 1.1))
    gens = (Generator(1, 0.05, 0.0, 0.2, 0.0, 250.0, -200.0, 200.0, (0, 0, 0), p_mw),
            Generator(2, 1e8, 0.0, 1e-4, -500.0, 500.0, -500.0, 500.0, (0, 0, 0), 0.0))
    return PowerSystemCase(buses, (Line(1, 1, 2, 0.0, x_line),), gens, (), (), 100.0, "smib")


def smib_critical_time(case):
    """Equal-area critical clearing time for a bolted terminal fault (D = 0)."""
    op = solve_power_flow(case)
    E = internal_emf(case, op)
    x_total = case.generators[0].xd_prime + case.lines[0].x + case.generators[1].xd_prime
    pmax = abs(E[0]) * abs(E[1]) / x_total
    d0 = float(np.angle(E[0]) - np.angle(E[1]))
    pm = pmax * math.sin(d0)
    dmax = math.pi - d0
    dcr = math.acos((pm * (dmax - d0) + pmax * math.cos(dmax)) / pmax)
    return math.sqrt(2 * case.generators[0].M * (dcr - d0) / pm)


def test_smib_clearing_time_brackets_equal_area():
    case = smib_case()
    op = solve_power_flow(case)
    t_cr = smib_critical_time(case)
    h = 0.001
    ks = np.arange(int(t_cr / h) - 3, int(t_cr / h) + 4)
    stable = [simulate_tsi(case, op, FaultScenario(None, 1, 0.0, k * h, 3.0, h)) > 0 for k in ks]
    assert stable[0] and not stable[-1]
    last = ks[np.flatnonzero(stable)[-1]]
    assert last * h <= t_cr <= (last + 1) * h


@settings(max_examples=25, deadline=None)
@given(p=st.floats(0.0, 0.9), q=st.floats(-0.2, 0.3), r=st.floats(0.0, 0.05))
def test_power_flow_balances_any_light_load(p, q, r):
    case = two_bus_case(r=r, x=0.1, pd=100 * p, qd=100 * q)
    op = solve_power_flow(case)
    assert power_balance_residual(case, op) < 1e-8
    assert op.pg[0] >= 100 * p - 1e-7       # losses are non-negative


@settings(max_examples=20, deadline=None)
@given(gap=st.floats(0.0, 5000.0))
def test_tsi_is_bounded_and_decreasing(gap):
    t = tsi_from_gap(gap)
    assert -100 < t <= 100
    assert tsi_from_gap(gap + 1.0) < t
