"""Admittance matrix and Newton-Raphson AC power flow (polar form)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .case import PowerSystemCase


class PowerFlowError(RuntimeError):
    def __init__(self, message: str, mismatch: float):
        super().__init__(f"{message} (final mismatch {mismatch:.3e} p.u.)")
        self.mismatch = mismatch


def make_ybus(case: PowerSystemCase, removed_lines=()) -> np.ndarray:
    idx = case.bus_index
    Y = np.zeros((case.n_bus, case.n_bus), dtype=complex)
    removed = set(removed_lines)
    for ln in case.lines:
        if ln.id in removed:
            continue
        i, j = idx[ln.from_bus], idx[ln.to_bus]
        y = 1.0 / complex(ln.r, ln.x)
        sh = 0.5j * ln.b
        Y[i, i] += y + sh
        Y[j, j] += y + sh
        Y[i, j] -= y
        Y[j, i] -= y
    return Y


def branch_flows(case: PowerSystemCase, V: np.ndarray) -> np.ndarray:
    """Active power (p.u.) entering each line at its from-end and to-end, shape (nl, 2)."""
    idx = case.bus_index
    out = np.zeros((len(case.lines), 2))
    for k, ln in enumerate(case.lines):
        i, j = idx[ln.from_bus], idx[ln.to_bus]
        y = 1.0 / complex(ln.r, ln.x)
        sh = 0.5j * ln.b
        If = (V[i] - V[j]) * y + V[i] * sh
        It = (V[j] - V[i]) * y + V[j] * sh
        out[k] = (V[i] * np.conj(If)).real, (V[j] * np.conj(It)).real
    return out


def branch_matrices(case: PowerSystemCase):
    """(Cf, Ct, Yf, Yt): end-connection and end-current matrices, one row per line."""
    idx = case.bus_index
    nl, nb = len(case.lines), case.n_bus
    Cf = np.zeros((nl, nb))
    Ct = np.zeros((nl, nb))
    Yf = np.zeros((nl, nb), dtype=complex)
    Yt = np.zeros((nl, nb), dtype=complex)
    for k, ln in enumerate(case.lines):
        i, j = idx[ln.from_bus], idx[ln.to_bus]
        y = 1.0 / complex(ln.r, ln.x)
        sh = 0.5j * ln.b
        Cf[k, i] = Ct[k, j] = 1.0
        Yf[k, i], Yf[k, j] = y + sh, -y
        Yt[k, j], Yt[k, i] = y + sh, -y
    return Cf, Ct, Yf, Yt


def dsbr_dv(Cbr: np.ndarray, Ybr: np.ndarray, V: np.ndarray):
    """Derivatives of line-end complex flows diag(Cbr V) conj(Ybr V) w.r.t. angle and magnitude."""
    Ibr = Ybr @ V
    Vbr = Cbr @ V
    Vn = V / np.abs(V)
    dS_da = 1j * (np.conj(Ibr)[:, None] * Cbr * V - Vbr[:, None] * np.conj(Ybr * V))
    dS_dm = Vbr[:, None] * np.conj(Ybr * Vn) + np.conj(Ibr)[:, None] * Cbr * Vn
    return dS_da, dS_dm


def d2sbus_dv2(Y: np.ndarray, V: np.ndarray, lam: np.ndarray):
    """Second derivatives of lam^T Sbus, blocks (aa, av, va, vv); lam may be complex."""
    I = Y @ V
    A = np.diag(lam * V)
    B = Y * V
    C = A @ np.conj(B)
    D = Y.conj().T * V
    E = np.diag(np.conj(V)) @ (D * lam - np.diag(D @ lam))
    F = C - A * np.conj(I)
    G = np.diag(1.0 / np.abs(V))
    Gaa = E + F
    Gva = 1j * G @ (E - F)
    Gav = Gva.T
    Gvv = G @ (C + C.T) @ G
    return Gaa, Gav, Gva, Gvv


def d2sbr_dv2(Cbr: np.ndarray, Ybr: np.ndarray, V: np.ndarray, lam: np.ndarray):
    """Second derivatives of lam^T Sbr for real line weights, blocks (aa, av, va, vv)."""
    A = Ybr.conj().T @ (lam[:, None] * Cbr)
    B = np.conj(V)[:, None] * A * V
    D = np.diag((A @ V) * np.conj(V))
    E = np.diag((A.T @ np.conj(V)) * V)
    F = B + B.T
    G = np.diag(1.0 / np.abs(V))
    Haa = F - D - E
    Hva = 1j * G @ (B - B.T - D + E)
    Hav = Hva.T
    Hvv = G @ F @ G
    return Haa, Hav, Hva, Hvv


def dsbus_dv(Y: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of complex bus injections w.r.t. angle and magnitude."""
    I = Y @ V
    dV = np.diag(V)
    dS_da = 1j * dV @ np.conj(np.diag(I) - Y @ dV)
    Vn = V / np.abs(V)
    dS_dm = dV @ np.conj(Y @ np.diag(Vn)) + np.conj(np.diag(I)) @ np.diag(Vn)
    return dS_da, dS_dm


@dataclass(frozen=True)
class OperatingPoint:
    """A solved steady state together with the dispatch that produced it (MW/MVAr)."""
    vm: np.ndarray
    theta: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    p_ibr: np.ndarray
    q_ibr: np.ndarray
    pd: np.ndarray
    qd: np.ndarray
    iterations: int = 0
    mismatch: float = 0.0

    @property
    def V(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.theta)

    def features(self) -> np.ndarray:
        return np.concatenate([self.p_ibr, self.pg, self.pd, self.qd])


def scheduled_injection(case: PowerSystemCase, pg, qg, p_ibr, q_ibr, pd, qd) -> np.ndarray:
    """Net complex injection per bus in p.u."""
    S = case.connection(case.generators) @ (np.asarray(pg) + 1j * np.asarray(qg))
    if case.ibrs:
        S = S + case.connection(case.ibrs) @ (np.asarray(p_ibr) + 1j * np.asarray(q_ibr))
    if case.loads:
        S = S - case.connection(case.loads) @ (np.asarray(pd) + 1j * np.asarray(qd))
    return S / case.base_mva


def solve_power_flow(case: PowerSystemCase, p_sg=None, p_ibr=None, q_ibr=None, pd=None, qd=None,
                     vm_set=None, tol: float = 1e-10, max_iter: int = 50) -> OperatingPoint:
    """Newton-Raphson power flow.

    ``p_sg`` gives every SG output in MW; the slack entry is ignored and
    replaced by the balancing value. Voltage set-points of slack/PV buses
    come from the case unless ``vm_set`` (one value per bus) is given.
    """
    ng = len(case.generators)
    p_sg = np.array([g.p for g in case.generators] if p_sg is None else p_sg, dtype=float)
    p_ibr = np.array([r.forecast for r in case.ibrs] if p_ibr is None else p_ibr, dtype=float)
    q_ibr = np.zeros(len(case.ibrs)) if q_ibr is None else np.asarray(q_ibr, dtype=float)
    pd = np.array([ld.pd for ld in case.loads] if pd is None else pd, dtype=float)
    qd = np.array([ld.qd for ld in case.loads] if qd is None else qd, dtype=float)

    Y = make_ybus(case)
    ref, pv, pq = case.slack, case.pv, case.pq
    vm = np.array([b.vm for b in case.buses], dtype=float) if vm_set is None \
        else np.asarray(vm_set, dtype=float).copy()
    vm[pq] = 1.0 if vm_set is None else vm[pq]
    va = np.zeros(case.n_bus)
    Sbus = scheduled_injection(case, p_sg, np.zeros(ng), p_ibr, q_ibr, pd, qd)

    pvpq = np.concatenate([pv, pq]).astype(int)
    npvpq = len(pvpq)
    V = vm * np.exp(1j * va)

    def mismatch(V):
        mis = V * np.conj(Y @ V) - Sbus
        return np.concatenate([mis[pvpq].real, mis[pq].imag])

    F = mismatch(V)
    norm = np.max(np.abs(F)) if F.size else 0.0
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise PowerFlowError(f"Newton power flow did not converge in {max_iter} iterations", norm)
        it += 1
        dS_da, dS_dm = dsbus_dv(Y, V)
        J = np.block([
            [dS_da[np.ix_(pvpq, pvpq)].real, dS_dm[np.ix_(pvpq, pq)].real],
            [dS_da[np.ix_(pq, pvpq)].imag, dS_dm[np.ix_(pq, pq)].imag],
        ])
        try:
            dx = -np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            raise PowerFlowError("singular power-flow Jacobian", norm) from None
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        if not np.all(np.isfinite(vm)) or np.any(vm <= 0):
            raise PowerFlowError("power flow diverged (voltage collapse)", norm)
        V = vm * np.exp(1j * va)
        F = mismatch(V)
        norm = np.max(np.abs(F))
        if not np.isfinite(norm):
            raise PowerFlowError("power flow diverged", float("inf"))

    # generator outputs at slack / PV buses absorb the computed injection
    Scalc = V * np.conj(Y @ V) * case.base_mva
    Cg = case.connection(case.generators)
    other_units = Sbus * case.base_mva - Cg @ (p_sg + 0j)
    pg, qg = p_sg.copy(), np.zeros(ng)
    counts = Cg.sum(axis=1)
    for k, g in enumerate(case.generators):
        i = case.bus_index[g.bus]
        residual = Scalc[i] - other_units[i]
        qg[k] = residual.imag / counts[i]
        if i == ref:
            pg[k] = residual.real / counts[i]
    return OperatingPoint(vm.copy(), va.copy(), pg, qg, p_ibr, q_ibr, pd, qd, it, float(norm))


def power_balance_residual(case: PowerSystemCase, op: OperatingPoint) -> float:
    """Max |g_P|, |g_Q| over all buses (p.u.) for a solved operating point."""
    Y = make_ybus(case)
    V = op.V
    S = scheduled_injection(case, op.pg, op.qg, op.p_ibr, op.q_ibr, op.pd, op.qd)
    mis = V * np.conj(Y @ V) - S
    return float(np.max(np.abs(np.concatenate([mis.real, mis.imag]))))
