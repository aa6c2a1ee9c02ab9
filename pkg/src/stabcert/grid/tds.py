"""Classical-model transient stability simulation and the stability index.

Machines are constant EMFs behind transient reactance; loads become constant
admittances at the pre-fault voltage; IBRs inject the constant current they
deliver at the pre-fault operating point. The network is Kron-reduced to the
generator internal nodes for each of the pre-fault, fault-on and post-fault
topologies, and the swing equations are integrated with fixed-step RK4.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .case import PowerSystemCase
from .powerflow import OperatingPoint, make_ybus

FAULT_IMPEDANCE = 1e-6
DIVERGENCE_DEG = 1000.0


class TopologyError(RuntimeError):
    pass


@dataclass(frozen=True)
class FaultScenario:
    line: int | None = None
    bus: int | None = None
    t_fault: float = 0.1
    t_clear: float = 0.2
    t_end: float = 5.0
    h: float = 0.005

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("integration step must be positive")
        if not (0 <= self.t_fault < self.t_clear and self.t_fault <= self.t_end):
            raise ValueError("need 0 <= t_fault < t_clear and t_fault <= t_end")

    @classmethod
    def from_dict(cls, data: dict) -> "FaultScenario":
        return cls(data.get("line"), data.get("bus"), float(data.get("t_fault", 0.1)),
                   float(data.get("t_clear", 0.2)), float(data.get("t_end", 5.0)),
                   float(data.get("h", 0.005)))

    def to_dict(self) -> dict:
        return {"line": self.line, "bus": self.bus, "t_fault": self.t_fault,
                "t_clear": self.t_clear, "t_end": self.t_end, "h": self.h}


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray       # (nt,)
    delta: np.ndarray   # (nt, ng) rotor angles, degrees
    omega: np.ndarray   # (nt, ng) speed deviation, rad/s
    diverged: bool

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [f"delta_{k}" for k in range(self.delta.shape[1])])
            for t, row in zip(self.t, self.delta):
                w.writerow([f"{t:.6f}"] + [repr(float(v)) for v in row])


@dataclass(frozen=True)
class ReducedNetwork:
    Y: np.ndarray    # generator-node admittance after Kron reduction
    I0: np.ndarray   # constant current reaching generator nodes from IBRs


def _check_connected(case: PowerSystemCase, removed) -> None:
    idx = case.bus_index
    rows, cols = [], []
    for ln in case.lines:
        if ln.id in removed:
            continue
        rows.append(idx[ln.from_bus])
        cols.append(idx[ln.to_bus])
    n = case.n_bus
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    ncomp, _ = connected_components(graph, directed=False)
    if ncomp > 1:
        raise TopologyError(f"removing lines {sorted(removed)} islands part of the network")


def reduce_network(case: PowerSystemCase, op: OperatingPoint, removed_lines=(),
                   fault_bus: int | None = None) -> ReducedNetwork:
    removed = set(removed_lines)
    _check_connected(case, removed)
    base = case.base_mva
    V = op.V
    idx = case.bus_index
    Ybb = make_ybus(case, removed)
    for ld, p, q in zip(case.loads, op.pd, op.qd):
        i = idx[ld.bus]
        Ybb[i, i] += (p - 1j * q) / base / abs(V[i]) ** 2
    ng = len(case.generators)
    ygen = np.array([1.0 / (1j * g.xd_prime) for g in case.generators])
    Ybg = np.zeros((case.n_bus, ng), dtype=complex)
    for k, g in enumerate(case.generators):
        i = idx[g.bus]
        Ybb[i, i] += ygen[k]
        Ybg[i, k] = -ygen[k]
    if fault_bus is not None:
        i = idx[fault_bus]
        Ybb[i, i] += 1.0 / FAULT_IMPEDANCE
    Ib = np.zeros(case.n_bus, dtype=complex)
    for r, p, q in zip(case.ibrs, op.p_ibr, op.q_ibr):
        i = idx[r.bus]
        Ib[i] += np.conj((p + 1j * q) / base / V[i])
    try:
        X = np.linalg.solve(Ybb, np.column_stack([Ybg, Ib]))
    except np.linalg.LinAlgError:
        raise TopologyError("singular network admittance during Kron reduction") from None
    Ygb = Ybg.T
    Yred = np.diag(ygen) - Ygb @ X[:, :ng]
    I0 = Ygb @ X[:, ng]
    return ReducedNetwork(Yred, I0)


def internal_emf(case: PowerSystemCase, op: OperatingPoint) -> np.ndarray:
    idx = case.bus_index
    V = op.V
    E = np.empty(len(case.generators), dtype=complex)
    for k, g in enumerate(case.generators):
        v = V[idx[g.bus]]
        I = np.conj((op.pg[k] + 1j * op.qg[k]) / case.base_mva / v)
        E[k] = v + 1j * g.xd_prime * I
    return E


def electrical_power(Emag: np.ndarray, delta: np.ndarray, net: ReducedNetwork) -> np.ndarray:
    E = Emag * np.exp(1j * delta)
    return (E * np.conj(net.Y @ E + net.I0)).real


def integrate_swing(M, D, Pm, Emag, delta0, omega0, networks, h: float, n_steps: int,
                    cap_deg: float = DIVERGENCE_DEG):
    """RK4 on  d(delta)/dt = omega,  M d(omega)/dt = Pm - Pe(delta) - D omega.

    ``networks`` is a callable mapping a step index to the ReducedNetwork in
    force during that step. Stops early once the largest pairwise angle gap
    exceeds ``cap_deg``. Returns (delta[rad], omega, diverged).
    """
    M = np.asarray(M, dtype=float)
    D = np.asarray(D, dtype=float)
    cap = math.radians(cap_deg)
    deltas = np.empty((n_steps + 1, len(M)))
    omegas = np.empty_like(deltas)
    d = np.array(delta0, dtype=float)
    w = np.array(omega0, dtype=float)
    deltas[0], omegas[0] = d, w

    for k in range(n_steps):
        net = networks(k)

        def acc(dd, ww):
            return (Pm - electrical_power(Emag, dd, net) - D * ww) / M

        k1d, k1w = w, acc(d, w)
        k2d, k2w = w + 0.5 * h * k1w, acc(d + 0.5 * h * k1d, w + 0.5 * h * k1w)
        k3d, k3w = w + 0.5 * h * k2w, acc(d + 0.5 * h * k2d, w + 0.5 * h * k2w)
        k4d, k4w = w + h * k3w, acc(d + h * k3d, w + h * k3w)
        d = d + h / 6.0 * (k1d + 2 * k2d + 2 * k3d + k4d)
        w = w + h / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w)
        deltas[k + 1], omegas[k + 1] = d, w
        if not np.all(np.isfinite(d)) or d.max() - d.min() > cap:
            return deltas[:k + 2], omegas[:k + 2], True
    return deltas, omegas, False


def run_tds(case: PowerSystemCase, op: OperatingPoint, scenario: FaultScenario) -> Trajectory:
    """Simulate the fault scenario starting from a converged operating point."""
    if len(case.generators) < 1:
        raise ValueError("no synchronous generators to simulate")
    h = scenario.h
    n_steps = int(round(scenario.t_end / h))
    k_fault = int(round(scenario.t_fault / h))
    k_clear = int(round(scenario.t_clear / h))

    pre = reduce_network(case, op)
    fault = post = pre
    if k_fault < n_steps:
        removed = () if scenario.line is None else (scenario.line,)
        if scenario.bus is not None:
            fault = reduce_network(case, op, fault_bus=scenario.bus)
        post = reduce_network(case, op, removed_lines=removed)

    def networks(k):
        if k < k_fault:
            return pre
        if k < k_clear:
            return fault
        return post

    E = internal_emf(case, op)
    Emag, delta0 = np.abs(E), np.angle(E)
    Pm = electrical_power(Emag, delta0, pre)
    M = np.array([g.M for g in case.generators])
    D = np.array([g.D for g in case.generators])
    deltas, omegas, diverged = integrate_swing(M, D, Pm, Emag, delta0, np.zeros_like(M),
                                               networks, h, n_steps)
    t = h * np.arange(deltas.shape[0])
    return Trajectory(t, np.degrees(deltas), omegas, diverged)


def max_angle_gap(traj: Trajectory) -> float:
    """Largest rotor angle difference between any two machines over the run, degrees."""
    if traj.delta.shape[1] < 2:
        raise ValueError("stability index needs at least two synchronous generators")
    if traj.delta.shape[0] == 0:
        raise ValueError("empty trajectory")
    return float(np.max(traj.delta.max(axis=1) - traj.delta.min(axis=1)))


def tsi_from_gap(gap_deg: float) -> float:
    return (360.0 - gap_deg) / (360.0 + gap_deg) * 100.0


def compute_tsi(traj: Trajectory) -> float:
    return tsi_from_gap(max_angle_gap(traj))


def simulate_tsi(case: PowerSystemCase, op: OperatingPoint, scenario: FaultScenario) -> float:
    return compute_tsi(run_tds(case, op, scenario))


def load_fault(path) -> FaultScenario:
    return FaultScenario.from_dict(json.loads(Path(path).read_text()))
