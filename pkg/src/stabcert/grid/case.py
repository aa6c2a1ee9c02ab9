"""Power-system case data: buses, lines, synchronous generators, IBRs, loads.

Powers in the case file are MW / MVAr; impedances are per unit on ``base_mva``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class CaseError(ValueError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    type: str  # slack | PV | PQ
    vm: float = 1.0
    vmin: float = 0.9
    vmax: float = 1.1


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    rating: float = 9999.0  # MVA, used as the active-flow limit


@dataclass(frozen=True)
class Generator:
    bus: int
    M: float          # inertia constant 2H/omega_s, s^2/rad
    D: float          # damping, p.u. power per rad/s
    xd_prime: float   # transient reactance, p.u.
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    cost: tuple[float, float, float]  # a $/MW^2h, b $/MWh, c $/h
    p: float = 0.0    # scheduled output, MW


@dataclass(frozen=True)
class IBR:
    bus: int
    s_rated: float           # MVA
    curtailment_cost: float  # $/MWh
    forecast: float          # available active power, MW


@dataclass(frozen=True)
class Load:
    bus: int
    pd: float
    qd: float


@dataclass(frozen=True)
class PowerSystemCase:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    ibrs: tuple[IBR, ...] = ()
    loads: tuple[Load, ...] = ()
    base_mva: float = 100.0
    name: str = ""

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise CaseError("duplicate bus ids")
        slack = [b for b in self.buses if b.type == "slack"]
        if len(slack) != 1:
            raise CaseError(f"exactly one slack bus required, found {len(slack)}")
        for b in self.buses:
            if b.type not in ("slack", "PV", "PQ"):
                raise CaseError(f"bus {b.id}: unknown type {b.type!r}")
            if not b.vmin <= b.vmax:
                raise CaseError(f"bus {b.id}: vmin > vmax")
        known = set(ids)
        for ln in self.lines:
            if ln.from_bus not in known or ln.to_bus not in known:
                raise CaseError(f"line {ln.id} references an unknown bus")
            if ln.rating <= 0:
                raise CaseError(f"line {ln.id}: rating must be positive")
            if ln.r == 0 and ln.x == 0:
                raise CaseError(f"line {ln.id}: zero impedance")
        for g in self.generators:
            if g.bus not in known:
                raise CaseError(f"generator at unknown bus {g.bus}")
            if g.M <= 0:
                raise CaseError(f"generator at bus {g.bus}: inertia must be positive")
            if not (g.pmin <= g.pmax and g.qmin <= g.qmax):
                raise CaseError(f"generator at bus {g.bus}: min > max")
            if not np.all(np.isfinite([g.pmin, g.pmax, g.qmin, g.qmax])):
                raise CaseError(f"generator at bus {g.bus}: limits must be finite")
        for r in self.ibrs:
            if r.bus not in known:
                raise CaseError(f"IBR at unknown bus {r.bus}")
            if not 0 <= r.forecast <= r.s_rated:
                raise CaseError(f"IBR at bus {r.bus}: need 0 <= forecast <= rated")
        if not any(g.bus == slack[0].id for g in self.generators):
            raise CaseError("slack bus has no synchronous generator")

    # -- indexing helpers --------------------------------------------------
    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def slack(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.type == "slack")

    @property
    def slack_generator(self) -> int:
        sb = self.buses[self.slack].id
        return next(k for k, g in enumerate(self.generators) if g.bus == sb)

    @property
    def pv(self) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.type == "PV"], dtype=int)

    @property
    def pq(self) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.type == "PQ"], dtype=int)

    def connection(self, units) -> np.ndarray:
        """Bus-by-unit incidence matrix (the C_g of the power balance)."""
        idx = self.bus_index
        C = np.zeros((self.n_bus, len(units)))
        for k, u in enumerate(units):
            C[idx[u.bus], k] = 1.0
        return C

    def line(self, line_id: int) -> Line:
        for ln in self.lines:
            if ln.id == line_id:
                return ln
        raise CaseError(f"no line with id {line_id}")

    # -- feature layout ----------------------------------------------------
    def feature_names(self) -> list[str]:
        names = [f"ibr_{r.bus}" for r in self.ibrs]
        names += [f"sg_{g.bus}" for g in self.generators]
        names += [f"pd_{ld.bus}" for ld in self.loads]
        names += [f"qd_{ld.bus}" for ld in self.loads]
        return names

    def feature_slices(self) -> dict[str, slice]:
        ni, ng, nl = len(self.ibrs), len(self.generators), len(self.loads)
        return {"ibr": slice(0, ni), "sg": slice(ni, ni + ng),
                "pd": slice(ni + ng, ni + ng + nl), "qd": slice(ni + ng + nl, ni + ng + 2 * nl)}

    def base_features(self) -> np.ndarray:
        return np.concatenate([[r.forecast for r in self.ibrs],
                               [g.p for g in self.generators],
                               [ld.pd for ld in self.loads],
                               [ld.qd for ld in self.loads]])

    def split_features(self, x):
        s = self.feature_slices()
        x = np.asarray(x, dtype=float)
        return x[s["ibr"]], x[s["sg"]], x[s["pd"]], x[s["qd"]]

    def with_loads(self, pd, qd) -> "PowerSystemCase":
        loads = tuple(Load(ld.bus, float(p), float(q)) for ld, p, q in zip(self.loads, pd, qd))
        return replace(self, loads=loads)


def case_from_dict(data: dict) -> PowerSystemCase:
    try:
        buses = tuple(Bus(int(b["id"]), b["type"], float(b.get("vm", 1.0)),
                          float(b.get("vmin", 0.9)), float(b.get("vmax", 1.1)))
                      for b in data["buses"])
        lines = tuple(Line(int(ln.get("id", k + 1)), int(ln["from"]), int(ln["to"]),
                           float(ln["r"]), float(ln["x"]), float(ln.get("b", 0.0)),
                           float(ln.get("rating", 9999.0)))
                      for k, ln in enumerate(data["lines"]))
        gens = tuple(Generator(int(g["bus"]), float(g["M"]), float(g.get("D", 0.0)),
                               float(g["xd_prime"]), float(g["pmin"]), float(g["pmax"]),
                               float(g["qmin"]), float(g["qmax"]),
                               tuple(float(c) for c in g.get("cost", (0.0, 0.0, 0.0))),
                               float(g.get("p", 0.0)))
                     for g in data["generators"])
        ibrs = tuple(IBR(int(r["bus"]), float(r["s_rated"]), float(r.get("curtailment_cost", 0.0)),
                         float(r["forecast"]))
                     for r in data.get("ibrs", []))
        loads = tuple(Load(int(ld["bus"]), float(ld["pd"]), float(ld.get("qd", 0.0)))
                      for ld in data.get("loads", []))
        return PowerSystemCase(buses, lines, gens, ibrs, loads,
                               float(data.get("base_mva", 100.0)), data.get("name", ""))
    except (KeyError, TypeError) as exc:
        raise CaseError(f"malformed case description: {exc}") from exc


def case_to_dict(case: PowerSystemCase) -> dict:
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [{"id": b.id, "type": b.type, "vm": b.vm, "vmin": b.vmin, "vmax": b.vmax}
                  for b in case.buses],
        "lines": [{"id": ln.id, "from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x,
                   "b": ln.b, "rating": ln.rating} for ln in case.lines],
        "generators": [{"bus": g.bus, "M": g.M, "D": g.D, "xd_prime": g.xd_prime,
                        "pmin": g.pmin, "pmax": g.pmax, "qmin": g.qmin, "qmax": g.qmax,
                        "cost": list(g.cost), "p": g.p} for g in case.generators],
        "ibrs": [{"bus": r.bus, "s_rated": r.s_rated, "curtailment_cost": r.curtailment_cost,
                  "forecast": r.forecast} for r in case.ibrs],
        "loads": [{"bus": ld.bus, "pd": ld.pd, "qd": ld.qd} for ld in case.loads],
    }


def load_case(path) -> PowerSystemCase:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}: {exc}") from exc
    return case_from_dict(data)


def save_case(case: PowerSystemCase, path) -> None:
    Path(path).write_text(json.dumps(case_to_dict(case), indent=1))
