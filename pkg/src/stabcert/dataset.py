"""Scenario sampling around a base case and TDS-based stability labels."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import (FaultScenario, PowerFlowError, PowerSystemCase, simulate_tsi,
                   solve_power_flow)

log = logging.getLogger(__name__)


class DatasetError(RuntimeError):
    pass


@dataclass
class ScenarioSampler:
    case: PowerSystemCase
    ibr_range: float = 0.2     # relative half-widths of the uniform ranges
    sg_range: float = 0.2
    load_range: float = 0.1
    count: int = 100
    seed: int = 0

    def __post_init__(self):
        if min(self.ibr_range, self.sg_range, self.load_range) < 0:
            raise ValueError("ranges must be non-negative")
        if self.count < 1:
            raise ValueError("count must be >= 1")


def _base_losses(case: PowerSystemCase) -> float:
    op = solve_power_flow(case)
    return float(op.pg.sum() + op.p_ibr.sum() - op.pd.sum())


def sample_scenarios(sampler: ScenarioSampler) -> np.ndarray:
    """Draw input vectors [P_IBR, P_SG, Pd, Qd] uniformly around the base case.

    Each entry is base * (1 + u), u ~ U(-range, range) for its device class.
    SG outputs are then rescaled by a common factor so generation covers
    load plus the base-case losses; the power flow later lets the slack
    absorb the remainder.
    Negative values are clamped to zero with a warning.
    """
    case = sampler.case
    rng = np.random.default_rng(sampler.seed)
    base = case.base_features()
    sl = case.feature_slices()
    rel = np.zeros_like(base)
    rel[sl["ibr"]] = sampler.ibr_range
    rel[sl["sg"]] = sampler.sg_range
    rel[sl["pd"]] = sampler.load_range
    rel[sl["qd"]] = sampler.load_range
    X = base * (1.0 + rel * rng.uniform(-1.0, 1.0, size=(sampler.count, base.size)))

    sg = sl["sg"]
    if np.any(rel > 0):
        losses = _base_losses(case)
        need = X[:, sl["pd"]].sum(axis=1) + losses - X[:, sl["ibr"]].sum(axis=1)
        have = X[:, sg].sum(axis=1)
        factor = np.where(have > 0, need / np.where(have > 0, have, 1.0), 1.0)
        X[:, sg] *= factor[:, None]
    neg = X < 0
    if np.any(neg):
        log.warning("clamping %d negative sampled powers to 0", int(neg.sum()))
        X[neg] = 0.0
    return X


@dataclass
class Dataset:
    names: list[str]
    X: np.ndarray
    tsi: np.ndarray
    stable: np.ndarray
    dropped: int = 0

    def __len__(self):
        return self.X.shape[0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.names + ["tsi", "stable"])
            for x, t, s in zip(self.X, self.tsi, self.stable):
                w.writerow([repr(float(v)) for v in x] + [repr(float(t)), int(s)])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][-2:] != ["tsi", "stable"]:
            raise DatasetError(f"{path}: expected a header ending in tsi,stable")
        data = np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        return cls(rows[0][:-2], data[:, :-2], data[:, -2], data[:, -1].astype(int))

    def split(self, test_fraction: float = 0.2, seed: int = 0):
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        parts = []
        for idx in (order[n_test:], order[:n_test]):
            parts.append(Dataset(self.names, self.X[idx], self.tsi[idx], self.stable[idx]))
        return tuple(parts)


def solve_scenario(case: PowerSystemCase, x):
    """Power flow for one input vector; the slack SG entry is an output."""
    p_ibr, p_sg, pd, qd = case.split_features(x)
    return solve_power_flow(case, p_sg=p_sg, p_ibr=p_ibr, pd=pd, qd=qd)


def _label_one(args):
    case, fault, x = args
    try:
        op = solve_scenario(case, x)
    except PowerFlowError:
        return None
    return op.features(), simulate_tsi(case, op, fault)


def label_dataset(scenarios, case: PowerSystemCase, fault: FaultScenario | None,
                  workers: int = 1) -> Dataset:
    """Solve power flow and simulate the fault for each scenario.

    Scenarios whose power flow fails are dropped and counted. Rows keep the
    scenario order whatever the number of workers; ``fault=None`` simulates
    the undisturbed system.
    """
    fault = FaultScenario() if fault is None else fault
    jobs = [(case, fault, np.asarray(x, dtype=float)) for x in scenarios]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_label_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_label_one(j) for j in jobs]
    kept = [r for r in results if r is not None]
    dropped = len(results) - len(kept)
    if not kept:
        raise DatasetError("no scenario has a feasible power flow")
    if dropped:
        log.warning("dropped %d scenarios with infeasible power flow", dropped)
    X = np.array([r[0] for r in kept])
    tsi = np.array([r[1] for r in kept])
    return Dataset(case.feature_names(), X, tsi, (tsi > 0).astype(int), dropped)


def write_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    ds.to_csv(path)
    return path
