"""Preventive control: bisection on the stability margin around OPF and certification."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .ball import PerturbationBall
from .dataset import solve_scenario
from .grid import FaultScenario, PowerFlowError, PowerSystemCase, simulate_tsi
from .nn import Network, margin
from .opf import OpfError, OpfProblem, PdipmOptions, pdipm_solve
from .verify import VerifyConfig, VerifyOutcome, verify_pipeline

log = logging.getLogger(__name__)

LAMBDA_RIGHT = 90.0
DELTA0 = 2.0
ZETA = 1.0

INFEASIBLE_ADVICE = ("No feasible solution. Reduce the range of the perturbation ball "
                     "or consider load shedding.")


@dataclass(frozen=True)
class IterationRecord:
    ite: int
    lam: float
    converged: bool
    status: str
    cost: float | None = None
    tsi: float | None = None       # regressor estimate at the strategy


@dataclass(frozen=True)
class BisectionState:
    lam: float = 0.0
    left: float = 0.0
    right: float = LAMBDA_RIGHT
    delta: float = DELTA0
    zeta: float = ZETA
    log: tuple[IterationRecord, ...] = ()
    terminal: str | None = None     # "infeasible" once no strategy can be found

    def __post_init__(self):
        if self.zeta <= 0:
            raise ValueError("termination tolerance must be positive")
        if not self.left <= self.lam <= self.right:
            raise ValueError(f"need left <= lambda <= right, got {self.left}, {self.lam}, {self.right}")

    @property
    def done(self) -> bool:
        # the first iteration always runs, whatever the initial delta
        return self.terminal is not None or (len(self.log) > 0 and abs(self.delta) < self.zeta)


def bisection_step(state: BisectionState, converged: bool, safe, cost=None, tsi=None) -> BisectionState:
    """Advance the margin after one OPF + verification round.

    converged and unsafe: raise the margin towards the right end.
    not converged and unsafe: terminal, no feasible strategy.
    otherwise (safe, or not converged but safe): lower it towards the left end.
    ``safe`` may be a bool or a VerifyOutcome.
    """
    status = safe.status if isinstance(safe, VerifyOutcome) else ("safe" if safe else "unsafe")
    is_safe = safe.safe if isinstance(safe, VerifyOutcome) else bool(safe)
    rec = IterationRecord(len(state.log) + 1, state.lam, bool(converged), status, cost, tsi)
    logs = state.log + (rec,)
    if converged and not is_safe:
        delta = state.right - state.lam
        left = state.lam
        return replace(state, lam=left + delta / 2, left=left, delta=delta, log=logs)
    if not converged and not is_safe:
        return replace(state, log=logs, terminal="infeasible")
    delta = state.lam - state.left
    right = state.lam
    return replace(state, lam=state.left + delta / 2, right=right, delta=delta, log=logs)


@dataclass
class BallSpec:
    """Relative radii (percent of the nominal value) per device class."""
    ibr: float = 10.0
    sg: float = 10.0
    load: float = 5.0

    def __post_init__(self):
        if min(self.ibr, self.sg, self.load) < 0 or max(self.ibr, self.sg, self.load) >= 100:
            raise ValueError("percent radii must lie in [0, 100)")

    def ball(self, case: PowerSystemCase, center) -> PerturbationBall:
        sl = case.feature_slices()
        frac = np.zeros(len(center))
        frac[sl["ibr"]] = self.ibr / 100
        frac[sl["sg"]] = self.sg / 100
        frac[sl["pd"]] = self.load / 100
        frac[sl["qd"]] = self.load / 100
        return PerturbationBall.from_relative(center, frac)


@dataclass
class ControlStrategy:
    x: np.ndarray                 # [p_ibr, p_sg, pd, qd], MW / MVAr
    lam: float
    status: str
    cost: float
    tsi_estimate: float | None = None

    def to_dict(self, case: PowerSystemCase) -> dict:
        return {
            "features": dict(zip(case.feature_names(), (float(v) for v in self.x))),
            "lambda": float(self.lam),
            "status": self.status,
            "cost": float(self.cost),
            "tsi_estimate": None if self.tsi_estimate is None else float(self.tsi_estimate),
        }


@dataclass
class ControlResult:
    strategy: ControlStrategy | None
    state: BisectionState
    ball: PerturbationBall | None = None
    tds_tsi: float | None = None          # TDS re-validation of the final strategy
    message: str = ""
    timings: list = field(default_factory=list)

    @property
    def certified(self) -> bool:
        return self.strategy is not None

    def table_rows(self):
        for rec in self.state.log:
            yield [rec.ite, repr(float(rec.lam)), rec.converged, rec.status,
                   "" if rec.cost is None else repr(float(rec.cost)),
                   "" if rec.tsi is None else repr(float(rec.tsi))]

    def write_table(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ite", "lambda", "converge", "verification", "cost", "tsi"])
            w.writerows(self.table_rows())


def _strategy_tsi(case, fault, x) -> float | None:
    try:
        op = solve_scenario(case, x)
    except PowerFlowError as exc:
        log.warning("final strategy has no power-flow solution: %s", exc)
        return None
    return simulate_tsi(case, op, fault)


def run_preventive_control(case: PowerSystemCase, fault: FaultScenario | None, net_c: Network,
                           net_e: Network, ball_spec: BallSpec = BallSpec(),
                           forecast=None, pd=None, qd=None,
                           verify_cfg: VerifyConfig = VerifyConfig(),
                           opf_opts: PdipmOptions = PdipmOptions(),
                           lam_right: float = LAMBDA_RIGHT, zeta: float = ZETA,
                           max_iterations: int = 50, verifier=None) -> ControlResult:
    """Raise the learned stability margin until the OPF strategy certifies safe.

    Each round solves the stability-constrained OPF at the current margin,
    builds the perturbation ball around its strategy and certifies the
    classifier over it; the bisection decides the next margin. The most
    recent converged and certified strategy is returned and re-checked with
    one time-domain simulation when ``fault`` is given. ``verifier`` replaces
    the certification call (signature of ``verify_pipeline``).
    """
    if net_c.input_dim != net_e.input_dim:
        raise ValueError("classifier and regressor use different input layouts")
    if net_c.input_dim != len(case.feature_names()):
        raise ValueError("networks do not match the case feature layout")
    verifier = verify_pipeline if verifier is None else verifier
    state = BisectionState(right=lam_right, zeta=zeta)
    best: ControlStrategy | None = None
    best_ball = None
    timings = []
    while not state.done:
        if len(state.log) >= max_iterations:
            log.warning("stopping after %d iterations", max_iterations)
            break
        t0 = time.perf_counter()
        prob = OpfProblem(case, forecast, pd, qd, lam=state.lam, net=net_e)
        try:
            sol = pdipm_solve(prob, opts=opf_opts)
        except OpfError as exc:
            raise OpfError(f"iteration {len(state.log) + 1} (lambda={state.lam}): {exc}") from exc
        t1 = time.perf_counter()
        ball = ball_spec.ball(case, sol.strategy)
        try:
            outcome = verifier(net_c, ball, verify_cfg)
        except ValueError as exc:
            raise ValueError(f"iteration {len(state.log) + 1} (lambda={state.lam}): {exc}") from exc
        t2 = time.perf_counter()
        timings.append({"opf": t1 - t0, "verify": t2 - t1})
        tsi_c = float(margin(net_c, sol.strategy))
        if (tsi_c > 0) != (sol.tsi_estimate > 0):
            log.info("classifier and regressor disagree at lambda=%g (margin %.3g, TSI %.3g)",
                     state.lam, tsi_c, sol.tsi_estimate)
        log.info("lambda=%g converged=%s status=%s cost=%.2f", state.lam, sol.converged,
                 outcome.status, sol.cost)
        if sol.converged and outcome.safe:
            best = ControlStrategy(sol.strategy.copy(), state.lam, outcome.status, sol.cost,
                                   sol.tsi_estimate)
            best_ball = ball
        state = bisection_step(state, sol.converged, outcome, sol.cost, sol.tsi_estimate)

    if state.terminal == "infeasible":
        return ControlResult(None, state, None, None, INFEASIBLE_ADVICE, timings)
    if best is None:
        return ControlResult(None, state, None, None,
                             "no converged strategy was certified safe; " + INFEASIBLE_ADVICE, timings)
    tsi = _strategy_tsi(case, fault, best.x) if fault is not None else None
    msg = "certified"
    if tsi is not None and tsi <= 0:
        msg = "certified by the surrogate but unstable in time-domain simulation"
        log.warning(msg)
    return ControlResult(best, state, best_ball, tsi, msg, timings)


def monte_carlo_validation(case: PowerSystemCase, fault: FaultScenario, ball: PerturbationBall,
                           n: int = 500, seed: int = 0) -> np.ndarray:
    """TDS stability index at ``n`` uniform points of the ball (NaN when power flow fails).

    The slack unit re-balances each sample, so its entry is replaced by the
    power-flow value.
    """
    rng = np.random.default_rng(seed)
    out = np.full(n, np.nan)
    for k, x in enumerate(ball.sample(rng, n)):
        try:
            op = solve_scenario(case, x)
        except PowerFlowError:
            continue
        out[k] = simulate_tsi(case, op, fault)
    return out
