"""Branch and bound over ReLU activation splits."""

from __future__ import annotations

import heapq
import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from ..attack import AttackConfig, pgd_attack
from ..ball import PerturbationBall
from ..nn import Network, margin
from .bounds import (LayerBounds, ObjectiveNet, default_alpha, empty_splits, flatten_beta,
                     intermediate_bounds, interval_objective_bound, objective_net, with_split)
from .optimize import ITERATIONS, LEARNING_RATE, optimize_bound
from .outcome import SAFE_COMPLETE, UNKNOWN, UNSAFE, VerifyOutcome

log = logging.getLogger(__name__)


@dataclass
class Domain:
    splits: tuple[np.ndarray, ...]
    bounds: LayerBounds
    alphas: list[np.ndarray]
    betas: list[np.ndarray] | None
    lower: float
    depth: int = 0
    candidate: np.ndarray | None = None  # minimizer of the bounding linear form

    @property
    def infeasible(self) -> bool:
        return self.lower == np.inf


@dataclass
class BabBudget:
    max_domains: int = 4096
    max_seconds: float = 60.0
    iters: int = ITERATIONS
    lr: float = LEARNING_RATE
    attack_steps: int = 10
    seed: int = 0


@dataclass
class BabStats:
    domains: int = 0          # domains bounded (including the root)
    pruned: int = 0
    infeasible: int = 0
    leaves: int = 0           # fully split domains solved exactly
    max_depth: int = 0
    history: list = field(default_factory=list)   # global lower bound after each pop


def _leaf_affine(onet: ObjectiveNet, bounds: LayerBounds, splits):
    """Affine maps of each hidden pre-activation and the objective on a stable domain."""
    G = np.eye(onet.weights[0].shape[1])
    g = np.zeros(G.shape[0])
    A_ub, b_ub = [], []
    for k in range(onet.n_hidden_layers):
        Gk = onet.weights[k] @ G
        gk = onet.weights[k] @ g + onet.biases[k]
        l, u = bounds.lower[k], bounds.upper[k]
        s = splits[k]
        active = (s > 0) | ((s == 0) & (l + u > 0))
        for j in np.flatnonzero(s > 0):
            A_ub.append(-Gk[j])
            b_ub.append(gk[j])
        for j in np.flatnonzero(s < 0):
            A_ub.append(Gk[j])
            b_ub.append(-gk[j])
        G = Gk * active[:, None]
        g = gk * active
    a = onet.weights[-1][0] @ G
    c = float(onet.weights[-1][0] @ g + onet.biases[-1][0])
    return a, c, A_ub, b_ub


def solve_leaf(onet: ObjectiveNet, ball: PerturbationBall, bounds: LayerBounds, splits):
    """Exact minimum over a domain in which every neuron has a fixed phase.

    Returns (value, minimizer); value is +inf when the split constraints leave
    nothing of the box.
    """
    a, c, A_ub, b_ub = _leaf_affine(onet, bounds, splits)
    box = list(zip(ball.lower, ball.upper))
    res = linprog(a, A_ub=np.array(A_ub) if A_ub else None, b_ub=np.array(b_ub) if b_ub else None,
                  bounds=box, method="highs")
    if res.status == 2:
        return float("inf"), None
    if res.status != 0:
        raise RuntimeError(f"leaf LP failed: {res.message}")
    return float(res.fun + c), res.x


def bound_domain(onet: ObjectiveNet, ball: PerturbationBall, splits, parent: Domain | None = None,
                 iters: int = ITERATIONS, lr: float = LEARNING_RATE) -> Domain:
    """Tighten intermediate bounds and optimize alpha/beta for one domain.

    The child inherits the parent's slopes and multipliers as a warm start
    and its bound never drops below the parent's.
    """
    bounds = intermediate_bounds(onet, ball, splits, None if parent is None else parent.bounds)
    depth = 0 if parent is None else parent.depth + 1
    if not bounds.feasible:
        return Domain(splits, bounds, default_alpha(bounds), None, float("inf"), depth)
    alphas = default_alpha(bounds) if parent is None else [a.copy() for a in parent.alphas]
    betas = None if parent is None or parent.betas is None else [b.copy() for b in parent.betas]
    opt = optimize_bound(onet, ball, bounds, splits, alphas, betas, iters=iters, lr=lr)
    lower = max(opt.bound, interval_objective_bound(onet, ball, bounds))
    if parent is not None:
        lower = max(lower, parent.lower)
    coef = opt.form.a
    if opt.betas is not None and opt.form.P is not None and opt.form.P.shape[1]:
        coef = coef + opt.form.P @ flatten_beta(splits, opt.betas)
    candidate = ball.center - np.sign(coef) * ball.radii
    return Domain(splits, bounds, opt.alphas, opt.betas, lower, depth, candidate)


def beta_crown_domain(net, ball: PerturbationBall, splits=None, parent: Domain | None = None,
                      iters: int = ITERATIONS, lr: float = LEARNING_RATE, sign: float = 1.0) -> Domain:
    """Certified lower bound of ``sign * margin`` on one split domain."""
    onet = objective_net(net, sign)
    splits = empty_splits(onet) if splits is None else splits
    return bound_domain(onet, ball, splits, parent, iters, lr)


def branching_choice(domain: Domain) -> tuple[int, int] | None:
    """Unstable neuron with the largest u*(-l)/(u-l); ties go to the lowest layer, then index."""
    best, choice = -1.0, None
    for k, (l, u) in enumerate(zip(domain.bounds.lower, domain.bounds.upper)):
        mask = domain.bounds.unstable(k) & (domain.splits[k] == 0)
        if not np.any(mask):
            continue
        score = np.where(mask, u * (-l) / np.where(mask, u - l, 1.0), -1.0)
        j = int(np.argmax(score))
        if score[j] > best:
            best, choice = float(score[j]), (k, j)
    return choice


def _is_counterexample(net: Network, x, sign: float) -> bool:
    return x is not None and sign * float(margin(net, x)) <= 0


def branch_and_bound(net: Network, ball: PerturbationBall, budget: BabBudget = BabBudget(),
                     sign: float | None = None, root: Domain | None = None) -> VerifyOutcome:
    """Complete search for a sign flip of the margin inside ``ball``.

    Domains are kept in a heap keyed by their lower bound and the weakest is
    split first. Every popped domain is probed for a concrete counterexample
    at the minimizer of its bounding form and by a short attack from there.
    Domains with no unstable neuron left are solved exactly by linear
    programming. Returns safe-complete, unsafe or unknown (budget exhausted).
    """
    t0 = time.perf_counter()
    if sign is None:
        sign = float(np.sign(margin(net, ball.center)))
        if sign == 0:
            raise ValueError("center lies exactly on the decision boundary")
    if _is_counterexample(net, ball.center, sign):
        return VerifyOutcome(UNSAFE, None, ball.center.copy(), "bab")
    onet = objective_net(net, sign)
    stats = BabStats()
    if root is None:
        root = bound_domain(onet, ball, empty_splits(onet), None, budget.iters, budget.lr)
    stats.domains += 1
    attack = AttackConfig(steps=budget.attack_steps, restarts=1, seed=budget.seed)
    counter = itertools.count()
    heap = [(root.lower, next(counter), root)]
    floor = float("inf")     # weakest bound among domains discarded as safe

    def finish(status, bound, cex=None):
        out = VerifyOutcome(status, bound, cex, "bab", stats.domains, stats=stats)
        out.stage_times["bab"] = time.perf_counter() - t0
        return out

    while heap:
        global_lb = heap[0][0]
        if global_lb > 0:
            break
        if stats.domains >= budget.max_domains or time.perf_counter() - t0 > budget.max_seconds:
            return finish(UNKNOWN, global_lb)
        _, _, dom = heapq.heappop(heap)
        stats.history.append(global_lb)
        stats.max_depth = max(stats.max_depth, dom.depth)
        if dom.candidate is not None:
            if _is_counterexample(net, dom.candidate, sign):
                return finish(UNSAFE, global_lb, dom.candidate.copy())
            x = pgd_attack(net, ball, attack, target_sign=sign, starts=dom.candidate[None, :])
            if x is not None:
                return finish(UNSAFE, global_lb, x)
        choice = branching_choice(dom)
        if choice is None:
            stats.leaves += 1
            value, x = solve_leaf(onet, ball, dom.bounds, dom.splits)
            if x is not None and value <= 0:
                x = ball.project(x)
                if _is_counterexample(net, x, sign):
                    return finish(UNSAFE, global_lb, x)
                # solver tolerance left the LP point just on the safe side
                log.debug("leaf minimum %.3g not reproduced at the LP point", value)
                return finish(UNKNOWN, global_lb)
            floor = min(floor, value)
            continue
        k, j = choice
        for s in (1, -1):
            child = bound_domain(onet, ball, with_split(dom.splits, k, j, s), dom,
                                 budget.iters, budget.lr)
            stats.domains += 1
            if child.infeasible:
                stats.infeasible += 1
            elif child.lower > 0:
                stats.pruned += 1
                floor = min(floor, child.lower)
            else:
                heapq.heappush(heap, (child.lower, next(counter), child))
    bound = min(floor, heap[0][0]) if heap else floor
    return finish(SAFE_COMPLETE, bound)
