"""Staged certification: attack first, then cheap bounds, then complete search."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..attack import AttackConfig, pgd_attack
from ..ball import PerturbationBall
from ..nn import Network, margin
from .bab import BabBudget, bound_domain, branch_and_bound
from .bounds import empty_splits, objective_net
from .optimize import ITERATIONS, LEARNING_RATE
from .outcome import SAFE_INCOMPLETE, UNKNOWN, UNSAFE, VerifyOutcome

log = logging.getLogger(__name__)


@dataclass
class VerifyConfig:
    attack: AttackConfig = field(default_factory=AttackConfig)
    use_attack: bool = True
    iters: int = ITERATIONS
    lr: float = LEARNING_RATE
    use_bab: bool = True
    bab: BabBudget = field(default_factory=BabBudget)


def verify_pipeline(net: Network, ball: PerturbationBall, cfg: VerifyConfig = VerifyConfig()) -> VerifyOutcome:
    """Certify that the classifier keeps the center's class over the whole box.

    Stages: projected gradient attack (unsafe-PGD), alpha-optimized CROWN
    (safe-incomplete), then branch and bound (safe-complete / unsafe /
    unknown). Each stage runs only if the previous one was inconclusive.
    """
    m0 = float(margin(net, ball.center))
    if m0 == 0:
        raise ValueError("center lies exactly on the decision boundary; class is ambiguous")
    sign = float(np.sign(m0))
    times = {}

    if cfg.use_attack:
        t = time.perf_counter()
        x = pgd_attack(net, ball, cfg.attack, target_sign=sign)
        times["pgd"] = time.perf_counter() - t
        if x is not None:
            return VerifyOutcome(UNSAFE, None, x, "pgd", 0, times)

    t = time.perf_counter()
    onet = objective_net(net, sign)
    root = bound_domain(onet, ball, empty_splits(onet), None, cfg.iters, cfg.lr)
    times["alpha-crown"] = time.perf_counter() - t
    if root.lower > 0:
        return VerifyOutcome(SAFE_INCOMPLETE, root.lower, None, "alpha-crown", 1, times)
    if not cfg.use_bab:
        return VerifyOutcome(UNKNOWN, root.lower, None, "alpha-crown", 1, times)

    out = branch_and_bound(net, ball, cfg.bab, sign=sign, root=root)
    out.stage_times = {**times, **out.stage_times}
    return out


@dataclass
class PerturbationSearch:
    safe_scale: float                 # largest scale certified safe (0 if none)
    unsafe_scale: float | None        # smallest scale not certified safe, if found
    unsafe_status: str | None
    outcomes: list = field(default_factory=list)   # (scale, VerifyOutcome) in evaluation order


def max_safe_perturbation(net: Network, center, radii, scales=None, resolution: float = 1e-3,
                          cfg: VerifyConfig = VerifyConfig()) -> PerturbationSearch:
    """Largest multiple ``s`` of ``radii`` for which the box is certified safe.

    Sweeps the increasing ``scales`` schedule until the first scale that is
    not certified, then bisects between the last certified scale and that
    one down to ``resolution``. Unknown outcomes count as not certified.
    """
    center = np.asarray(center, dtype=float)
    radii = np.asarray(radii, dtype=float)
    scales = np.linspace(0.1, 1.0, 10) if scales is None else np.asarray(scales, dtype=float)
    if np.any(np.diff(scales) <= 0) or np.any(scales < 0):
        raise ValueError("scales must be non-negative and strictly increasing")
    search = PerturbationSearch(0.0, None, None)

    def check(s):
        out = verify_pipeline(net, PerturbationBall(center, radii * s), cfg)
        search.outcomes.append((float(s), out))
        return out

    lo, hi, hi_out = 0.0, None, None
    for s in scales:
        out = check(s)
        if out.safe:
            lo = float(s)
        else:
            hi, hi_out = float(s), out
            break
    if hi is None:
        search.safe_scale = lo
        return search
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        out = check(mid)
        if out.safe:
            lo = mid
        else:
            hi, hi_out = mid, out
    search.safe_scale = lo
    search.unsafe_scale = hi
    search.unsafe_status = hi_out.status
    return search
