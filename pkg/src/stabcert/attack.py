"""Projected sign-gradient attack inside a perturbation box."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ball import PerturbationBall
from .nn import CLASSIFIER, Network, batch_input_gradient, margin


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 50
    eta: float = 0.1
    restarts: int = 10
    seed: int = 0
    # step_i = eta * radius_i; False gives the unscaled eta * sign(grad) step
    scale_by_radius: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


def pgd_attack(net: Network, ball: PerturbationBall, cfg: AttackConfig = AttackConfig(),
               target_sign: float | None = None, starts=None) -> np.ndarray | None:
    """Search the box for an input whose margin sign differs from the center's.

    All restarts start from independent uniform points of the box and ascend
    the cross-entropy loss against the center's class. The first flipping
    iterate (earliest step, then lowest restart index) is returned, or None.
    ``target_sign`` overrides the class being defended; ``starts`` replaces the
    random initial points with the given rows (projected into the box).
    """
    if net.head != CLASSIFIER:
        raise ValueError("attack needs a classifier network")
    m0 = float(margin(net, ball.center))
    s = np.sign(m0) if target_sign is None else float(np.sign(target_sign))
    if s == 0:
        raise ValueError("center lies exactly on the decision boundary; class is ambiguous")
    if not np.any(ball.radii > 0):
        return None
    rng = np.random.default_rng(cfg.seed)
    X = ball.sample(rng, cfg.restarts) if starts is None else ball.project(np.atleast_2d(starts))
    step = cfg.eta * ball.radii if cfg.scale_by_radius else np.full(ball.dim, cfg.eta)
    frozen = ball.radii == 0
    for _ in range(cfg.steps + 1):
        values, G = batch_input_gradient(net, X)
        flipped = np.flatnonzero(s * values <= 0)
        if flipped.size:
            return X[flipped[0]].copy()
        # d/dx log(1 + exp(-s m)) = -sigmoid(-s m) * s * grad m; only its sign is used
        weight = 1.0 / (1.0 + np.exp(np.clip(s * values, -50, 50)))
        direction = np.sign(-s * weight[:, None] * G)
        X = X + step * direction
        X[:, frozen] = ball.center[frozen]
        X = ball.project(X)
    return None
