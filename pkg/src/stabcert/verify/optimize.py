"""Projected ascent on relaxation slopes (alpha) and split multipliers (beta)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ball import PerturbationBall
from .bounds import (LayerBounds, LinearForm, crown_backward, default_alpha, empty_splits,
                     intermediate_bounds, interval_objective_bound, objective_net)

ITERATIONS = 20
LEARNING_RATE = 0.1
DECAY = 0.98


@dataclass
class OptimizedBound:
    bound: float            # best bound seen (linear relaxation only)
    alphas: list[np.ndarray]
    betas: list[np.ndarray] | None
    form: LinearForm
    initial: float          # bound at the starting alpha/beta
    beta_vector: np.ndarray | None = None


class _Adam:
    def __init__(self, shapes, b1=0.9, b2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0

    def direction(self, grads):
        self.t += 1
        out = []
        for k, g in enumerate(grads):
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1 ** self.t)
            vh = self.v[k] / (1 - self.b2 ** self.t)
            out.append(mh / (np.sqrt(vh) + self.eps))
        return out


def optimize_bound(onet, ball: PerturbationBall, bounds: LayerBounds, splits, alphas=None,
                   betas=None, iters: int = ITERATIONS, lr: float = LEARNING_RATE,
                   decay: float = DECAY, optimize_beta: bool = True) -> OptimizedBound:
    """Maximize the CROWN bound over alpha in [0,1] (and beta >= 0 when splits exist).

    Adam-scaled projected ascent with a geometrically decaying step; the best
    iterate is kept, so the result never falls below the starting bound.
    """
    onet = objective_net(onet)
    alphas = [a.copy() for a in (default_alpha(bounds) if alphas is None else alphas)]
    has_splits = any(np.any(s != 0) for s in splits)
    use_beta = optimize_beta and has_splits
    if use_beta:
        betas = [np.zeros(len(s)) if betas is None else b.copy() for s, b in
                 zip(splits, betas if betas is not None else [None] * len(splits))]
    else:
        betas = None
    unstable = [bounds.unstable(i) for i in range(len(bounds.lower))]
    split_mask = [s != 0 for s in splits]

    res = crown_backward(onet, ball, bounds, splits, alphas, betas)
    best = OptimizedBound(res.bound, [a.copy() for a in alphas],
                          None if betas is None else [b.copy() for b in betas], res.form,
                          res.bound)
    n_free = sum(int(u.sum()) for u in unstable) + (sum(int(m.sum()) for m in split_mask) if use_beta else 0)
    if n_free == 0 or iters <= 0:
        return best

    shapes = [a.shape for a in alphas] + ([b.shape for b in betas] if use_beta else [])
    adam = _Adam(shapes)
    step = lr
    for _ in range(iters):
        grads = [np.where(u, g, 0.0) for u, g in zip(unstable, res.grad_alpha)]
        if use_beta:
            grads += [np.where(m, g, 0.0) for m, g in zip(split_mask, res.grad_beta)]
        dirs = adam.direction(grads)
        nl = len(alphas)
        alphas = [np.clip(a + step * d, 0.0, 1.0) for a, d in zip(alphas, dirs[:nl])]
        if use_beta:
            betas = [np.maximum(b + step * d, 0.0) for b, d in zip(betas, dirs[nl:])]
        step *= decay
        res = crown_backward(onet, ball, bounds, splits, alphas, betas)
        if res.bound > best.bound:
            best = OptimizedBound(res.bound, [a.copy() for a in alphas],
                                  None if betas is None else [b.copy() for b in betas],
                                  res.form, best.initial)
    return best


@dataclass
class AlphaCrownResult:
    bound: float          # certified lower bound after slope optimization
    crown_bound: float    # certified lower bound at the initial slopes
    alphas: list[np.ndarray]
    bounds: LayerBounds
    form: LinearForm | None = None


def alpha_crown(net, ball: PerturbationBall, iters: int = ITERATIONS, lr: float = LEARNING_RATE,
                splits=None, sign: float = 1.0) -> AlphaCrownResult:
    """CROWN with optimized lower slopes; never worse than plain CROWN."""
    onet = objective_net(net, sign)
    splits = empty_splits(onet) if splits is None else splits
    bounds = intermediate_bounds(onet, ball, splits)
    if not bounds.feasible:
        inf = float("inf")
        return AlphaCrownResult(inf, inf, default_alpha(bounds), bounds)
    opt = optimize_bound(onet, ball, bounds, splits, iters=iters, lr=lr, optimize_beta=False)
    ibp = interval_objective_bound(onet, ball, bounds)
    return AlphaCrownResult(max(opt.bound, ibp), max(opt.initial, ibp), opt.alphas, bounds,
                            opt.form)
