"""Independent reference computations used by the tests."""

import itertools

import numpy as np
from scipy.optimize import linprog

from stabcert.nn import forward, output_vector


def _affine_layers(net):
    """Layers as affine maps of the raw input, built from the stored weights."""
    W0 = net.layers[0].W / net.scale
    b0 = net.layers[0].b - W0 @ net.shift
    Ws = [W0] + [L.W for L in net.layers[1:]]
    bs = [b0] + [L.b for L in net.layers[1:]]
    return Ws, bs


def exact_min_objective(net, ball, sign=1.0):
    """min over the box of sign * output functional, by depth-first enumeration of
    activation patterns with an LP feasibility check at every partial pattern."""
    Ws, bs = _affine_layers(net)
    c = sign * output_vector(net)
    d = net.input_dim
    bounds = list(zip(ball.lower, ball.upper))
    zero = np.zeros(d)

    def feasible(A, b):
        if not A:
            return True
        res = linprog(zero, A_ub=np.array(A), b_ub=np.array(b), bounds=bounds, method="highs")
        return res.status == 0

    best = [np.inf]

    def finish(H, h0, A, b):
        # last layer: objective c^T (W H x + W h0 + b)
        g = c @ (Ws[-1] @ H)
        g0 = c @ (Ws[-1] @ h0 + bs[-1])
        res = linprog(g, A_ub=np.array(A) if A else None, b_ub=np.array(b) if b else None,
                      bounds=bounds, method="highs")
        if res.status == 0:
            best[0] = min(best[0], float(res.fun + g0))

    def rec(k, j, H, h0, Hn, hn0, A, b):
        # H, h0: previous post-activation as affine map of x; Hn, hn0: current layer so far
        if k == len(Ws) - 1:
            finish(H, h0, A, b)
            return
        n = Ws[k].shape[0]
        if j == n:
            rec(k + 1, 0, Hn, hn0, None, None, A, b)
            return
        if Hn is None:
            Hn, hn0 = np.zeros((n, d)), np.zeros(n)
        a = Ws[k][j] @ H
        a0 = Ws[k][j] @ h0 + bs[k][j]
        lo = a @ ball.center - np.abs(a) @ ball.radii + a0
        hi = a @ ball.center + np.abs(a) @ ball.radii + a0
        for active in (True, False):
            if (active and hi < 0) or (not active and lo > 0):
                continue            # sign fixed over the whole box
            A2, b2 = A + [-a if active else a], b + [a0 if active else -a0]
            if lo < 0 < hi and not feasible(A2, b2):
                continue
            H2, h2 = Hn.copy(), hn0.copy()
            if active:
                H2[j], h2[j] = a, a0
            rec(k, j + 1, H, h0, H2, h2, A2, b2)

    rec(0, 0, np.eye(d), np.zeros(d), None, None, [], [])
    return best[0]


def sampled_min_objective(net, ball, sign=1.0, n=10_000, seed=0):
    """Minimum over all box corners (when few) plus uniform samples, n points in total."""
    rng = np.random.default_rng(seed)
    pts = []
    if ball.dim <= 12:
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=ball.dim)))
        pts.append(ball.center + signs * ball.radii)
    m = n - sum(len(p) for p in pts)
    pts.append(ball.sample(rng, max(m, 0)))
    X = np.vstack(pts)
    return float(np.min(sign * forward(net, X) @ output_vector(net)))
