"""Sound lower bounds on a scalar network objective over a perturbation box.

The objective is a fixed linear functional of the network output (the
stable-minus-unstable logit margin for classifiers). It is merged into the
last affine layer, so every routine here works on a list of ``(W, b)`` pairs
whose final layer has a single row and whose hidden layers are followed by
ReLU.

Split states mark hidden neurons as forced active (+1, z >= 0), forced
inactive (-1, z < 0) or free (0). Interval bounds of split neurons are
intersected with the corresponding half-line, and the Lagrangian term that
enforces each split carries the diagonal sign -split (so a forced-active
neuron contributes ``-beta * z``).
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from ..ball import PerturbationBall
from ..nn import Network, output_vector

# u - l below this is treated as a point interval
DEGENERATE_WIDTH = 1e-12
ROUNDING_TOL = 1e-10


@dataclass(frozen=True)
class ObjectiveNet:
    """Folded affine layers with the output functional merged into the last one."""
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    @property
    def n_hidden_layers(self) -> int:
        return len(self.weights) - 1

    @property
    def hidden_sizes(self) -> list[int]:
        return [W.shape[0] for W in self.weights[:-1]]

    def evaluate(self, x) -> np.ndarray:
        """Objective value and hidden pre-activations for a point or batch."""
        h = np.asarray(x, dtype=float)
        pre = []
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ W.T + b
            pre.append(z)
            h = np.maximum(z, 0.0)
        out = h @ self.weights[-1].T + self.biases[-1]
        return out[..., 0], pre


def objective_net(net: Network | ObjectiveNet, sign: float = 1.0) -> ObjectiveNet:
    """Scalar objective ``sign * (output functional)`` as a stack of affine layers."""
    if isinstance(net, ObjectiveNet):
        if sign == 1.0:
            return net
        Ws, bs = list(net.weights), list(net.biases)
    else:
        layers = net.folded()
        c = output_vector(net)
        Ws = [layer.W for layer in layers[:-1]] + [(c @ layers[-1].W)[None, :]]
        bs = [layer.b for layer in layers[:-1]] + [np.array([c @ layers[-1].b])]
    Ws[-1] = Ws[-1] * sign
    bs[-1] = bs[-1] * sign
    return ObjectiveNet(tuple(Ws), tuple(bs))


def empty_splits(net: Network | ObjectiveNet) -> tuple[np.ndarray, ...]:
    return tuple(np.zeros(n, dtype=np.int8) for n in objective_net(net).hidden_sizes)


def with_split(splits, layer: int, neuron: int, sign: int) -> tuple[np.ndarray, ...]:
    out = [s.copy() for s in splits]
    out[layer][neuron] = sign
    return tuple(out)


def split_constraints_hold(splits, pre, tol: float = 0.0) -> np.ndarray:
    """Whether each sampled point's pre-activations satisfy the split signs."""
    ok = None
    for s, z in zip(splits, pre):
        z = np.atleast_2d(z)
        good = np.all(((s > 0) & (z < -tol)) == False, axis=-1)  # noqa: E712
        good &= np.all(((s < 0) & (z > tol)) == False, axis=-1)  # noqa: E712
        ok = good if ok is None else ok & good
    return ok


@dataclass
class LayerBounds:
    lower: list[np.ndarray]
    upper: list[np.ndarray]

    @property
    def feasible(self) -> bool:
        return all(np.all(l <= u) for l, u in zip(self.lower, self.upper))

    def unstable(self, i: int) -> np.ndarray:
        return (self.lower[i] < 0) & (self.upper[i] > 0) & (self.upper[i] - self.lower[i] >= DEGENERATE_WIDTH)

    def n_unstable(self) -> int:
        return int(sum(self.unstable(i).sum() for i in range(len(self.lower))))

    def copy(self) -> "LayerBounds":
        return LayerBounds([l.copy() for l in self.lower], [u.copy() for u in self.upper])


@dataclass
class LinearForm:
    """Lower bound  (a + P beta)^T x + q^T beta + c  valid for every x in the box."""
    a: np.ndarray
    c: float
    P: np.ndarray | None = None
    q: np.ndarray | None = None


def _apply_splits(l, u, s):
    if s is not None:
        l = np.where(s > 0, np.maximum(l, 0.0), l)
        u = np.where(s < 0, np.minimum(u, 0.0), u)
    return l, u


def _interval_affine(W, b, lo, hi):
    mid = 0.5 * (lo + hi)
    rad = 0.5 * (hi - lo)
    center = W @ mid + b
    dev = np.abs(W) @ rad
    return center - dev, center + dev


def interval_bounds(net, ball: PerturbationBall, splits=None) -> LayerBounds:
    """Layer-wise interval arithmetic for every hidden pre-activation."""
    onet = objective_net(net)
    lo, hi = ball.lower, ball.upper
    lower, upper = [], []
    for i, (W, b) in enumerate(zip(onet.weights[:-1], onet.biases[:-1])):
        l, u = _interval_affine(W, b, lo, hi)
        l, u = _apply_splits(l, u, None if splits is None else splits[i])
        lower.append(l)
        upper.append(u)
        lo, hi = np.maximum(l, 0.0), np.maximum(u, 0.0)
    return LayerBounds(lower, upper)


def interval_objective_bound(net, ball: PerturbationBall, bounds: LayerBounds) -> float:
    """Interval lower bound of the objective given hidden-layer bounds."""
    onet = objective_net(net)
    if onet.n_hidden_layers == 0:
        lo, hi = ball.lower, ball.upper
    else:
        lo, hi = np.maximum(bounds.lower[-1], 0.0), np.maximum(bounds.upper[-1], 0.0)
    return float(_interval_affine(onet.weights[-1], onet.biases[-1], lo, hi)[0][0])


def relaxation(l: np.ndarray, u: np.ndarray):
    """Per-neuron ReLU relaxation pieces.

    Returns (active, unstable, upper_slope, upper_intercept). Stable neurons
    have exact slopes 1 (active) or 0 (inactive). Unstable neurons are bounded
    above by the chord u/(u-l) * (z - l); point intervals straddling zero are
    resolved by the sign of their midpoint.
    """
    width = u - l
    straddle = (l < 0) & (u > 0)
    degenerate = straddle & (width < DEGENERATE_WIDTH)
    unstable = straddle & ~degenerate
    active = (l >= 0) | (degenerate & (l + u >= 0))
    safe_width = np.where(unstable, width, 1.0)
    slope = np.where(unstable, u / safe_width, active.astype(float))
    intercept = np.where(unstable, -u * l / safe_width, 0.0)
    return active, unstable, slope, intercept


def default_alpha(bounds: LayerBounds) -> list[np.ndarray]:
    """Lower-slope initialization: 1 where u >= -l, else 0."""
    return [np.where(u >= -l, 1.0, 0.0) for l, u in zip(bounds.lower, bounds.upper)]


def _backward_matrix(onet: ObjectiveNet, bounds: LayerBounds, layer: int, A: np.ndarray,
                     alphas=None):
    """Back-substitute rows of ``A`` (coefficients on the pre-activation of
    ``layer``) to the input. Returns (input coefficients, constants)."""
    const = A @ onet.biases[layer]
    A = A @ onet.weights[layer]
    for i in range(layer - 1, -1, -1):
        l, u = bounds.lower[i], bounds.upper[i]
        active, unstable, slope, intercept = relaxation(l, u)
        alpha = default_alpha(bounds)[i] if alphas is None else alphas[i]
        lower_slope = np.where(unstable, alpha, active.astype(float))
        pos = A >= 0
        D = np.where(pos, lower_slope, slope)
        const = const + np.where(pos, 0.0, A * intercept).sum(axis=-1)
        Z = A * D
        const = const + Z @ onet.biases[i]
        A = Z @ onet.weights[i]
    return A, const


def _concretize_min(A, const, ball: PerturbationBall):
    return A @ ball.center - np.abs(A) @ ball.radii + const


def intermediate_bounds(net, ball: PerturbationBall, splits=None,
                        parent: LayerBounds | None = None) -> LayerBounds:
    """Interval bounds tightened by one CROWN pass per hidden layer.

    Bounds of each layer are intersected with the interval bounds, with the
    split half-lines and with ``parent`` (bounds of an enclosing domain).
    """
    onet = objective_net(net)
    ibp = interval_bounds(onet, ball, splits)
    bounds = LayerBounds([], [])
    for k in range(onet.n_hidden_layers):
        l, u = ibp.lower[k], ibp.upper[k]
        if k > 0:
            n = onet.weights[k].shape[0]
            A = np.vstack([np.eye(n), -np.eye(n)])
            Ain, const = _backward_matrix(onet, bounds, k, A)
            vals = _concretize_min(Ain, const, ball)
            l = np.maximum(l, vals[:n])
            u = np.minimum(u, -vals[n:])
        if parent is not None:
            l = np.maximum(l, parent.lower[k])
            u = np.minimum(u, parent.upper[k])
        # crossings within rounding (e.g. zero-width boxes) are not infeasibility
        tiny = (l > u) & (l - u <= ROUNDING_TOL * (1.0 + np.abs(l) + np.abs(u)))
        l, u = np.where(tiny, u, l), np.where(tiny, l, u)
        l, u = _apply_splits(l, u, None if splits is None else splits[k])
        bounds.lower.append(l)
        bounds.upper.append(u)
    return bounds


@dataclass
class BackwardResult:
    bound: float
    form: LinearForm
    grad_alpha: list[np.ndarray]
    grad_beta: list[np.ndarray]


def closed_form_inner_min(form: LinearForm, ball: PerturbationBall, beta=None) -> float:
    """Minimum of the linear form over the box, for fixed beta.

    -sum_i |a_i + (P beta)_i| eps_i + (P^T x0 + q)^T beta + a^T x0 + c
    """
    coef = form.a
    extra = 0.0
    if beta is not None and form.P is not None and form.P.shape[1] > 0:
        beta = np.asarray(beta, dtype=float)
        coef = coef + form.P @ beta
        extra = float((form.P.T @ ball.center + form.q) @ beta)
    return float(-np.abs(coef) @ ball.radii + extra + form.a @ ball.center + form.c)


def flatten_beta(splits, betas) -> np.ndarray:
    if betas is None:
        return np.zeros(sum(int(np.count_nonzero(s)) for s in splits))
    return np.concatenate([b[s != 0] for s, b in zip(splits, betas)]) if splits else np.zeros(0)


def crown_backward(net, ball: PerturbationBall, bounds: LayerBounds, splits=None,
                   alphas=None, betas=None) -> BackwardResult:
    """CROWN back-substitution for the scalar objective with slopes and multipliers.

    ``alphas`` holds one lower-relaxation slope in [0, 1] per hidden neuron
    (used only where the neuron is unstable); ``betas`` one non-negative
    multiplier per hidden neuron (used only where it is split). Returns the
    certified lower bound, the linear form it comes from, and exact
    (sub)gradients of the bound w.r.t. alpha and beta.
    """
    onet = objective_net(net)
    nh = onet.n_hidden_layers
    if splits is None:
        splits = tuple(np.zeros(n, dtype=np.int8) for n in onet.hidden_sizes)
    if alphas is None:
        alphas = default_alpha(bounds)
    use_beta = betas is not None
    beta_flat = flatten_beta(splits, betas) if use_beta else None

    split_index = [np.flatnonzero(s) for s in splits]
    n_split = sum(len(ix) for ix in split_index)
    offsets = np.cumsum([0] + [len(ix) for ix in split_index])

    A = onet.weights[-1][0].copy()
    const = float(onet.biases[-1][0])
    B = np.zeros((n_split, A.size))      # beta-coefficient rows over the current layer
    q = np.zeros(n_split)
    tape = []
    for i in range(nh - 1, -1, -1):
        l, u = bounds.lower[i], bounds.upper[i]
        active, unstable, slope, intercept = relaxation(l, u)
        lower_slope = np.where(unstable, alphas[i], active.astype(float))
        total = A + B.T @ beta_flat if use_beta else A
        pos = total >= 0
        D = np.where(pos, lower_slope, slope)
        neg_unstable = ~pos & unstable
        const += float(np.sum(np.where(neg_unstable, A * intercept, 0.0)))
        q += np.where(neg_unstable, B * intercept, 0.0).sum(axis=1)
        S = -splits[i].astype(float)
        Z = A * D
        BZ = B * D
        for r, j in enumerate(split_index[i]):
            BZ[offsets[i] + r, j] += S[j]
        tape.append((i, total, D, pos, unstable, intercept, S))
        const += float(Z @ onet.biases[i])
        q += BZ @ onet.biases[i]
        A = Z @ onet.weights[i]
        B = BZ @ onet.weights[i]

    form = LinearForm(A, const, B.T, q)
    bound = closed_form_inner_min(form, ball, beta_flat)

    # reverse sweep: adjoint of the bound w.r.t. coefficients, layer by layer upward
    coef = A if beta_flat is None else A + B.T @ beta_flat
    g_coef = ball.center - np.sign(coef) * ball.radii
    grad_alpha = [np.zeros(n) for n in onet.hidden_sizes]
    grad_beta = [np.zeros(n) for n in onet.hidden_sizes]
    for i, total, D, pos, unstable, intercept, S in reversed(tape):
        gZ = onet.weights[i] @ g_coef + onet.biases[i]
        grad_alpha[i] = np.where(pos & unstable, gZ * total, 0.0)
        grad_beta[i] = np.where(splits[i] != 0, gZ * S, 0.0)
        g_coef = gZ * D + np.where(~pos & unstable, intercept, 0.0)
    return BackwardResult(bound, form, grad_alpha, grad_beta)


def crown_bound(net, ball: PerturbationBall, splits=None) -> tuple[float, LayerBounds]:
    """Plain CROWN: default slopes, no multipliers, interval-tightened intermediates.

    The reported bound is the larger of the CROWN bound and the interval bound
    of the objective; both are sound.
    """
    onet = objective_net(net)
    bounds = intermediate_bounds(onet, ball, splits)
    if not bounds.feasible:
        return float("inf"), bounds
    res = crown_backward(onet, ball, bounds, splits)
    return max(res.bound, interval_objective_bound(onet, ball, bounds)), bounds
