"""AC optimal power flow with a learned stability constraint, solved by a primal-dual interior point method.

Decision variables (p.u. on the case base) are stacked as
``[theta, vm, pg, qg, p_ibr, q_ibr]``. Costs are in $/h with powers in MW.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .grid import PowerSystemCase, make_ybus
from .grid.powerflow import branch_matrices, d2sbr_dv2, d2sbus_dv2, dsbr_dv, dsbus_dv
from .nn import REGRESSOR, Network, input_gradient, smoothed_derivatives

log = logging.getLogger(__name__)

NN_MARGIN = 1e-6     # TSI > lambda is enforced as TSI >= lambda + NN_MARGIN
MU_LIMIT = 1e12      # multipliers beyond this signal an infeasible problem
ACTIVE_TOL = 1e-5    # a binding learned constraint must be at least this tight


class OpfError(RuntimeError):
    pass


class SingularKKTError(OpfError):
    pass


# -- objective and learned constraint ----------------------------------------

def evaluate_objective(p_sg, p_ibr, costs, curtailment_cost, forecast):
    """Generation plus curtailment cost, gradient and Hessian w.r.t. [p_sg, p_ibr] in MW."""
    p_sg = np.asarray(p_sg, dtype=float)
    p_ibr = np.asarray(p_ibr, dtype=float)
    costs = np.asarray(costs, dtype=float).reshape(-1, 3)
    a, b, c = costs[:, 0], costs[:, 1], costs[:, 2]
    d = np.asarray(curtailment_cost, dtype=float)
    value = float(np.sum(a * p_sg ** 2 + b * p_sg + c) + np.sum(d * (np.asarray(forecast) - p_ibr)))
    grad = np.concatenate([2 * a * p_sg + b, -d * np.ones_like(p_ibr)])
    hess = np.diag(np.concatenate([2 * a, np.zeros_like(p_ibr)]))
    return value, grad, hess


def nn_constraint(net: Network, lam: float, p_ibr, p_sg, pd, qd, kappa: float = 0.0,
                  tau: float = 0.0):
    """lambda - TSI_estimate(x) with gradient and Hessian w.r.t. [p_ibr, p_sg] (MW).

    With ``tau == 0`` the network is evaluated exactly and the Hessian is the
    Gauss-Newton term ``kappa * g g^T`` (the exact Hessian of a ReLU network
    vanishes almost everywhere). With ``tau > 0`` ReLU is replaced by softplus
    of that temperature and its exact Hessian is added to the same term.
    """
    if net.head != REGRESSOR:
        raise ValueError("stability constraint needs a regressor network")
    x = np.concatenate([np.atleast_1d(p_ibr), np.atleast_1d(p_sg), np.atleast_1d(pd),
                        np.atleast_1d(qd)]).astype(float)
    if x.size != net.input_dim:
        raise ValueError(f"network expects {net.input_dim} inputs, case layout gives {x.size}")
    n = np.atleast_1d(p_ibr).size + np.atleast_1d(p_sg).size
    if tau > 0:
        value, grad, H = smoothed_derivatives(net, x, tau)
        g = -grad[:n]
        return lam - value, g, kappa * np.outer(g, g) - H[:n, :n]
    value, grad = input_gradient(net, x)
    g = -grad[:n]
    return lam - value, g, kappa * np.outer(g, g)


# -- problem definition -------------------------------------------------------

@dataclass
class OpfProblem:
    case: PowerSystemCase
    forecast: np.ndarray | None = None   # available IBR power, MW
    pd: np.ndarray | None = None
    qd: np.ndarray | None = None
    lam: float = -np.inf                 # -inf disables the learned constraint
    net: Network | None = None
    kappa: float = 0.0                   # extra Gauss-Newton weight on the learned constraint

    def __post_init__(self):
        case = self.case
        self.forecast = np.array([r.forecast for r in case.ibrs] if self.forecast is None
                                 else self.forecast, dtype=float)
        self.pd = np.array([ld.pd for ld in case.loads] if self.pd is None else self.pd, dtype=float)
        self.qd = np.array([ld.qd for ld in case.loads] if self.qd is None else self.qd, dtype=float)
        if np.isfinite(self.lam):
            if not 0 <= self.lam < 100:
                raise ValueError("stability margin must lie in [0, 100)")
            if self.net is None:
                raise ValueError("a finite margin needs a regressor network")
        rated = np.array([r.s_rated for r in case.ibrs])
        if np.any(self.forecast < 0) or np.any(self.forecast > rated):
            raise ValueError("IBR forecasts must lie in [0, rated power]")

    @property
    def with_nn(self) -> bool:
        return self.net is not None and np.isfinite(self.lam)


class _Layout:
    def __init__(self, case: PowerSystemCase):
        nb, ng, ni = case.n_bus, len(case.generators), len(case.ibrs)
        sizes = {"va": nb, "vm": nb, "pg": ng, "qg": ng, "pi": ni, "qi": ni}
        self.sl = {}
        start = 0
        for k, n in sizes.items():
            self.sl[k] = slice(start, start + n)
            start += n
        self.n = start

    def __getitem__(self, key):
        return self.sl[key]


class _Model:
    """Objective, constraints and derivatives of one OPF instance."""

    def __init__(self, prob: OpfProblem):
        self.prob = prob
        case = prob.case
        self.case = case
        self.base = case.base_mva
        self.lay = _Layout(case)
        self.Y = make_ybus(case)
        self.Cf, self.Ct, self.Yf, self.Yt = branch_matrices(case)
        self.Cg = case.connection(case.generators)
        self.Ci = case.connection(case.ibrs) if case.ibrs else np.zeros((case.n_bus, 0))
        Cl = case.connection(case.loads) if case.loads else np.zeros((case.n_bus, 0))
        self.Sd = Cl @ (prob.pd + 1j * prob.qd) / self.base
        self.costs = np.array([g.cost for g in case.generators], dtype=float)
        self.dcur = np.array([r.curtailment_cost for r in case.ibrs], dtype=float)
        self.rated = np.array([r.s_rated for r in case.ibrs]) / self.base
        self.flow_max = np.array([ln.rating for ln in case.lines]) / self.base
        self.tau = 0.0      # softplus temperature of the learned constraint (0 = exact)
        self.offset = 0.0   # level shift making the exact network meet the smoothed bound
        self._linear_ineq()

    def _linear_ineq(self):
        lay, case, n = self.lay, self.case, self.lay.n
        rows, rhs = [], []

        def box(sl, lo, hi):
            idx = np.arange(n)[sl]
            for j, l, u in zip(idx, lo, hi):
                e = np.zeros(n)
                e[j] = 1.0
                rows.extend([e, -e])
                rhs.extend([u, -l])

        box(lay["vm"], [b.vmin for b in case.buses], [b.vmax for b in case.buses])
        gens = case.generators
        box(lay["pg"], [g.pmin / self.base for g in gens], [g.pmax / self.base for g in gens])
        box(lay["qg"], [g.qmin / self.base for g in gens], [g.qmax / self.base for g in gens])
        box(lay["pi"], np.zeros(len(case.ibrs)), self.prob.forecast / self.base)
        self.A = np.array(rows).reshape(-1, n)
        self.b = np.array(rhs)

    def V(self, x):
        return x[self.lay["vm"]] * np.exp(1j * x[self.lay["va"]])

    def features(self, x):
        return (x[self.lay["pi"]] * self.base, x[self.lay["pg"]] * self.base,
                self.prob.pd, self.prob.qd)

    # objective -------------------------------------------------------------
    def objective(self, x):
        lay, base = self.lay, self.base
        f, g_mw, h_mw = evaluate_objective(x[lay["pg"]] * base, x[lay["pi"]] * base, self.costs,
                                           self.dcur, self.prob.forecast)
        n = lay.n
        idx = np.concatenate([np.arange(n)[lay["pg"]], np.arange(n)[lay["pi"]]])
        df = np.zeros(n)
        df[idx] = g_mw * base
        d2f = np.zeros((n, n))
        d2f[np.ix_(idx, idx)] = h_mw * base ** 2
        return f, df, d2f

    # equalities ------------------------------------------------------------
    def equalities(self, x):
        lay, n, nb = self.lay, self.lay.n, self.case.n_bus
        V = self.V(x)
        Sinj = self.Cg @ (x[lay["pg"]] + 1j * x[lay["qg"]]) + self.Ci @ (x[lay["pi"]] + 1j * x[lay["qi"]])
        mis = V * np.conj(self.Y @ V) - Sinj + self.Sd
        ref = self.case.slack
        g = np.concatenate([mis.real, mis.imag, [x[lay["va"]][ref]]])
        dS_da, dS_dm = dsbus_dv(self.Y, V)
        J = np.zeros((2 * nb + 1, n))
        J[:nb, lay["va"]], J[:nb, lay["vm"]] = dS_da.real, dS_dm.real
        J[nb:2 * nb, lay["va"]], J[nb:2 * nb, lay["vm"]] = dS_da.imag, dS_dm.imag
        J[:nb, lay["pg"]] = -self.Cg
        J[nb:2 * nb, lay["qg"]] = -self.Cg
        J[:nb, lay["pi"]] = -self.Ci
        J[nb:2 * nb, lay["qi"]] = -self.Ci
        J[2 * nb, np.arange(n)[lay["va"]][ref]] = 1.0
        return g, J

    def equality_hessian(self, x, lam):
        lay, nb, n = self.lay, self.case.n_bus, self.lay.n
        V = self.V(x)
        P = d2sbus_dv2(self.Y, V, lam[:nb].astype(complex))
        Q = d2sbus_dv2(self.Y, V, lam[nb:2 * nb].astype(complex))
        H = np.zeros((n, n))
        vv = np.concatenate([np.arange(n)[lay["va"]], np.arange(n)[lay["vm"]]])
        H[np.ix_(vv, vv)] = (np.block([[P[0], P[1]], [P[2], P[3]]]).real
                             + np.block([[Q[0], Q[1]], [Q[2], Q[3]]]).imag)
        return H

    # inequalities ----------------------------------------------------------
    def inequalities(self, x):
        """h(x) <= 0 stacked as [linear boxes, IBR circles, line flows, learned]."""
        lay, n = self.lay, self.lay.n
        parts, jac = [self.A @ x - self.b], [self.A]
        pi, qi = x[lay["pi"]], x[lay["qi"]]
        ni = pi.size
        if ni:
            Jc = np.zeros((ni, n))
            Jc[:, lay["pi"]] = 2 * np.diag(pi)
            Jc[:, lay["qi"]] = 2 * np.diag(qi)
            parts.append(pi ** 2 + qi ** 2 - self.rated ** 2)
            jac.append(Jc)
        V = self.V(x)
        for Cb, Yb in ((self.Cf, self.Yf), (self.Ct, self.Yt)):
            Pl = ((Cb @ V) * np.conj(Yb @ V)).real
            da, dm = dsbr_dv(Cb, Yb, V)
            Jl = np.zeros((len(Pl), n))
            Jl[:, lay["va"]] = 2 * Pl[:, None] * da.real
            Jl[:, lay["vm"]] = 2 * Pl[:, None] * dm.real
            parts.append(Pl ** 2 - self.flow_max ** 2)
            jac.append(Jl)
        if self.prob.with_nn:
            val, g_mw, _ = nn_constraint(self.prob.net, self.prob.lam, *self.features(x),
                                         kappa=self.prob.kappa, tau=self.tau)
            Jn = np.zeros((1, n))
            idx = np.concatenate([np.arange(n)[lay["pi"]], np.arange(n)[lay["pg"]]])
            Jn[0, idx] = g_mw * self.base
            parts.append([val + NN_MARGIN + self.offset])
            jac.append(Jn)
        return np.concatenate(parts), np.vstack(jac)

    def inequality_hessian(self, x, mu):
        lay, n = self.lay, self.lay.n
        H = np.zeros((n, n))
        k = len(self.b)
        ni = len(self.case.ibrs)
        if ni:
            m = mu[k:k + ni]
            H[lay["pi"], lay["pi"]] += 2 * np.diag(m)
            H[lay["qi"], lay["qi"]] += 2 * np.diag(m)
            k += ni
        V = self.V(x)
        vv = np.concatenate([np.arange(n)[lay["va"]], np.arange(n)[lay["vm"]]])
        nl = len(self.case.lines)
        for Cb, Yb in ((self.Cf, self.Yf), (self.Ct, self.Yt)):
            m = mu[k:k + nl]
            k += nl
            Pl = ((Cb @ V) * np.conj(Yb @ V)).real
            da, dm = dsbr_dv(Cb, Yb, V)
            dP = np.hstack([da.real, dm.real])
            Hs = d2sbr_dv2(Cb, Yb, V, 2 * m * Pl)
            H[np.ix_(vv, vv)] += (2 * dP.T @ (m[:, None] * dP)
                                  + np.block([[Hs[0], Hs[1]], [Hs[2], Hs[3]]]).real)
        if self.prob.with_nn:
            _, _, h_mw = nn_constraint(self.prob.net, self.prob.lam, *self.features(x),
                                       kappa=self.prob.kappa, tau=self.tau)
            idx = np.concatenate([np.arange(n)[lay["pi"]], np.arange(n)[lay["pg"]]])
            H[np.ix_(idx, idx)] += mu[k] * h_mw * self.base ** 2
        return H

    def initial_point(self):
        lay, case = self.lay, self.case
        x = np.zeros(lay.n)
        x[lay["vm"]] = np.clip(1.0, [b.vmin for b in case.buses], [b.vmax for b in case.buses])
        x[lay["pg"]] = [(g.pmin + g.pmax) / 2 / self.base for g in case.generators]
        x[lay["qg"]] = [(g.qmin + g.qmax) / 2 / self.base for g in case.generators]
        x[lay["pi"]] = self.prob.forecast / 2 / self.base
        return x


# -- solver ---------------------------------------------------------------------

@dataclass
class PdipmOptions:
    tol: float = 1e-6
    max_iter: int = 150
    xi: float = 0.995       # fraction to the boundary
    sigma: float = 0.1      # centering parameter
    z0: float = 0.1         # initial slack / barrier level
    # softplus temperatures of the learned constraint, each phase warm-started
    # from the previous one; the iteration cap is shared
    smoothing: tuple = (1e-1, 1e-2)
    level_corrections: int = 20


@dataclass
class OpfSolution:
    strategy: np.ndarray          # [p_ibr, p_sg, pd, qd], MW / MVAr
    x: np.ndarray                 # full variable vector (p.u.)
    cost: float
    residuals: dict
    converged: bool
    iterations: int
    message: str = ""
    tsi_estimate: float | None = None
    lam_eq: np.ndarray | None = None
    mu: np.ndarray | None = None
    history: list = field(default_factory=list)

    def dispatch(self, case: PowerSystemCase) -> dict:
        p_ibr, p_sg, _, _ = case.split_features(self.strategy)
        out = {f"sg_{g.bus}": float(p) for g, p in zip(case.generators, p_sg)}
        out.update({f"ibr_{r.bus}": float(p) for r, p in zip(case.ibrs, p_ibr)})
        return out

    def to_dict(self, case: PowerSystemCase) -> dict:
        return {
            "converged": bool(self.converged),
            "cost": float(self.cost),
            "dispatch": self.dispatch(case),
            "tsi_estimate": None if self.tsi_estimate is None else float(self.tsi_estimate),
            "kkt_residuals": {k: float(v) for k, v in self.residuals.items()},
            "iterations": int(self.iterations),
            "message": self.message,
        }


def _step_length(v, dv, xi):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, xi * float(np.min(v[neg] / -dv[neg])))


class _Iterate:
    """Primal-dual state (x, z, lam, mu, gamma) with cached model evaluations."""

    def __init__(self, m: _Model, x, z=None, lam=None, mu=None, gamma=None, z0=0.1):
        self.m = m
        self.x = x
        self.evaluate()
        self.z = np.maximum(z0, -self.h) if z is None else z
        self.gamma = z0 if gamma is None else gamma
        self.mu = self.gamma / self.z if mu is None else mu
        self.lam = np.zeros(self.g.size) if lam is None else lam

    def evaluate(self):
        m, x = self.m, self.x
        self.g, self.Jg = m.equalities(x)
        self.h, self.Jh = m.inequalities(x)
        self.f, self.df, self.d2f = m.objective(x)

    def residuals(self):
        self.Lx = self.df + self.Jg.T @ self.lam + self.Jh.T @ self.mu
        feas = max(float(np.max(np.abs(self.g))), float(np.max(self.h, initial=0.0)), 0.0)
        scale = 1.0 + max(float(np.max(np.abs(self.lam), initial=0.0)),
                          float(np.max(self.mu, initial=0.0)))
        grad = float(np.max(np.abs(self.Lx))) / scale
        comp = float(self.z @ self.mu) / (1.0 + float(np.max(np.abs(self.x))))
        return {"primal": feas, "dual": grad, "complementarity": comp}


def _newton_phase(it: _Iterate, opts: PdipmOptions, budget: int, history: list):
    """Iterate until the KKT residuals pass ``opts.tol``; returns (converged, steps, message)."""
    m = it.m
    n, neq, niq = it.x.size, it.g.size, it.h.size
    steps = 0
    while True:
        res = it.residuals()
        history.append(dict(res, cost=it.f))
        if res["primal"] < opts.tol and res["dual"] < opts.tol and res["complementarity"] < opts.tol:
            return True, steps, "converged"
        if steps >= budget:
            return False, steps, "iteration limit reached"
        if np.max(it.mu, initial=0.0) > MU_LIMIT:
            return False, steps, "inequality multipliers diverged (problem likely infeasible)"
        steps += 1
        Lxx = it.d2f + m.equality_hessian(it.x, it.lam) + m.inequality_hessian(it.x, it.mu)
        zinv = 1.0 / it.z
        Jh_z = it.Jh.T * zinv
        M = Lxx + (Jh_z * it.mu) @ it.Jh
        N = it.Lx + Jh_z @ (it.mu * it.h + it.gamma)
        K = np.block([[M, it.Jg.T], [it.Jg, np.zeros((neq, neq))]])
        rhs = -np.concatenate([N, it.g])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            raise SingularKKTError(f"singular KKT matrix; residuals {res}") from None
        if not np.all(np.isfinite(sol)):
            return False, steps, "non-finite Newton step"
        dx, dlam = sol[:n], sol[n:]
        dz = -it.h - it.z - it.Jh @ dx
        dmu = -it.mu + zinv * (it.gamma - it.mu * dz)
        ap = _step_length(it.z, dz, opts.xi)
        ad = _step_length(it.mu, dmu, opts.xi)
        it.x = it.x + ap * dx
        it.z = it.z + ap * dz
        it.lam = it.lam + ad * dlam
        it.mu = it.mu + ad * dmu
        if niq:
            it.gamma = opts.sigma * float(it.z @ it.mu) / niq
        it.evaluate()
        if not (np.isfinite(it.f) and np.all(np.isfinite(it.x))):
            return False, steps, "iterates diverged"


def pdipm_solve(prob: OpfProblem, init=None, opts: PdipmOptions = PdipmOptions()) -> OpfSolution:
    """Primal-dual interior point iterations on the barrier-perturbed KKT system.

    Convergence needs max|g| and max(h, 0) (p.u.), the scaled Lagrangian
    gradient and the scaled complementarity all below ``opts.tol``.

    The ReLU regressor is replaced by its softplus smoothing, solved over the
    decreasing temperatures ``opts.smoothing`` with warm starts. The level of
    the smoothed constraint is then shifted by the gap to the exact network
    and re-solved until the exact network meets ``TSI >= lambda + NN_MARGIN``
    within ``opts.tol``, binding to within ACTIVE_TOL unless its multiplier
    vanishes. Non-convergence after ``opts.max_iter`` Newton steps is
    reported through ``converged=False``; a singular Newton system raises
    SingularKKTError.
    """
    m = _Model(prob)
    x0 = m.initial_point() if init is None else np.asarray(init, dtype=float).copy()
    history = []
    total = 0
    it = None
    converged, message = False, ""

    def phase():
        nonlocal total
        try:
            ok, steps, msg = _newton_phase(it, opts, opts.max_iter - total, history)
        except SingularKKTError as exc:
            raise SingularKKTError(f"{exc} (after {total} iterations)") from None
        total += steps
        return ok, msg

    taus = opts.smoothing if prob.with_nn and opts.smoothing else (0.0,)
    for tau in taus:
        m.tau = tau
        if it is None:
            it = _Iterate(m, x0, z0=opts.z0)
        else:
            it.evaluate()
        converged, message = phase()
        if not converged:
            break

    if converged and prob.with_nn and m.tau > 0:
        for _ in range(opts.level_corrections + 1):
            gap = _exact_violation(m, it.x) + NN_MARGIN     # exact h of the learned row
            if gap < NN_MARGIN and (gap >= -ACTIVE_TOL or it.mu[-1] <= opts.tol):
                break
            m.offset += gap
            it.evaluate()
            # keep the shifted row strictly interior for the barrier
            it.z[-1] = max(it.z[-1], -it.h[-1], opts.tol)
            converged, message = phase()
            if not converged:
                break
        else:
            converged, message = False, "learned constraint level correction did not settle"

    res = it.residuals()
    if prob.with_nn:
        res["learned_constraint"] = max(_exact_violation(m, it.x) + NN_MARGIN, 0.0)
        if converged and res["learned_constraint"] > opts.tol:
            converged, message = False, "learned constraint not met by the exact network"
    p_ibr, p_sg, pd, qd = m.features(it.x)
    strategy = np.concatenate([p_ibr, p_sg, pd, qd])
    tsi = None
    if prob.net is not None and prob.net.head == REGRESSOR:
        tsi, _ = input_gradient(prob.net, strategy)
    if not converged:
        log.info("PDIPM stopped: %s (residuals %s)", message, res)
    return OpfSolution(strategy, it.x, it.f, res, converged, total, message, tsi, it.lam, it.mu,
                       history)


def _exact_violation(m: _Model, x) -> float:
    """lambda - TSI_estimate at x for the unsmoothed network."""
    val, _, _ = nn_constraint(m.prob.net, m.prob.lam, *m.features(x))
    return float(val)
