"""Warm-started Newton interior-point solver for smoothed subproblems.

The smoothed subproblem for a fixed master vector x and barrier weight mu is

    min_{y, xt, s}  f(y; xt) - mu * sum_j ln(s_j)
    s.t.            c(y; xt) + s = 0,        [lam]
                    xt - x[coupled] = 0.     [eta]

The solver applies damped Newton iterations to the primal-dual optimality
system in v = (y, xt, s, lam, eta).  The linear algebra works on the
condensed system obtained by eliminating the slack, multiplier and copy
rows; the condensed matrix is exactly the reduced Hessian
W_yy + Jy' * diag(lam/s) * Jy, whose factorization also serves the
sensitivity solves and the Schur back-solves of the extrapolation stage.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import SubproblemDef, _as_dense

INTERIOR_FRACTION = 0.995     # step cap toward the s, lam > 0 boundary
BETA_MIN = 1e-4               # line-search floor
MAX_ITER = 200
ARMIJO_C1 = 1e-4


class SubproblemError(RuntimeError):
    pass


class SubproblemNonconvergence(SubproblemError):
    """Solver failed to reach tolerance; master treats as trial rejection."""

    def __init__(self, msg, residual=np.inf, iterations=0, infeasible=False):
        super().__init__(msg)
        self.residual = float(residual)
        self.iterations = int(iterations)
        self.infeasible = bool(infeasible)


class DegenerateSubproblem(SubproblemError):
    """Newton matrix numerically singular beyond the regularization cap."""


def default_tolerance(mu: float) -> float:
    return 1e-9 * max(1.0, mu)


def fraction_to_boundary(s, lam, ds, dlam, tau: float) -> float:
    """Largest alpha in (0, 1] with s + a*ds >= (1-tau)s, lam + a*dlam >= (1-tau)lam."""
    alpha = 1.0
    for val, step in ((s, ds), (lam, dlam)):
        val = np.asarray(val, dtype=float)
        step = np.asarray(step, dtype=float)
        neg = step < 0
        if np.any(neg):
            alpha = min(alpha, tau * float(np.min(val[neg] / -step[neg])))
    return alpha


@dataclass
class SubproblemState:
    """Primal-dual iterate v = (y, xt, s, lam, eta); s, lam stay positive."""
    y: np.ndarray
    x_copy: np.ndarray
    s: np.ndarray
    lam: np.ndarray
    eta: np.ndarray

    def copy(self) -> "SubproblemState":
        return SubproblemState(self.y.copy(), self.x_copy.copy(), self.s.copy(),
                               self.lam.copy(), self.eta.copy())

    def axpy(self, beta: float, d: "SubproblemState") -> "SubproblemState":
        return SubproblemState(self.y + beta * d.y, self.x_copy + beta * d.x_copy,
                               self.s + beta * d.s, self.lam + beta * d.lam,
                               self.eta + beta * d.eta)

    def as_dict(self):
        return {k: getattr(self, k).tolist() for k in
                ("y", "x_copy", "s", "lam", "eta")}


@dataclass
class KktResidual:
    stationarity_y: np.ndarray
    stationarity_x: np.ndarray
    complementarity: np.ndarray
    primal: np.ndarray
    copy: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.stationarity_y, self.stationarity_x,
                               self.complementarity, self.primal, self.copy])

    @property
    def norm(self) -> float:
        v = self.vector
        return float(np.abs(v).max()) if v.size else 0.0


@dataclass
class SolveStats:
    iterations: int = 0
    residual: float = np.inf
    history: list = field(default_factory=list)
    regularized: bool = False
    beta_floor_hits: int = 0
    converged: bool = False


@dataclass
class NondegeneracyReport:
    sigma_min: float
    sigma_max: float
    nondegenerate: bool


@dataclass
class SmoothedEval:
    """Value/derivatives of the smoothed second-stage function at one x."""
    value: float
    gradient: np.ndarray          # coupled-space, mapped back via `coupled`
    hessian: np.ndarray           # coupled-space, symmetric
    kind: str                     # "objective" | "solution"
    coupled: np.ndarray
    state: SubproblemState
    handle: Optional["KktFactorization"]
    stats: SolveStats

    def grad_full(self, n0: int) -> np.ndarray:
        g = np.zeros(n0)
        g[self.coupled] = self.gradient
        return g

    def add_hess_into(self, H: np.ndarray) -> None:
        H[np.ix_(self.coupled, self.coupled)] += self.hessian


class KktFactorization:
    """Factorization of the subproblem KKT Jacobian at a fixed iterate.

    Stores the blocks needed to solve J(v) d = b for arbitrary right-hand
    sides by block elimination; only the reduced matrix
    M = Wyy + delta*I + Jy' Sigma Jy is factored.
    """

    def __init__(self, defn: SubproblemDef, Wyy, Wyx, Wxx, Jy, Jx, s, lam,
                 delta: float = 0.0):
        self.defn = defn
        self.s = s
        self.lam = lam
        self.sigma = lam / s
        self.Jy = Jy
        self.Jx = Jx
        self.Wyx = Wyx
        self.Wxx = Wxx
        self.delta = delta
        sparse = defn.sparse and sp.issparse(Jy)
        if sparse:
            SJ = sp.diags(self.sigma) @ Jy
            M = (sp.csc_matrix(Wyy) + Jy.T @ SJ).tocsc()
            if delta:
                M = M + delta * sp.eye(defn.dim, format="csc")
            try:
                self._lu = spla.splu(M)
            except RuntimeError as exc:
                raise np.linalg.LinAlgError(str(exc))
            self._solve_M = lambda B: self._lu.solve(np.asarray(B))
            self._SJy = SJ
        else:
            Jy = _as_dense(Jy)
            self.Jy = Jy
            M = _as_dense(Wyy) + (Jy.T * self.sigma) @ Jy
            if delta:
                M = M + delta * np.eye(defn.dim)
            lu, piv = sla.lu_factor(M, check_finite=False)
            d = np.abs(np.diag(lu))
            if M.shape[0] and (d.min() == 0.0 or
                               d.min() < 1e-16 * max(d.max(), 1.0)):
                raise np.linalg.LinAlgError("reduced KKT matrix singular")
            self._lu = (lu, piv)
            self._solve_M = lambda B: sla.lu_solve(self._lu, B, check_finite=False)
            self._SJy = None
        self._M = M

    def solve(self, b1, b2, b3, b4, b5):
        """Solve J d = (b1..b5) for d = (dy, dxt, ds, dlam, deta)."""
        Jy, Jx, sig, s = self.Jy, self.Jx, self.sigma, self.s
        dxt = np.asarray(b5, dtype=float)
        rhs = np.asarray(b1, dtype=float) \
            - (_as_dense(self.Wyx) @ dxt if dxt.size else 0.0) \
            - Jy.T @ (b3 / s) + Jy.T @ (sig * b4)
        if dxt.size:
            rhs = rhs - Jy.T @ (sig * (_as_dense(Jx) @ dxt))
        dy = self._solve_M(rhs)
        ds = b4 - Jy @ dy - (_as_dense(Jx) @ dxt if dxt.size else 0.0)
        dlam = (b3 - self.lam * ds) / s
        if dxt.size:
            deta = b2 - _as_dense(self.Wyx).T @ dy - _as_dense(self.Wxx) @ dxt \
                - _as_dense(Jx).T @ dlam
        else:
            deta = np.zeros(0)
        return SubproblemState(dy, dxt, ds, dlam, deta)

    def solve_newton(self, res: KktResidual) -> SubproblemState:
        return self.solve(-res.stationarity_y, -res.stationarity_x,
                          -res.complementarity, -res.primal, -res.copy)

    def sensitivity(self):
        """d v*/d xhat for the projected master coordinates.

        Returns (DY, Dlam, Deta) with Deta = d eta/d xhat; the smoothed
        objective Hessian is -Deta (symmetric Schur complement form).
        """
        nc = self.defn.n_coupled
        if nc == 0:
            z = np.zeros((0, 0))
            return np.zeros((self.defn.dim, 0)), np.zeros((len(self.s), 0)), z
        Jx = _as_dense(self.Jx)
        C = _as_dense(self.Wyx) + self.Jy.T @ (self.sigma[:, None] * Jx)
        DY = -self._solve_M(C)
        Dlam = self.sigma[:, None] * (self.Jy @ DY + Jx)
        Deta = -_as_dense(self.Wyx).T @ DY - _as_dense(self.Wxx) - Jx.T @ Dlam
        return DY, Dlam, Deta


class Subsolver:
    """Interior-point solver bound to one subproblem definition.

    ``safeguard=True`` (default) convexifies the reduced Hessian when it is
    not positive definite so iterations move toward local minimizers.  With
    ``safeguard=False`` the solver runs plain Newton on the KKT system and
    will happily converge to any stationary point; the curve tracer uses
    that mode to follow maximizer branches.
    """

    def __init__(self, defn: SubproblemDef, safeguard: bool = True):
        self.defn = defn
        self.safeguard = safeguard

    # -- basic evaluations -------------------------------------------------

    def default_start_y(self) -> np.ndarray:
        d = self.defn
        if d.bounds is None:
            return np.zeros(d.dim)
        lo, hi = (np.asarray(b, dtype=float) for b in d.bounds)
        y = np.zeros(d.dim)
        fin_lo, fin_hi = np.isfinite(lo), np.isfinite(hi)
        both = fin_lo & fin_hi
        y[both] = 0.5 * (lo[both] + hi[both])
        y[fin_lo & ~fin_hi] = lo[fin_lo & ~fin_hi] + 1.0
        y[~fin_lo & fin_hi] = hi[~fin_lo & fin_hi] - 1.0
        return y

    def cold_start(self, x: np.ndarray, mu: float,
                   y0: Optional[np.ndarray] = None) -> SubproblemState:
        """Interior, scale-aware start: s_j = max(1, 1 - c_j), lam = mu/s."""
        d = self.defn
        y = np.asarray(y0, dtype=float).copy() if y0 is not None \
            else self.default_start_y()
        xt = d.project(x).copy()
        cv = np.asarray(d.c(y, xt), dtype=float)
        s = np.maximum(1.0, 1.0 - cv)
        lam = mu / s
        return SubproblemState(y, xt, s, lam, np.zeros(d.n_coupled))

    def residual(self, state: SubproblemState, x: np.ndarray,
                 mu: float) -> KktResidual:
        d = self.defn
        y, xt, s, lam, eta = state.y, state.x_copy, state.s, state.lam, state.eta
        gy, gx = d.grad_f(y, xt)
        Jy, Jx = d.jac_c(y, xt)
        r1 = np.asarray(gy, dtype=float) + Jy.T @ lam
        r2 = (np.asarray(gx, dtype=float) + _as_dense(Jx).T @ lam + eta) \
            if d.n_coupled else np.zeros(0)
        r3 = s * lam - mu
        r4 = np.asarray(d.c(y, xt), dtype=float) + s
        r5 = xt - d.project(x)
        return KktResidual(r1, r2, r3, r4, r5)

    def _blocks(self, state: SubproblemState):
        d = self.defn
        y, xt, lam = state.y, state.x_copy, state.lam
        Jy, Jx = d.jac_c(y, xt)
        Wyy, Wyx, Wxx = d.hess_lag(y, xt, lam)
        if not sp.issparse(Wyy):
            Wyy = np.asarray(Wyy, dtype=float)
            Wyy = 0.5 * (Wyy + Wyy.T)
        Wxx = _as_dense(Wxx)
        if Wxx.size:
            Wxx = 0.5 * (Wxx + Wxx.T)
        return Wyy, _as_dense(Wyx), Wxx, Jy, Jx

    # -- factorization with inertia handling --------------------------------

    def _is_pd(self, M) -> bool:
        if self.defn.pd_probe is not None:
            return bool(self.defn.pd_probe(M))
        try:
            np.linalg.cholesky(_as_dense(M))
            return True
        except np.linalg.LinAlgError:
            return False

    def _reduced(self, Wyy, Jy, sigma, delta: float):
        if self.defn.sparse and sp.issparse(Jy):
            M = sp.csc_matrix(Wyy) + Jy.T @ (sp.diags(sigma) @ Jy)
            if delta:
                M = M + delta * sp.eye(self.defn.dim, format="csc")
            return M
        Jy = _as_dense(Jy)
        M = _as_dense(Wyy) + (Jy.T * sigma) @ Jy
        if delta:
            M = M + delta * np.eye(self.defn.dim)
        return M

    def factor(self, state: SubproblemState, x: np.ndarray,
               want_pd: bool = False):
        """Factor the KKT system at `state`; returns (handle, delta_used).

        With want_pd the reduced Hessian is shifted by delta*I until it is
        positive definite (escalating from the exact-singularity schedule
        1e-8 x10); without, delta is applied only if the factorization is
        numerically singular, capped at 1e-2 before declaring degeneracy.
        """
        d = self.defn
        Wyy, Wyx, Wxx, Jy, Jx = self._blocks(state)
        sigma = state.lam / state.s
        delta = 0.0
        if want_pd:
            M0 = self._reduced(Wyy, Jy, sigma, 0.0)
            if not self._is_pd(M0):
                if not self.defn.sparse and d.dim <= 800:
                    lam_min = float(np.linalg.eigvalsh(_as_dense(M0)).min())
                    delta = max(1e-8, -2.0 * lam_min)
                else:
                    delta = 1e-8
                while not self._is_pd(self._reduced(Wyy, Jy, sigma, delta)):
                    delta *= 10.0
                    if delta > 1e12:
                        raise DegenerateSubproblem(
                            f"reduced Hessian of {d.name or 'subproblem'} cannot "
                            f"be convexified")
        for attempt in range(8):
            try:
                h = KktFactorization(d, Wyy, Wyx, Wxx, Jy, Jx,
                                     state.s, state.lam, delta)
                return h, delta
            except np.linalg.LinAlgError:
                delta = 1e-8 if delta == 0.0 else delta * 10.0
                if delta > 1e-2 and not want_pd:
                    raise DegenerateSubproblem(
                        f"Newton matrix of {d.name or 'subproblem'} singular "
                        f"beyond regularization cap")
        raise DegenerateSubproblem(
            f"Newton matrix of {d.name or 'subproblem'} not factorizable")

    # -- spec-facing single-step operations ---------------------------------

    def newton_step(self, state: SubproblemState, x: np.ndarray, mu: float):
        """Plain Newton step J dv = -F with singularity-only regularization."""
        res = self.residual(state, x, mu)
        handle, _ = self.factor(state, x, want_pd=False)
        return handle.solve_newton(res), handle

    def line_search(self, state: SubproblemState, dv: SubproblemState,
                    x: np.ndarray, mu: float) -> float:
        """Armijo halving on ||F||^2 under the interior fraction cap."""
        res0 = self.residual(state, x, mu)
        merit0 = float(res0.vector @ res0.vector)
        beta_max = INTERIOR_FRACTION * fraction_to_boundary(
            state.s, state.lam, dv.s, dv.lam, 1.0)
        beta = min(1.0, beta_max)
        while True:
            trial = state.axpy(beta, dv)
            rt = self.residual(trial, x, mu)
            merit_t = float(rt.vector @ rt.vector)
            if merit_t <= (1.0 - 2.0 * ARMIJO_C1 * beta) * merit0:
                return beta
            if beta <= BETA_MIN:
                return beta
            beta = max(0.5 * beta, BETA_MIN)

    # -- main solve ----------------------------------------------------------

    def solve(self, x: np.ndarray, mu: float,
              start: Optional[SubproblemState] = None,
              tol: Optional[float] = None,
              max_iter: int = MAX_ITER):
        """Drive ||F||_inf below tol; returns (state, stats).

        Raises SubproblemNonconvergence on stagnation or iteration cap and
        DegenerateSubproblem when the Newton matrix stays singular.
        """
        if mu <= 0:
            raise ValueError("mu must be positive")
        if tol is None:
            tol = default_tolerance(mu)
        v = start.copy() if start is not None else self.cold_start(x, mu)
        if np.any(v.s <= 0) or np.any(v.lam <= 0):
            raise ValueError("warm start must have s, lam > 0")
        stats = SolveStats()
        nu = 1.0
        prim_hist = []
        tiny_steps = 0
        for it in range(max_iter):
            res = self.residual(v, x, mu)
            rnorm = res.norm
            stats.history.append(rnorm)
            stats.iterations = it
            stats.residual = rnorm
            if rnorm <= tol:
                stats.converged = True
                return v, stats
            prim = max(float(np.abs(res.primal).max()) if res.primal.size else 0.0,
                       float(np.abs(res.copy).max()) if res.copy.size else 0.0)
            prim_hist.append(prim)
            comp = float(np.abs(res.complementarity).max()) if res.complementarity.size else 0.0
            if len(prim_hist) > 20:
                if (prim > 10 * tol
                        and prim > (1.0 - 1e-3) * prim_hist[-21]
                        and comp <= max(0.1 * mu, 10 * tol)):
                    raise SubproblemNonconvergence(
                        "primal residual stagnated: infeasible stationary point",
                        residual=rnorm, iterations=it, infeasible=True)
            handle, delta = self.factor(v, x, want_pd=self.safeguard)
            if delta > 0:
                stats.regularized = True
            dv = handle.solve_newton(res)
            beta_max = INTERIOR_FRACTION * fraction_to_boundary(
                v.s, v.lam, dv.s, dv.lam, 1.0)
            if beta_max < 1e-10:
                tiny_steps += 1
                if tiny_steps >= 3:
                    raise SubproblemNonconvergence(
                        "step collapsed at the positivity boundary",
                        residual=rnorm, iterations=it, infeasible=True)
            else:
                tiny_steps = 0
            if delta == 0.0:
                beta = self._armijo_residual(v, dv, x, mu, res, beta_max, stats)
            else:
                beta, nu = self._armijo_merit(v, dv, x, mu, res, beta_max, nu, stats)
            v = v.axpy(beta, dv)
            assert np.all(v.s > 0) and np.all(v.lam > 0), \
                "interior-point iterate lost positivity"
            if len(stats.history) > 30 and stats.history[-1] > \
                    (1.0 - 1e-3) * stats.history[-31]:
                raise SubproblemNonconvergence(
                    "KKT residual stagnated", residual=stats.history[-1],
                    iterations=it, infeasible=False)
        raise SubproblemNonconvergence(
            "maximum Newton iterations exceeded",
            residual=stats.history[-1] if stats.history else np.inf,
            iterations=max_iter, infeasible=False)

    def _armijo_residual(self, v, dv, x, mu, res, beta_max, stats):
        merit0 = float(res.vector @ res.vector)
        beta = min(1.0, beta_max)
        while True:
            rt = self.residual(v.axpy(beta, dv), x, mu)
            if float(rt.vector @ rt.vector) <= (1.0 - 2 * ARMIJO_C1 * beta) * merit0:
                return beta
            if beta <= BETA_MIN:
                stats.beta_floor_hits += 1
                return beta
            beta = max(0.5 * beta, BETA_MIN)

    def _armijo_merit(self, v, dv, x, mu, res, beta_max, nu, stats):
        # penalty-barrier merit used while the reduced Hessian is being
        # convexified; plain ||F|| descent cannot leave a stationary point
        # that is not a minimizer
        d = self.defn
        px = v.x_copy - res.copy

        def merit(state, nu_):
            if np.any(state.s <= 0):
                return np.inf
            val = d.f(state.y, state.x_copy) - mu * float(np.log(state.s).sum())
            r4 = np.asarray(d.c(state.y, state.x_copy)) + state.s
            viol = float(np.abs(r4).sum() + np.abs(state.x_copy - px).sum())
            return val + nu_ * viol

        gy, gx = d.grad_f(v.y, v.x_copy)
        gdot = float(np.asarray(gy) @ dv.y) \
            + (float(np.asarray(gx) @ dv.x_copy) if dv.x_copy.size else 0.0) \
            - mu * float((dv.s / v.s).sum())
        viol0 = float(np.abs(res.primal).sum() + np.abs(res.copy).sum())
        nu = max(nu, 2.0 * max(float(np.abs(v.lam).max(initial=0.0)),
                               float(np.abs(v.eta).max(initial=0.0))) + 1.0)
        if viol0 > 1e-12 and nu * viol0 - gdot <= 0:
            nu = (gdot / viol0) + 1.0
        m0 = merit(v, nu)
        beta = min(1.0, beta_max)
        while True:
            pred = beta * (nu * viol0 - gdot)
            trial = v.axpy(beta, dv)
            if merit(trial, nu) <= m0 - ARMIJO_C1 * max(pred, 0.0) + 1e-14 * abs(m0):
                return beta, nu
            if beta <= BETA_MIN:
                stats.beta_floor_hits += 1
                return beta, nu
            beta = max(0.5 * beta, BETA_MIN)

    # -- smoothed evaluations -------------------------------------------------

    def evaluate_smoothed(self, x: np.ndarray, mu: float,
                          start: Optional[SubproblemState] = None,
                          kind: str = "objective",
                          tol: Optional[float] = None,
                          fd_step: Optional[float] = None,
                          fd_tol: float = 1e-12) -> SmoothedEval:
        """Solve at x and return value, gradient and Hessian of f-hat.

        Objective smoothing: value includes the barrier term, the gradient
        is -eta exactly and the Hessian comes from the sensitivity system
        reusing the Newton factorization.  Solution smoothing: value is the
        raw objective at the solution, the gradient goes through the chain
        rule, and the Hessian is a central difference of that gradient.
        """
        if kind not in ("objective", "solution"):
            raise ValueError(f"unknown smoothing kind {kind!r}")
        d = self.defn
        state, stats = self.solve(x, mu, start=start, tol=tol)
        handle, _ = self.factor(state, x, want_pd=False)
        f_val = d.f(state.y, state.x_copy)
        barrier = f_val - mu * float(np.log(state.s).sum())
        if kind == "objective":
            value = barrier
            grad = -state.eta.copy()
            _, _, Deta = handle.sensitivity()
            hess = -Deta
        else:
            value = f_val
            grad = self._solution_gradient(state, handle)
            h = fd_step if fd_step is not None else \
                1e-5 * (1.0 + float(np.abs(x).max() if np.size(x) else 0.0))
            cols = []
            for k in d.coupled:
                xp = np.array(x, dtype=float)
                xp[k] += h
                xm = np.array(x, dtype=float)
                xm[k] -= h
                sp_, _ = self.solve(xp, mu, start=state, tol=fd_tol)
                hp, _ = self.factor(sp_, xp, want_pd=False)
                sm_, _ = self.solve(xm, mu, start=state, tol=fd_tol)
                hm, _ = self.factor(sm_, xm, want_pd=False)
                cols.append((self._solution_gradient(sp_, hp)
                             - self._solution_gradient(sm_, hm)) / (2 * h))
            hess = np.column_stack(cols) if cols else np.zeros((0, 0))
        hess = 0.5 * (hess + hess.T)
        return SmoothedEval(value=float(value), gradient=grad, hessian=hess,
                            kind=kind, coupled=d.coupled, state=state,
                            handle=handle, stats=stats)

    def _solution_gradient(self, state, handle) -> np.ndarray:
        gy, gx = self.defn.grad_f(state.y, state.x_copy)
        DY, _, _ = handle.sensitivity()
        return DY.T @ np.asarray(gy, dtype=float) + np.asarray(gx, dtype=float)

    def check_nondegeneracy(self, state: SubproblemState,
                            x: np.ndarray) -> NondegeneracyReport:
        """Singular-value report of the reduced Hessian W + Jy' Sigma Jy."""
        Wyy, _, _, Jy, _ = self._blocks(state)
        M = self._reduced(Wyy, Jy, state.lam / state.s, 0.0)
        sv = np.linalg.svd(_as_dense(M), compute_uv=False)
        smax = float(sv.max()) if sv.size else 0.0
        smin = float(sv.min()) if sv.size else 0.0
        return NondegeneracyReport(
            sigma_min=smin, sigma_max=smax,
            nondegenerate=smin > 1e-8 * max(smax, 1.0))
