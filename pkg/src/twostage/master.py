"""Trust-region Sl1QP solver for the smoothed master problem at fixed mu.

Minimizes the exact l1-penalty merit

    phi(x) = f0(x) + sum_i fhat_i(x; mu) + pi * ||[c0(x)]+||_1

by successive elastic QP steps inside an inf-norm trust region.  Subproblem
values and derivatives are obtained through a bank object that solves all
second-stage problems (possibly in parallel) warm-started from the states
of the last accepted iterate; warm starts advance only on acceptance.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .qp import L1Qp, QpSolution, solve_l1qp

H_NORM_CAP = 1e8


class MasterError(RuntimeError):
    pass


class MasterIterationLimit(MasterError):
    def __init__(self, msg, state, theta):
        super().__init__(msg)
        self.state = state
        self.theta = theta


class MasterDegeneracy(MasterError):
    def __init__(self, msg, subproblem=""):
        super().__init__(msg)
        self.subproblem = subproblem


@dataclass
class TrustConstants:
    eta1: float = 0.1
    eta2: float = 0.75
    gamma1: float = 0.5
    gamma2: float = 0.75
    gamma3: float = 2.0
    delta_max: float = 1e3
    delta0: float = 1.0

    def __post_init__(self):
        if not (0 < self.eta1 <= self.eta2 < 1):
            raise ValueError("need 0 < eta1 <= eta2 < 1")
        if not (0 < 1.0 / self.gamma3 <= self.gamma1 <= self.gamma2
                < 1 < self.gamma3):
            raise ValueError("need 0 < 1/gamma3 <= gamma1 <= gamma2 < 1 < gamma3")
        if not (0 < self.delta0 <= self.delta_max):
            raise ValueError("need 0 < delta0 <= delta_max")


@dataclass
class MasterState:
    x: np.ndarray
    s0: np.ndarray
    lam0: np.ndarray
    pi: float = 10.0
    delta: float = 1.0
    trust: TrustConstants = field(default_factory=TrustConstants)

    def copy(self) -> "MasterState":
        return MasterState(self.x.copy(), self.s0.copy(), self.lam0.copy(),
                           self.pi, self.delta, self.trust)


@dataclass
class MeritEval:
    f0: float
    fhat: float
    penalty: float
    phi: float

    @staticmethod
    def at(problem, x, evals, pi) -> "MeritEval":
        f0 = float(problem.f0(x))
        fhat = 0.0
        for ev in evals:                   # fixed index order for determinism
            fhat += ev.value
        viol = float(np.maximum(problem.c0(x), 0.0).sum()) if problem.m0 else 0.0
        pen = pi * viol
        return MeritEval(f0=f0, fhat=fhat, penalty=pen, phi=f0 + fhat + pen)


@dataclass
class MasterLogRow:
    k: int
    mu: float
    phi: float
    theta0: float
    delta: float
    rho: float
    accepted: bool
    pi: float
    sub_newton_iters: int

    HEADER = ("k", "mu", "phi", "theta0", "Delta", "rho", "accepted", "pi",
              "sub_newton_iters")

    def row(self):
        return [self.k, repr(self.mu), repr(self.phi), repr(self.theta0),
                repr(self.delta), repr(self.rho), int(self.accepted),
                repr(self.pi), self.sub_newton_iters]


def theta0(problem, state: MasterState, evals: Sequence) -> float:
    """KKT violation of the smoothed master problem (2-norm).

    Stacks stationarity, c0 + s0 and the plain product s0 o lam0; the
    measure is zero exactly at a KKT point of the smoothed master problem
    (whose complementarity is exact, the master carries no barrier).
    """
    x = state.x
    stat = problem.grad0(x).astype(float).copy()
    for ev in evals:
        stat[ev.coupled] += ev.gradient
    parts = [stat]
    if problem.m0:
        parts[0] = stat + problem.jac0(x).T @ state.lam0
        parts.append(problem.c0(x) + state.s0)
        parts.append(state.s0 * state.lam0)
    return float(np.linalg.norm(np.concatenate(parts)))


def update_penalty(pi: float, lam_plus: np.ndarray) -> float:
    """Keep the l1 penalty dominant: pi >= 1.1 ||lam+||_inf, nondecreasing."""
    need = 1.1 * float(np.abs(lam_plus).max(initial=0.0))
    if pi < need:
        return max(2.0 * pi, need)
    return pi


def radius_update(delta: float, rho: float, c: TrustConstants) -> float:
    if rho >= c.eta2:
        return min(c.gamma3 * delta, c.delta_max)
    if rho >= c.eta1:
        return c.gamma2 * delta
    return c.gamma1 * delta


def slack_reset(problem, x: np.ndarray) -> np.ndarray:
    """Master slack bookkeeping s0 = max(-c0(x), 0)."""
    return np.maximum(-problem.c0(x), 0.0) if problem.m0 else np.zeros(0)


def _master_qp(problem, state: MasterState, evals, delta) -> L1Qp:
    x = state.x
    g = problem.grad0(x).astype(float).copy()
    H = problem.master_hessian(x, state.lam0).copy()
    for ev in evals:
        g[ev.coupled] += ev.gradient
        ev.add_hess_into(H)
    hn = float(np.linalg.norm(H, "fro"))
    if hn > H_NORM_CAP:                  # bounded-Hessian safeguard
        H *= H_NORM_CAP / hn
    H = 0.5 * (H + H.T)
    if problem.m0:
        J = problem.jac0(x)
        c = problem.c0(x)
    else:
        J = np.zeros((0, problem.n0))
        c = np.zeros(0)
    return L1Qp(g=g, H=H, J=J, c=c, pi=state.pi, delta=delta)


def sqp_iterate(problem, bank, mu: float, state: MasterState, evals,
                warm_states, k: int):
    """One Algorithm-3 iteration: QP step, ratio test, radius update.

    Returns (state, evals, warm_states, row, stationary) where ``stationary``
    signals a zero QP step.
    """
    qp = _master_qp(problem, state, evals, state.delta)
    sol = solve_l1qp(qp)
    for _ in range(8):                    # penalty escalation re-solves
        pi_new = update_penalty(state.pi, sol.lam)
        if pi_new == state.pi:
            break
        state.pi = pi_new
        qp = _master_qp(problem, state, evals, state.delta)
        sol = solve_l1qp(qp)
    th = theta0(problem, state, evals)
    merit0 = MeritEval.at(problem, state.x, evals, state.pi)
    p_norm = float(np.abs(sol.p).max(initial=0.0))
    if p_norm <= 1e-13 * (1.0 + np.abs(state.x).max(initial=0.0)) \
            or sol.decrease <= 1e-15 * (1.0 + abs(merit0.phi)):
        row = MasterLogRow(k, mu, merit0.phi, th, state.delta, 0.0, False,
                           state.pi, 0)
        return state, evals, warm_states, row, True
    trial_x = state.x + sol.p
    evals_t, states_t, failures = bank.evaluate_all(trial_x, mu, warm_states)
    iters = sum(ev.stats.iterations for ev in evals_t if ev is not None)
    if failures:
        rho = -np.inf                     # trial rejected, radius shrinks
    else:
        merit_t = MeritEval.at(problem, trial_x, evals_t, state.pi)
        rho = (merit0.phi - merit_t.phi) / sol.decrease
    accepted = rho >= state.trust.eta1
    if accepted:
        state.x = trial_x
        state.lam0 = sol.lam.copy()
        state.s0 = slack_reset(problem, trial_x)
        evals = evals_t
        warm_states = states_t            # warm starts advance only here
    state.delta = radius_update(state.delta, rho, state.trust)
    row = MasterLogRow(k, mu, merit0.phi, th, state.delta,
                       float(rho), accepted, state.pi, iters)
    return state, evals, warm_states, row, False


def solve_master(problem, bank, mu: float, state: MasterState, warm_states,
                 tol: float, evals=None, max_iter: int = 500):
    """Iterate until theta0 <= tol; returns (state, evals, warm_states, rows)."""
    rows = []
    if evals is None:
        evals, warm_states, failures = bank.evaluate_all(
            state.x, mu, warm_states)
        if failures:
            i, msg = failures[0]
            raise MasterDegeneracy(
                f"subproblem {i} failed at the stage starting point: {msg}",
                subproblem=str(i))
        state.s0 = slack_reset(problem, state.x)
    for k in range(max_iter):
        if theta0(problem, state, evals) <= tol:
            return state, evals, warm_states, rows
        state, evals, warm_states, row, stationary = sqp_iterate(
            problem, bank, mu, state, evals, warm_states, k)
        rows.append(row)
        if stationary:
            return state, evals, warm_states, rows
        if state.delta < 1e-12:
            raise MasterDegeneracy(
                "trust region collapsed under repeated subproblem failures",
                subproblem="")
    raise MasterIterationLimit(
        f"no convergence within {max_iter} SQP iterations",
        state=state, theta=theta0(problem, state, evals))
