"""Elastic l1-penalty trust-region QP solver.

Solves   min_p  g'p + 1/2 p'Hp + pi * sum_j t_j
         s.t.   Jp + c <= t,  t >= 0,  ||p||_inf <= Delta

which is the step-computation problem of the Sl1QP master iteration and,
without the trust region, the master block of the extrapolation step.  H
may be indefinite; the interior-point iteration convexifies its Newton
matrix by a diagonal shift only when the factorization demands it, and a
final active-set refinement polishes the solution to machine precision so
Newton-step equivalence tests hold exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class L1Qp:
    g: np.ndarray
    H: np.ndarray
    J: np.ndarray                  # (m, n) constraint Jacobian
    c: np.ndarray                  # (m,) constraint values
    pi: float
    delta: Optional[float] = None  # inf-norm trust radius, None = unbounded
    is_eq: Optional[np.ndarray] = None

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float)
        self.H = np.asarray(self.H, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        self.J = np.asarray(self.J, dtype=float).reshape(len(self.c), len(self.g))
        if self.pi <= 0:
            raise ValueError("penalty must be positive")
        if self.delta is not None and self.delta <= 0:
            raise ValueError("trust radius must be positive")
        if self.is_eq is None:
            self.is_eq = np.zeros(len(self.c), dtype=bool)
        if np.abs(self.H - self.H.T).max(initial=0.0) > 1e-10:
            raise ValueError("H must be symmetric")
        self.H = 0.5 * (self.H + self.H.T)

    @property
    def n(self):
        return len(self.g)

    @property
    def m(self):
        return len(self.c)

    def model_value(self, p: np.ndarray) -> float:
        """l1 model m(p) = g'p + p'Hp/2 + pi*(|viol eq| + |[ineq]+|)."""
        r = self.J @ p + self.c if self.m else np.zeros(0)
        pen = float(np.abs(r[self.is_eq]).sum()
                    + np.maximum(r[~self.is_eq], 0.0).sum())
        return float(self.g @ p + 0.5 * p @ (self.H @ p) + self.pi * pen)

    def model_decrease(self, p: np.ndarray) -> float:
        return self.model_value(np.zeros(self.n)) - self.model_value(p)


@dataclass
class QpSolution:
    p: np.ndarray
    t: np.ndarray
    lam: np.ndarray                # constraint multipliers, in [0, pi] for ineq
    active_set: list
    decrease: float
    fallback: bool = False         # Cauchy fallback was taken
    kkt_residual: float = 0.0


def _elastic_data(qp: L1Qp):
    """Variables xi = (p, t_ineq, tp_eq, tm_eq); rows G xi <= h."""
    n, m = qp.n, qp.m
    ineq = ~qp.is_eq
    eq = qp.is_eq
    mi, me = int(ineq.sum()), int(eq.sum())
    nt = mi + 2 * me
    nx = n + nt
    rows = []
    rhs = []
    # J_I p - t <= -c_I
    R = np.zeros((mi, nx))
    R[:, :n] = qp.J[ineq]
    R[:, n:n + mi] = -np.eye(mi)
    rows.append(R)
    rhs.append(-qp.c[ineq])
    # -t <= 0 for every elastic variable
    R = np.zeros((nt, nx))
    R[:, n:] = -np.eye(nt)
    rows.append(R)
    rhs.append(np.zeros(nt))
    if qp.delta is not None:
        R = np.zeros((2 * n, nx))
        R[:n, :n] = np.eye(n)
        R[n:, :n] = -np.eye(n)
        rows.append(R)
        rhs.append(np.full(2 * n, qp.delta))
    G = np.vstack(rows)
    h = np.concatenate(rhs)
    # equalities J_E p - tp + tm = -c_E
    A = np.zeros((me, nx))
    A[:, :n] = qp.J[eq]
    A[:, n + mi:n + mi + me] = -np.eye(me)
    A[:, n + mi + me:] = np.eye(me)
    b = -qp.c[eq]
    Q = np.zeros((nx, nx))
    Q[:n, :n] = qp.H
    q = np.concatenate([qp.g, np.full(nt, qp.pi)])
    return Q, q, G, h, A, b, mi, me


def _ipm(Q, q, G, h, A, b, tol=1e-11, max_iter=80):
    """Mehrotra-style predictor-corrector for a dense convexifiable QP."""
    nx = len(q)
    mg, me = len(h), len(b)
    xi = np.zeros(nx)
    w = np.maximum(h - G @ xi, 1.0)
    z = np.ones(mg)
    nu = np.zeros(me)
    delta = 0.0
    scale = 1.0 + max(np.abs(q).max(initial=0.0), np.abs(h).max(initial=0.0))
    for _ in range(max_iter):
        rd = Q @ xi + q + (G.T @ z if mg else 0.0) + (A.T @ nu if me else 0.0)
        rp = G @ xi + w - h if mg else np.zeros(0)
        re = A @ xi - b if me else np.zeros(0)
        gap = float(w @ z) / max(mg, 1)
        if max(np.abs(rd).max(initial=0.0), np.abs(rp).max(initial=0.0),
               np.abs(re).max(initial=0.0)) <= tol * scale and gap <= tol * scale:
            break

        def solve_dir(rc):
            nonlocal delta
            d = z / w
            K = Q + (G.T * d) @ G if mg else Q.copy()
            while True:
                KK = K + delta * np.eye(nx)
                if me:
                    M = np.block([[KK, A.T], [A, -1e-14 * np.eye(me)]])
                    rhs1 = -rd - (G.T @ ((z * rp - rc) / w) if mg else 0.0)
                    try:
                        np.linalg.cholesky(KK)
                        sol = np.linalg.solve(M, np.concatenate([rhs1, -re]))
                        dxi, dnu = sol[:nx], sol[nx:]
                        break
                    except np.linalg.LinAlgError:
                        delta = 1e-8 if delta == 0 else delta * 10
                        if delta > 1e12:
                            raise
                else:
                    try:
                        L = np.linalg.cholesky(KK)
                        rhs1 = -rd - (G.T @ ((z * rp - rc) / w) if mg else 0.0)
                        dxi = np.linalg.solve(L.T, np.linalg.solve(L, rhs1))
                        dnu = np.zeros(0)
                        break
                    except np.linalg.LinAlgError:
                        delta = 1e-8 if delta == 0 else delta * 10
                        if delta > 1e12:
                            raise
            if mg:
                dw = -rp - G @ dxi
                dz = -(rc + z * dw) / w
            else:
                dw = np.zeros(0)
                dz = np.zeros(0)
            return dxi, dw, dz, dnu

        if mg == 0:
            dxi, dw, dz, dnu = solve_dir(np.zeros(0))
            xi = xi + dxi
            nu = nu + dnu
            continue
        # affine predictor
        rc_aff = w * z
        dxi, dw, dz, dnu = solve_dir(rc_aff)
        a_p = min(1.0, _max_step(w, dw))
        a_d = min(1.0, _max_step(z, dz))
        gap_aff = float((w + a_p * dw) @ (z + a_d * dz)) / mg
        sigma = (gap_aff / max(gap, 1e-300)) ** 3
        rc = w * z + dw * dz - sigma * gap
        dxi, dw, dz, dnu = solve_dir(rc)
        a_p = min(1.0, 0.9995 * _max_step(w, dw))
        a_d = min(1.0, 0.9995 * _max_step(z, dz))
        xi = xi + a_p * dxi
        w = w + a_p * dw
        nu = nu + a_d * dnu
        z = z + a_d * dz
    return xi, z, nu, delta


def _max_step(v, dv):
    neg = dv < 0
    return float(np.min(v[neg] / -dv[neg])) if np.any(neg) else np.inf


def _refine(qp: L1Qp, xi, z, mi, me) -> Optional[tuple]:
    """Polish by solving the KKT equality system on the detected active set."""
    n, m = qp.n, qp.m
    p = xi[:n]
    ineq_idx = np.where(~qp.is_eq)[0]
    eq_idx = np.where(qp.is_eq)[0]
    t_ineq = xi[n:n + mi]
    z_rows = z[:mi]
    v = qp.J @ p + qp.c if m else np.zeros(0)
    eps = 1e-6
    # classify elastic inequality rows
    violated = []
    active = []
    for k, j in enumerate(ineq_idx):
        if t_ineq[k] > eps:
            violated.append(j)
        elif z_rows[k] > eps:
            active.append(j)
    eq_sign = {}
    tp = xi[n + mi:n + mi + me]
    tm = xi[n + mi + me:]
    eq_active = []
    for k, j in enumerate(eq_idx):
        if tp[k] > eps:
            eq_sign[j] = 1.0
        elif tm[k] > eps:
            eq_sign[j] = -1.0
        else:
            eq_active.append(j)
    # box faces
    if qp.delta is not None:
        lo_face = [i for i in range(n) if p[i] <= -qp.delta + 1e-7]
        hi_face = [i for i in range(n)
                   if p[i] >= qp.delta - 1e-7 and i not in lo_face]
    else:
        lo_face, hi_face = [], []
    fixed = {i: -qp.delta for i in lo_face}
    fixed.update({i: qp.delta for i in hi_face})
    free = [i for i in range(n) if i not in fixed]
    act = active + eq_active
    nf, na = len(free), len(act)
    if na > nf:
        return None
    p_fix = np.zeros(n)
    for i, val in fixed.items():
        p_fix[i] = val
    # gradient contribution of rows pinned at the penalty bound
    g_eff = qp.g.copy()
    for j in violated:
        g_eff += qp.pi * qp.J[j]
    for j, sgn in eq_sign.items():
        g_eff += sgn * qp.pi * qp.J[j]
    K = np.zeros((nf + na, nf + na))
    K[:nf, :nf] = qp.H[np.ix_(free, free)]
    if na:
        K[:nf, nf:] = qp.J[np.ix_(act, free)].T
        K[nf:, :nf] = qp.J[np.ix_(act, free)]
    fix_idx = list(fixed)
    fix_val = np.array([fixed[i] for i in fix_idx])
    rhs_top = -g_eff[free]
    rhs_bot = -qp.c[act] if na else np.zeros(0)
    if fix_idx:
        rhs_top = rhs_top - qp.H[np.ix_(free, fix_idx)] @ fix_val
        if na:
            rhs_bot = rhs_bot - qp.J[np.ix_(act, fix_idx)] @ fix_val
    rhs = np.concatenate([rhs_top, rhs_bot])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    p_new = p_fix.copy()
    p_new[free] = sol[:nf]
    lam_act = sol[nf:]
    lam = np.zeros(m)
    for j in violated:
        lam[j] = qp.pi
    for j, sgn in eq_sign.items():
        lam[j] = sgn * qp.pi
    for j, lv in zip(act, lam_act):
        lam[j] = lv
    # validity checks
    v_new = qp.J @ p_new + qp.c if m else np.zeros(0)
    for j in range(m):
        if qp.is_eq[j]:
            if j in eq_sign:
                if eq_sign[j] * v_new[j] < -1e-9:
                    return None
            elif abs(v_new[j]) > 1e-8:
                return None
            if abs(lam[j]) > qp.pi + 1e-7:
                return None
        else:
            if j in violated:
                if v_new[j] < -1e-9:
                    return None
            elif j in act:
                if not (-1e-7 <= lam[j] <= qp.pi + 1e-7):
                    return None
            elif v_new[j] > 1e-8:
                return None
    if qp.delta is not None:
        if np.abs(p_new).max(initial=0.0) > qp.delta + 1e-9:
            return None
        # multipliers on the box faces must be nonnegative
        stat = qp.g + qp.H @ p_new + (qp.J.T @ lam if m else 0.0)
        for i in lo_face:
            if -stat[i] > 1e-7:
                return None
        for i in hi_face:
            if stat[i] > 1e-7:
                return None
    t_new = np.maximum(v_new, 0.0)
    t_new[qp.is_eq] = np.abs(v_new[qp.is_eq])
    t_new[np.abs(t_new) < 1e-12] = 0.0
    return p_new, t_new, np.clip(lam, -qp.pi, qp.pi)


def cauchy_step(qp: L1Qp) -> QpSolution:
    """Exact minimizer of the l1 model along its steepest-descent ray."""
    n = qp.n
    v = qp.J @ np.zeros(n) + qp.c if qp.m else np.zeros(0)
    d = -qp.g.copy()
    for j in range(qp.m):
        if (qp.is_eq[j] and v[j] > 0) or (not qp.is_eq[j] and v[j] > 0):
            d -= qp.pi * qp.J[j]
        elif qp.is_eq[j] and v[j] < 0:
            d += qp.pi * qp.J[j]
    dmax_comp = np.abs(d).max(initial=0.0)
    if dmax_comp < 1e-14:
        return QpSolution(np.zeros(n), np.maximum(v, 0.0), np.zeros(qp.m),
                          [], 0.0)
    tau_max = qp.delta / dmax_comp if qp.delta is not None else np.inf
    Jd = qp.J @ d if qp.m else np.zeros(0)
    # kink locations where a penalized row changes activity
    kinks = [0.0]
    for j in range(qp.m):
        if abs(Jd[j]) > 1e-14:
            tk = -v[j] / Jd[j]
            if 0 < tk < tau_max:
                kinks.append(tk)
    if np.isfinite(tau_max):
        kinks.append(tau_max)
    else:
        kinks.append(max(1.0, 2 * max(kinks)) * 1e6)
    kinks = sorted(set(kinks))
    gd = float(qp.g @ d)
    dHd = float(d @ (qp.H @ d))
    best_tau, best_val = 0.0, 0.0
    for a, b in zip(kinks[:-1], kinks[1:]):
        mid = 0.5 * (a + b)
        vm = v + mid * Jd
        slope = gd + dHd * 0.0
        lin = gd
        for j in range(qp.m):
            contributes = (vm[j] > 0) or (qp.is_eq[j] and vm[j] < 0)
            if contributes:
                sgn = 1.0 if vm[j] > 0 else -1.0
                lin += sgn * qp.pi * Jd[j]
        # model along the ray on this segment: val(tau) = lin*tau + dHd*tau^2/2 + const
        cands = [a, b]
        if dHd > 1e-14:
            t_star = -lin / dHd
            if a < t_star < b:
                cands.append(t_star)
        for tau in cands:
            val = qp.model_value(tau * d)
            if val < best_val - 1e-15:
                best_val, best_tau = val, tau
    p = best_tau * d
    vfin = qp.J @ p + qp.c if qp.m else np.zeros(0)
    return QpSolution(p, np.maximum(vfin, 0.0), np.zeros(qp.m), [],
                      qp.model_decrease(p), fallback=False)


def solve_l1qp(qp: L1Qp) -> QpSolution:
    """Interior-point solve + active-set polish; never worse than Cauchy."""
    n = qp.n
    cauchy = cauchy_step(qp)
    if qp.m == 0 and qp.delta is None:
        # unconstrained: plain (convexified) Newton step
        delta = 0.0
        while True:
            try:
                L = np.linalg.cholesky(qp.H + delta * np.eye(n))
                break
            except np.linalg.LinAlgError:
                delta = 1e-8 if delta == 0 else delta * 10
        p = -np.linalg.solve(L.T, np.linalg.solve(L, qp.g))
        dec = qp.model_decrease(p)
        if dec < cauchy.decrease:
            return QpSolution(cauchy.p, cauchy.t, cauchy.lam, [],
                              cauchy.decrease, fallback=True)
        return QpSolution(p, np.zeros(0), np.zeros(0), [], dec)
    Q, q, G, h, A, b, mi, me = _elastic_data(qp)
    try:
        xi, z, nu, delta_used = _ipm(Q, q, G, h, A, b)
    except np.linalg.LinAlgError:
        out = cauchy
        out.fallback = True
        return out
    refined = _refine(qp, xi, z, mi, me)
    if refined is not None:
        p, t, lam = refined
    else:
        p = xi[:n]
        t_in = xi[n:n + mi]
        lam = np.zeros(qp.m)
        lam[~qp.is_eq] = z[:mi]
        lam[qp.is_eq] = nu
        t = np.zeros(qp.m)
        t[~qp.is_eq] = t_in
        t[qp.is_eq] = xi[n + mi:n + mi + me] + xi[n + mi + me:]
    dec = qp.model_decrease(p)
    if dec < cauchy.decrease - 1e-12:
        out = cauchy
        out.fallback = True
        return out
    v = qp.J @ p + qp.c if qp.m else np.zeros(0)
    active = [j for j in range(qp.m)
              if t[j] > 1e-10 or (v[j] > -1e-8 and abs(lam[j]) > 1e-9)]
    stat = qp.g + qp.H @ p + (qp.J.T @ lam if qp.m else 0.0)
    if qp.delta is not None:
        inner = np.abs(p) < qp.delta - 1e-9
        kkt = float(np.abs(stat[inner]).max(initial=0.0))
    else:
        kkt = float(np.abs(stat).max(initial=0.0))
    return QpSolution(p, t, lam, active, dec, kkt_residual=kkt)
