"""Problem representation for two-stage nonlinear programs.

A two-stage problem consists of a master problem over x (objective f0,
inequality constraints c0 <= 0) and N subproblems.  Subproblem i optimizes
over its own decision vector y and sees only a small subvector of the
master variables (the "coupled" indices), passed in as the argument xt.
All derivative information is supplied through user callables; the
benchmark generator provides exact analytic ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp


class OracleError(ValueError):
    """A derivative oracle returned something unusable (wrong shape, NaN)."""


def _as_dense(a):
    return a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def default_fd_step(x: np.ndarray) -> float:
    """Central-difference step 1e-6 * (1 + ||x||_inf)."""
    x = np.asarray(x, dtype=float)
    return 1e-6 * (1.0 + (np.abs(x).max() if x.size else 0.0))


def finite_diff_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                         h: Optional[float] = None) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Raises OracleError naming the offending component if f returns a
    non-finite value at a probe point.
    """
    x = np.asarray(x, dtype=float)
    if h is None:
        h = default_fd_step(x)
    g = np.zeros_like(x)
    for k in range(x.size):
        xp = x.copy()
        xp[k] += h
        xm = x.copy()
        xm[k] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(
                f"non-finite function value while differencing component {k}"
                f" (f(x+h)={fp!r}, f(x-h)={fm!r})")
        g[k] = (fp - fm) / (2.0 * h)
    return g


def finite_diff_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                         h: Optional[float] = None) -> np.ndarray:
    """Central-difference Jacobian of a vector function."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = default_fd_step(x)
    cols = []
    for k in range(x.size):
        xp = x.copy()
        xp[k] += h
        xm = x.copy()
        xm[k] -= h
        fp = np.asarray(f(xp), dtype=float)
        fm = np.asarray(f(xm), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise OracleError(
                f"non-finite value while differencing component {k}")
        cols.append((fp - fm) / (2.0 * h))
    return np.column_stack(cols) if cols else np.zeros((0, 0))


# ---------------------------------------------------------------------------
# problem types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubproblemDef:
    """One second-stage problem: min_y f(y; xt) s.t. c(y; xt) <= 0.

    ``coupled`` lists the master-variable indices whose subvector is passed
    as xt.  ``hess_lag`` returns the blocks of grad^2 f + sum_j lam_j
    grad^2 c_j with respect to (y, xt).
    """
    dim: int
    n_con: int
    coupled: np.ndarray
    f: Callable[[np.ndarray, np.ndarray], float]
    grad_f: Callable[[np.ndarray, np.ndarray], tuple]
    c: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_c: Callable[[np.ndarray, np.ndarray], tuple]
    hess_lag: Callable[[np.ndarray, np.ndarray, np.ndarray], tuple]
    bounds: Optional[tuple] = None
    name: str = ""
    # set by the monolithic wrapper: use sparse factorization and a
    # structure-aware positive-definiteness probe
    sparse: bool = False
    pd_probe: Optional[Callable] = None

    @property
    def n_coupled(self) -> int:
        return int(len(self.coupled))

    def project(self, x: np.ndarray) -> np.ndarray:
        """Subvector of master variables entering this subproblem."""
        return np.asarray(x, dtype=float)[self.coupled]

    def scatter(self, g_coupled: np.ndarray, n0: int) -> np.ndarray:
        """Map a coupled-space gradient back to master indices."""
        out = np.zeros(n0)
        out[self.coupled] = g_coupled
        return out


def validate_subproblem(defn: SubproblemDef, y: np.ndarray, xt: np.ndarray,
                        sym_tol: float = 1e-12) -> None:
    """Probe oracle output shapes and Hessian symmetry at one point."""
    gy, gx = defn.grad_f(y, xt)
    if np.shape(gy) != (defn.dim,) or np.shape(gx) != (defn.n_coupled,):
        raise OracleError(f"gradient shapes {np.shape(gy)}, {np.shape(gx)} "
                          f"inconsistent with dims ({defn.dim}, {defn.n_coupled})")
    cv = np.asarray(defn.c(y, xt), dtype=float)
    if cv.shape != (defn.n_con,):
        raise OracleError(f"constraint shape {cv.shape} != ({defn.n_con},)")
    Jy, Jx = defn.jac_c(y, xt)
    if _as_dense(Jy).shape != (defn.n_con, defn.dim):
        raise OracleError("constraint Jacobian (y block) has wrong shape")
    if _as_dense(Jx).shape != (defn.n_con, defn.n_coupled):
        raise OracleError("constraint Jacobian (xt block) has wrong shape")
    lam = np.ones(defn.n_con)
    Wyy, Wyx, Wxx = (_as_dense(B) for B in defn.hess_lag(y, xt, lam))
    for nm, B in (("Wyy", Wyy), ("Wxx", Wxx)):
        if B.size and np.abs(B - B.T).max() > sym_tol:
            raise OracleError(f"Hessian block {nm} not symmetric")


@dataclass(frozen=True)
class TwoStageProblem:
    """Master problem data plus N subproblem definitions."""
    n0: int
    m0: int
    f0: Callable[[np.ndarray], float]
    grad0: Callable[[np.ndarray], np.ndarray]
    c0: Callable[[np.ndarray], np.ndarray]
    jac0: Callable[[np.ndarray], np.ndarray]
    hess_lag0: Callable[[np.ndarray, np.ndarray], np.ndarray]
    subs: Sequence[SubproblemDef] = field(default_factory=tuple)
    name: str = ""

    @property
    def n_subs(self) -> int:
        return len(self.subs)

    def master_hessian(self, x: np.ndarray, lam0: np.ndarray) -> np.ndarray:
        H = np.asarray(self.hess_lag0(x, lam0), dtype=float)
        return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# monolithic (undecomposed) assembly
# ---------------------------------------------------------------------------

@dataclass
class MonolithicProblem:
    """Smoothed undecomposed form for a fixed mu.

    Variables are stacked as z = (x, y_1..y_N, xt_1..xt_N, s_1..s_N).  The
    objective carries the subproblem barrier terms; c_i + s_i = 0 and
    xt_i - x[coupled_i] = 0 are equalities, c0(x) <= 0 stays an inequality.
    """
    problem: TwoStageProblem
    mu: float
    dim: int
    x_slice: slice
    y_slices: list
    xt_slices: list
    s_slices: list

    def pack(self, x, ys, xts, ss) -> np.ndarray:
        z = np.zeros(self.dim)
        z[self.x_slice] = x
        for sl, v in zip(self.y_slices, ys):
            z[sl] = v
        for sl, v in zip(self.xt_slices, xts):
            z[sl] = v
        for sl, v in zip(self.s_slices, ss):
            z[sl] = v
        return z

    def objective(self, z: np.ndarray) -> float:
        # accumulation order matches the decomposed evaluation exactly
        p = self.problem
        total = p.f0(z[self.x_slice])
        for i, d in enumerate(p.subs):
            s = z[self.s_slices[i]]
            total += d.f(z[self.y_slices[i]], z[self.xt_slices[i]]) \
                - self.mu * float(np.log(s).sum())
        return total

    def equality_residual(self, z: np.ndarray) -> np.ndarray:
        p = self.problem
        x = z[self.x_slice]
        parts = []
        for i, d in enumerate(p.subs):
            y = z[self.y_slices[i]]
            xt = z[self.xt_slices[i]]
            parts.append(np.asarray(d.c(y, xt)) + z[self.s_slices[i]])
            parts.append(xt - x[d.coupled])
        return np.concatenate(parts) if parts else np.zeros(0)

    def inequality(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(self.problem.c0(z[self.x_slice]), dtype=float)


def assemble_monolithic(problem: TwoStageProblem, mu: float) -> MonolithicProblem:
    """Stack master and subproblem blocks into the single-stage barrier form."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    pos = problem.n0
    y_slices, xt_slices, s_slices = [], [], []
    for d in problem.subs:
        y_slices.append(slice(pos, pos + d.dim))
        pos += d.dim
    for d in problem.subs:
        xt_slices.append(slice(pos, pos + d.n_coupled))
        pos += d.n_coupled
    for d in problem.subs:
        s_slices.append(slice(pos, pos + d.n_con))
        pos += d.n_con
    return MonolithicProblem(problem=problem, mu=mu, dim=pos,
                             x_slice=slice(0, problem.n0),
                             y_slices=y_slices, xt_slices=xt_slices,
                             s_slices=s_slices)


def monolithic_nlp(problem: TwoStageProblem) -> SubproblemDef:
    """Copy-eliminated single NLP over z = (x, y_1..y_N).

    Substitutes xt_i = x[coupled_i] exactly, leaving an inequality-only
    problem min f0 + sum f_i s.t. c0 <= 0, c_i <= 0 that the interior-point
    subproblem solver can handle directly (empty coupled block).  Used as
    the monolithic-solve oracle.
    """
    p = problem
    n0 = p.n0
    offs = []
    pos = n0
    for d in p.subs:
        offs.append(pos)
        pos += d.dim
    n = pos
    m = p.m0 + sum(d.n_con for d in p.subs)
    big = pos > 600
    empty = np.zeros(0)

    def split(z):
        x = z[:n0]
        ys = [z[o:o + d.dim] for o, d in zip(offs, p.subs)]
        return x, ys

    def f(z, _xt):
        x, ys = split(z)
        total = p.f0(x)
        for d, y in zip(p.subs, ys):
            total += d.f(y, x[d.coupled])
        return total

    def grad_f(z, _xt):
        x, ys = split(z)
        g = np.zeros(n)
        g[:n0] = p.grad0(x)
        for o, d, y in zip(offs, p.subs, ys):
            gy, gx = d.grad_f(y, x[d.coupled])
            g[o:o + d.dim] = gy
            g[:n0][d.coupled] += gx
        return g, empty

    def c(z, _xt):
        x, ys = split(z)
        parts = [np.asarray(p.c0(x), dtype=float)]
        for d, y in zip(p.subs, ys):
            parts.append(np.asarray(d.c(y, x[d.coupled]), dtype=float))
        return np.concatenate(parts)

    def jac_c(z, _xt):
        x, ys = split(z)
        rows = [sp.hstack([sp.csr_matrix(_as_dense(p.jac0(x))),
                           sp.csr_matrix((p.m0, n - n0))], format="csr")] \
            if p.m0 else []
        for o, d, y in zip(offs, p.subs, ys):
            Jy, Jx = d.jac_c(y, x[d.coupled])
            Jx_full = sp.lil_matrix((d.n_con, n0))
            Jx_full[:, d.coupled] = _as_dense(Jx)
            blocks = [sp.csr_matrix(Jx_full), None, sp.csr_matrix(_as_dense(Jy)), None]
            left = sp.csr_matrix((d.n_con, o - n0))
            right = sp.csr_matrix((d.n_con, n - o - d.dim))
            rows.append(sp.hstack([blocks[0], left, blocks[2], right], format="csr"))
        J = sp.vstack(rows, format="csr") if rows else sp.csr_matrix((0, n))
        return (J if big else J.toarray()), np.zeros((m, 0))

    def hess_lag(z, _xt, lam):
        x, ys = split(z)
        lam0 = lam[:p.m0]
        W = sp.lil_matrix((n, n))
        W[:n0, :n0] = p.hess_lag0(x, lam0)
        pos_l = p.m0
        for o, d, y in zip(offs, p.subs, ys):
            lam_i = lam[pos_l:pos_l + d.n_con]
            pos_l += d.n_con
            Wyy, Wyx, Wxx = (_as_dense(B) for B in d.hess_lag(y, x[d.coupled], lam_i))
            W[o:o + d.dim, o:o + d.dim] = Wyy
            idx = d.coupled
            # wings and master accumulation over coupled indices
            Wyx_full = np.zeros((d.dim, n0))
            Wyx_full[:, idx] = Wyx
            W[o:o + d.dim, :n0] += Wyx_full
            W[:n0, o:o + d.dim] += Wyx_full.T
            Wxx_full = np.zeros((n0, n0))
            Wxx_full[np.ix_(idx, idx)] = Wxx
            W[:n0, :n0] += Wxx_full
        Wc = sp.csr_matrix(W)
        return (Wc if big else Wc.toarray()), np.zeros((n, 0)), np.zeros((0, 0))

    block_slices = [slice(0, n0)] + [slice(o, o + d.dim) for o, d in zip(offs, p.subs)]

    def arrow_pd_probe(M) -> bool:
        # Schur-based PD check exploiting the arrow structure: the master
        # block is PD iff each diagonal sub-block and the master Schur
        # complement are PD.
        Ms = sp.csc_matrix(M) if sp.issparse(M) else M
        S = _as_dense(Ms[:n0, :n0]).copy() if sp.issparse(Ms) else Ms[:n0, :n0].copy()
        try:
            for sl in block_slices[1:]:
                B = _as_dense(Ms[sl, sl]) if sp.issparse(Ms) else Ms[sl, sl]
                wing = _as_dense(Ms[sl, :n0]) if sp.issparse(Ms) else Ms[sl, :n0]
                L = np.linalg.cholesky(B)
                V = np.linalg.solve(L, wing)
                S -= V.T @ V
            np.linalg.cholesky(S)
            return True
        except np.linalg.LinAlgError:
            return False

    return SubproblemDef(
        dim=n, n_con=m, coupled=np.zeros(0, dtype=int),
        f=f, grad_f=grad_f, c=c, jac_c=jac_c, hess_lag=hess_lag,
        name=f"monolithic({p.name})", sparse=big,
        pd_probe=arrow_pd_probe if problem.n_subs > 0 else None)
