"""Benchmark instances: the three-example corpus, random two-stage QCQPs,
and solution-map / smoothed-value curve emission.

The QCQP generator produces problems of the form

    min  1/2 x'Q0 x + c0'x + sum_i fhat_i(x)      s.t. quadratic c0j(x) <= 0
    fhat_i(x) = min  1/2 y'Qi y + ci'y + rho*sum(p + t)
                s.t. 1/2 y'Qij y + cij'y + bij'(x_c - p + t) + rij <= 0,
                     -50 <= y <= 50,  p, t >= 0,

where x_c is the coupled subvector of x.  The elastic variables p, t make
every subproblem feasible for any x (full recourse); the paper's elastic
equality Px - xt = p - t is eliminated by substituting the subproblem copy
xt - p + t wherever the coupled variables appear.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .model import SubproblemDef, TwoStageProblem
from .subsolver import Subsolver, SubproblemError

SQRT2 = np.sqrt(2.0)
BOX = 50.0
RHO = 100.0
DENSITY = 0.05


# ---------------------------------------------------------------------------
# example corpus
# ---------------------------------------------------------------------------

def _bounds_master(lo: float, hi: float):
    """Master data for a 1-D box lo <= x <= hi with zero objective."""
    return dict(
        n0=1, m0=2,
        f0=lambda x: 0.0,
        grad0=lambda x: np.zeros(1),
        c0=lambda x: np.array([lo - x[0], x[0] - hi]),
        jac0=lambda x: np.array([[-1.0], [1.0]]),
        hess_lag0=lambda x, lam: np.zeros((1, 1)),
    )


def _example_linear_split() -> TwoStageProblem:
    """Linear program split into two nonnegative parts summing to x.

    The equality y11 + y12 = x is eliminated (y12 = x - y11), which leaves
    an inequality-only subproblem with the same barrier solution.
    """
    a, b = 1.5 * SQRT2, 0.5 * SQRT2

    sub = SubproblemDef(
        dim=1, n_con=2, coupled=np.array([0]),
        f=lambda y, xt: (a + b) * y[0] - b * xt[0],
        grad_f=lambda y, xt: (np.array([a + b]), np.array([-b])),
        c=lambda y, xt: np.array([-y[0], y[0] - xt[0]]),
        jac_c=lambda y, xt: (np.array([[-1.0], [1.0]]),
                             np.array([[0.0], [-1.0]])),
        hess_lag=lambda y, xt, lam: (np.zeros((1, 1)), np.zeros((1, 1)),
                                     np.zeros((1, 1))),
        name="linear-split")
    return TwoStageProblem(subs=(sub,), name="2.1", **_bounds_master(0.1, 2.0))


def linear_split_solution(x: float, mu: float):
    """Closed-form barrier solution (y11, y12) of the split example."""
    d = np.sqrt(mu * mu + 2.0 * x * x)
    y11 = (mu + SQRT2 * x - d) / (2.0 * SQRT2)
    y12 = (-mu + SQRT2 * x + d) / (2.0 * SQRT2)
    return y11, y12


def linear_split_value_sol(x: float, mu: float) -> float:
    """Closed-form solution-smoothed value mu + (sqrt2/2) x - sqrt(mu^2+2x^2)."""
    return mu + 0.5 * SQRT2 * x - np.sqrt(mu * mu + 2.0 * x * x)


def linear_split_hess_sol(x: float, mu: float) -> float:
    """Closed-form solution-smoothed second derivative (always negative)."""
    return -2.0 * mu * mu / (2.0 * x * x + mu * mu) ** 1.5


def linear_split_value_obj(x: float, mu: float) -> float:
    y11, y12 = linear_split_solution(x, mu)
    return linear_split_value_sol(x, mu) - mu * (np.log(y11) + np.log(y12))


def _example_disjoint_intervals() -> TwoStageProblem:
    """Bilinear-constraint subproblem whose feasible set splits in two.

    Feasible region [-2-x, -1-2x] u [-x, inf) for 0 <= x <= 1; the left
    interval shrinks to a point at x = 1.  Two solution maps y = -2-x and
    y = -x coexist, the first vanishing at x = 1.
    """
    def c(y, xt):
        yv, xv = y[0], xt[0]
        return np.array([-(yv + 1 + 2 * xv) * (yv + xv), -(yv + 2 + xv)])

    def jac(y, xt):
        yv, xv = y[0], xt[0]
        return (np.array([[-(2 * yv + 3 * xv + 1)], [-1.0]]),
                np.array([[-(3 * yv + 4 * xv + 1)], [-1.0]]))

    def hess(y, xt, lam):
        return (np.array([[-2.0 * lam[0]]]), np.array([[-3.0 * lam[0]]]),
                np.array([[-4.0 * lam[0]]]))

    sub = SubproblemDef(
        dim=1, n_con=2, coupled=np.array([0]),
        f=lambda y, xt: y[0],
        grad_f=lambda y, xt: (np.array([1.0]), np.array([0.0])),
        c=c, jac_c=jac, hess_lag=hess, name="disjoint-intervals")
    return TwoStageProblem(subs=(sub,), name="3.1", **_bounds_master(0.0, 2.0))


def disjoint_intervals_feasible_set(x: float):
    """Feasible intervals of the subproblem as a list of (lo, hi) pairs."""
    if 0.0 <= x <= 1.0:
        return [(-2.0 - x, -1.0 - 2.0 * x), (-x, np.inf)]
    return [(-x, np.inf)]


def _example_sign_flip_curvature() -> TwoStageProblem:
    """Box-constrained quadratic x*y^2 whose curvature flips sign with x.

    Strictly convex with minimizer y = 0 for x > 0; concave with boundary
    minimizers y = -1 and y = 2 for x < 0 (bifurcation at x = 0).
    """
    sub = SubproblemDef(
        dim=1, n_con=2, coupled=np.array([0]),
        f=lambda y, xt: xt[0] * y[0] ** 2,
        grad_f=lambda y, xt: (np.array([2.0 * xt[0] * y[0]]),
                              np.array([y[0] ** 2])),
        c=lambda y, xt: np.array([-y[0] - 1.0, y[0] - 2.0]),
        jac_c=lambda y, xt: (np.array([[-1.0], [1.0]]),
                             np.array([[0.0], [0.0]])),
        hess_lag=lambda y, xt, lam: (np.array([[2.0 * xt[0]]]),
                                     np.array([[2.0 * y[0]]]),
                                     np.zeros((1, 1))),
        bounds=(np.array([-1.0]), np.array([2.0])),
        name="sign-flip-curvature")
    return TwoStageProblem(subs=(sub,), name="3.2", **_bounds_master(-1.0, 1.0))


def example_corpus() -> dict:
    """The three reference problems keyed by their conventional ids."""
    return {"2.1": _example_linear_split(),
            "3.1": _example_disjoint_intervals(),
            "3.2": _example_sign_flip_curvature()}


# ---------------------------------------------------------------------------
# random QCQP instances
# ---------------------------------------------------------------------------

@dataclass
class QuadConstraint:
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    lin: np.ndarray
    coupling: Optional[np.ndarray]
    offset: float


@dataclass
class SubQcqp:
    q_diag: np.ndarray
    lin: np.ndarray
    constraints: list
    rho: float = RHO
    box: float = BOX


@dataclass
class QcqpInstance:
    seed: int
    N: int
    n0: int
    ni: int
    mi: int
    nc: int
    m0: int
    convex: bool
    q0_diag: np.ndarray = None
    lin0: np.ndarray = None
    master_constraints: list = field(default_factory=list)
    subs: list = field(default_factory=list)

    @property
    def dims(self):
        return dict(N=self.N, n0=self.n0, ni=self.ni, mi=self.mi,
                    nc=self.nc, m0=self.m0)


def _sym_sparse_triplets(rng, n, density, diag_only=False, pos=False):
    """Random symmetric sparse matrix as full (row, col, val) triplets."""
    if diag_only:
        k = max(1, rng.binomial(n, density))
        idx = np.sort(rng.choice(n, size=k, replace=False))
        vals = rng.uniform(0.1, 1.0, size=k)
        return idx, idx, vals
    n_upper = n * (n + 1) // 2
    k = rng.binomial(n_upper, density)
    if k == 0:
        return (np.zeros(0, dtype=int),) * 2 + (np.zeros(0),)
    lin = np.sort(rng.choice(n_upper, size=k, replace=False))
    # decode linear upper-triangle index to (i, j), row-major with j >= i
    row_starts = np.concatenate([[0], np.cumsum(np.arange(n, 0, -1))])
    i = np.searchsorted(row_starts, lin, side="right") - 1
    j = lin - row_starts[i] + i
    vals = rng.uniform(0.0, 1.0, size=k) if pos else rng.uniform(-1.0, 1.0, size=k)
    off = i != j
    rows = np.concatenate([i, j[off]])
    cols = np.concatenate([j, i[off]])
    v = np.concatenate([vals, vals[off]])
    return rows, cols, v


def generate_qcqp(N: int, n0: int, ni: int, mi: int, nc: int, m0: int = 4,
                  seed: int = 0, convex: bool = False) -> QcqpInstance:
    """Deterministic random instance; per-subproblem PRNG streams are spawned
    from one seed sequence so the instance is reproducible bit-for-bit."""
    if nc > n0:
        raise ValueError("nc must not exceed n0")
    streams = np.random.SeedSequence(seed).spawn(N + 1)
    rng0 = np.random.default_rng(streams[0])
    inst = QcqpInstance(seed=seed, N=N, n0=n0, ni=ni, mi=mi, nc=nc, m0=m0,
                        convex=convex)
    inst.q0_diag = rng0.uniform(0.1, 1.0, size=n0)
    inst.lin0 = rng0.uniform(-1.0, 1.0, size=n0)
    for _ in range(m0):
        r, c, v = _sym_sparse_triplets(rng0, n0, DENSITY)
        inst.master_constraints.append(QuadConstraint(
            rows=r, cols=c, vals=v,
            lin=rng0.uniform(-1.0, 1.0, size=n0), coupling=None,
            offset=rng0.uniform(-2.0, -1.0)))
    for i in range(N):
        rng = np.random.default_rng(streams[i + 1])
        q = rng.uniform(0.1, 1.0, size=ni) if convex \
            else rng.uniform(-1.0, 1.0, size=ni)
        cons = []
        for _ in range(mi):
            r, c, v = _sym_sparse_triplets(rng, ni, DENSITY,
                                           diag_only=convex, pos=convex)
            cons.append(QuadConstraint(
                rows=r, cols=c, vals=v,
                lin=rng.uniform(-1.0, 1.0, size=ni),
                coupling=rng.uniform(-1.0, 1.0, size=nc),
                offset=rng.uniform(-2.0, -1.0)))
        inst.subs.append(SubQcqp(q_diag=q, lin=rng.uniform(-1.0, 1.0, size=ni),
                                 constraints=cons))
    return inst


# -- JSON round trip ---------------------------------------------------------

def _trip_json(qc: QuadConstraint):
    d = {"Q": {"triplets": [[int(i), int(j), float(v)] for i, j, v in
                            zip(qc.rows, qc.cols, qc.vals)]},
         "c": qc.lin.tolist(), "r": float(qc.offset)}
    if qc.coupling is not None:
        d["b"] = qc.coupling.tolist()
    return d


def instance_to_json(inst: QcqpInstance) -> str:
    doc = {
        "dims": inst.dims,
        "seed": inst.seed,
        "master": {
            "Q0": {"diag": inst.q0_diag.tolist()},
            "c0": inst.lin0.tolist(),
            "constraints": [_trip_json(qc) for qc in inst.master_constraints],
        },
        "subproblems": [{
            "Qi": {"diag": s.q_diag.tolist()},
            "ci": s.lin.tolist(),
            "rho": s.rho,
            "box": s.box,
            "constraints": [_trip_json(qc) for qc in s.constraints],
        } for s in inst.subs],
        "convex": inst.convex,
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def _trip_parse(d, has_b):
    t = np.asarray(d["Q"]["triplets"], dtype=float).reshape(-1, 3)
    return QuadConstraint(
        rows=t[:, 0].astype(int), cols=t[:, 1].astype(int), vals=t[:, 2],
        lin=np.asarray(d["c"], dtype=float),
        coupling=np.asarray(d["b"], dtype=float) if has_b else None,
        offset=float(d["r"]))


def instance_from_json(text: str) -> QcqpInstance:
    doc = json.loads(text)
    dims = doc["dims"]
    inst = QcqpInstance(seed=int(doc["seed"]), convex=bool(doc.get("convex", False)),
                        **{k: int(dims[k]) for k in ("N", "n0", "ni", "mi", "nc", "m0")})
    inst.q0_diag = np.asarray(doc["master"]["Q0"]["diag"], dtype=float)
    inst.lin0 = np.asarray(doc["master"]["c0"], dtype=float)
    inst.master_constraints = [_trip_parse(d, False)
                               for d in doc["master"]["constraints"]]
    for sd in doc["subproblems"]:
        inst.subs.append(SubQcqp(
            q_diag=np.asarray(sd["Qi"]["diag"], dtype=float),
            lin=np.asarray(sd["ci"], dtype=float),
            constraints=[_trip_parse(d, True) for d in sd["constraints"]],
            rho=float(sd["rho"]), box=float(sd["box"])))
    return inst


# -- instance -> problem oracles ---------------------------------------------

def _stack_constraints(cons):
    rows = np.concatenate([np.full(len(c.rows), j) for j, c in enumerate(cons)]) \
        if cons else np.zeros(0, dtype=int)
    return (rows,
            np.concatenate([c.rows for c in cons]) if cons else np.zeros(0, dtype=int),
            np.concatenate([c.cols for c in cons]) if cons else np.zeros(0, dtype=int),
            np.concatenate([c.vals for c in cons]) if cons else np.zeros(0),
            np.vstack([c.lin for c in cons]) if cons else None,
            np.vstack([c.coupling for c in cons]) if cons and cons[0].coupling is not None else None,
            np.array([c.offset for c in cons]) if cons else np.zeros(0))


def _quad_values(rows, ti, tj, tv, y, m):
    return 0.5 * np.bincount(rows, weights=tv * y[ti] * y[tj], minlength=m) \
        if len(rows) else np.zeros(m)


def _quad_jac(rows, ti, tj, tv, y, m, n):
    J = np.zeros((m, n))
    if len(rows):
        np.add.at(J, (rows, ti), tv * y[tj])
    return J


def _weighted_hess(rows, ti, tj, tv, lam, n):
    W = np.zeros((n, n))
    if len(rows):
        np.add.at(W, (ti, tj), tv * lam[rows])
    return W


def _sub_def(s: SubQcqp, nc: int, coupled: np.ndarray, idx: int) -> SubproblemDef:
    ni = len(s.q_diag)
    mi = len(s.constraints)
    rows, ti, tj, tv, C, B, R = _stack_constraints(s.constraints)
    n_hat = ni + 2 * nc
    m_hat = mi + 2 * ni + 2 * nc
    rho, box = s.rho, s.box
    sl_y, sl_p, sl_t = slice(0, ni), slice(ni, ni + nc), slice(ni + nc, n_hat)

    def chi(yh, xt):
        return xt - yh[sl_p] + yh[sl_t]

    def f(yh, xt):
        y = yh[sl_y]
        return 0.5 * float(y @ (s.q_diag * y)) + float(s.lin @ y) \
            + rho * float(yh[sl_p].sum() + yh[sl_t].sum())

    def grad_f(yh, xt):
        y = yh[sl_y]
        g = np.concatenate([s.q_diag * y + s.lin,
                            np.full(nc, rho), np.full(nc, rho)])
        return g, np.zeros(nc)

    def c(yh, xt):
        y = yh[sl_y]
        quad = _quad_values(rows, ti, tj, tv, y, mi)
        main = quad + C @ y + B @ chi(yh, xt) + R
        return np.concatenate([main, y - box, -y - box, -yh[sl_p], -yh[sl_t]])

    def jac_c(yh, xt):
        y = yh[sl_y]
        Jy = np.zeros((m_hat, n_hat))
        Jy[:mi, sl_y] = _quad_jac(rows, ti, tj, tv, y, mi, ni) + C
        Jy[:mi, sl_p] = -B
        Jy[:mi, sl_t] = B
        Jy[mi:mi + ni, sl_y] = np.eye(ni)
        Jy[mi + ni:mi + 2 * ni, sl_y] = -np.eye(ni)
        Jy[mi + 2 * ni:mi + 2 * ni + nc, sl_p] = -np.eye(nc)
        Jy[mi + 2 * ni + nc:, sl_t] = -np.eye(nc)
        Jx = np.zeros((m_hat, nc))
        Jx[:mi] = B
        return Jy, Jx

    def hess_lag(yh, xt, lam):
        W = np.zeros((n_hat, n_hat))
        W[np.arange(ni), np.arange(ni)] = s.q_diag
        W[:ni, :ni] += _weighted_hess(rows, ti, tj, tv, lam[:mi], ni)
        return W, np.zeros((n_hat, nc)), np.zeros((nc, nc))

    lo = np.concatenate([np.full(ni, -box), np.zeros(2 * nc)])
    hi = np.concatenate([np.full(ni, box), np.full(2 * nc, np.inf)])
    return SubproblemDef(dim=n_hat, n_con=m_hat, coupled=coupled,
                         f=f, grad_f=grad_f, c=c, jac_c=jac_c,
                         hess_lag=hess_lag, bounds=(lo, hi),
                         name=f"qcqp-sub-{idx}")


def instance_to_problem(inst: QcqpInstance) -> TwoStageProblem:
    n0, m0 = inst.n0, inst.m0
    rows, ti, tj, tv, C, _, R = _stack_constraints(inst.master_constraints)
    q0, c0v = inst.q0_diag, inst.lin0

    def f0(x):
        return 0.5 * float(x @ (q0 * x)) + float(c0v @ x)

    def grad0(x):
        return q0 * x + c0v

    def c0(x):
        return (_quad_values(rows, ti, tj, tv, x, m0) + C @ x + R) \
            if m0 else np.zeros(0)

    def jac0(x):
        return (_quad_jac(rows, ti, tj, tv, x, m0, n0) + C) \
            if m0 else np.zeros((0, n0))

    def hess_lag0(x, lam):
        return np.diag(q0) + _weighted_hess(rows, ti, tj, tv, lam, n0)

    coupled = np.arange(inst.nc)
    subs = tuple(_sub_def(s, inst.nc, coupled, i)
                 for i, s in enumerate(inst.subs))
    return TwoStageProblem(n0=n0, m0=m0, f0=f0, grad0=grad0, c0=c0,
                           jac0=jac0, hess_lag0=hess_lag0, subs=subs,
                           name=f"qcqp-seed{inst.seed}")


def verify_instance(inst: QcqpInstance) -> None:
    assert np.all(inst.q0_diag >= 0.1) and np.all(inst.q0_diag <= 1.0)
    if not inst.convex:
        for s in inst.subs:
            assert np.all(np.abs(s.q_diag) <= 1.0)
    for s in inst.subs:
        assert s.rho > 0 and s.box == BOX
        assert len(s.constraints) == inst.mi


# ---------------------------------------------------------------------------
# curve emission (solution maps and smoothed values over an x grid)
# ---------------------------------------------------------------------------

@dataclass
class CurveSpec:
    example: str
    x_min: float
    x_max: float
    count: int
    mus: tuple
    quantity: str = "obj"          # "obj" | "sol"

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("grid needs at least 2 points")
        if any(m <= 0 for m in self.mus):
            raise ValueError("mu values must be positive")


@dataclass
class CurvePoint:
    example: str
    branch: int
    mu: float
    x: float
    value: float
    y: float
    converged: bool
    state: object = None           # traced iterate, not serialized

    def row(self):
        return [self.example, self.branch, repr(self.mu), repr(self.x),
                "" if not np.isfinite(self.value) else repr(self.value),
                "" if not np.isfinite(self.y) else repr(self.y),
                int(self.converged)]


CURVE_HEADER = ["example", "branch", "mu", "x", "value", "y", "converged"]


def _seed_starts(defn: SubproblemDef, n_starts: int):
    if defn.bounds is not None and np.all(np.isfinite(defn.bounds[0])) \
            and np.all(np.isfinite(defn.bounds[1])):
        lo, hi = defn.bounds
    else:
        lo, hi = np.full(defn.dim, -5.0), np.full(defn.dim, 5.0)
    # uniform interior ladder, deterministic
    fr = (np.arange(n_starts) + 0.5) / n_starts
    return [lo + f * (hi - lo) for f in fr]


def emit_curves(spec: CurveSpec, n_starts: int = 8, seed_stride: int = 25,
                tol: float = 1e-11) -> list:
    """Trace KKT branches over the grid by warm-start continuation.

    Branches are labeled by warm-start lineage; new branches are seeded by
    multi-start at every `seed_stride`-th grid point and merged when two
    lineages agree within 1e-6.  A failed continuation emits a flagged row
    rather than silently dropping the branch.
    """
    problem = example_corpus()[spec.example]
    defn = problem.subs[0]
    solver = Subsolver(defn, safeguard=False)
    xs = np.linspace(spec.x_min, spec.x_max, spec.count)
    out = []
    for mu in spec.mus:
        branches = {}
        next_id = 0
        for gi, xv in enumerate(xs):
            x = np.array([xv])
            if gi % seed_stride == 0:
                for y0 in _seed_starts(defn, n_starts):
                    try:
                        st, _ = solver.solve(x, mu, start=solver.cold_start(
                            x, mu, y0=y0), tol=tol)
                    except SubproblemError:
                        continue
                    if not any(alive and abs(float(b.y[0]) - float(st.y[0]))
                               <= 1e-6 * (1 + abs(float(st.y[0])))
                               for alive, b in branches.values()):
                        branches[next_id] = (True, st)
                        next_id += 1
            for bid in sorted(branches):
                alive, st = branches[bid]
                if not alive:
                    continue
                try:
                    st_new, _ = solver.solve(x, mu, start=st, tol=tol)
                except SubproblemError:
                    out.append(CurvePoint(spec.example, bid, mu, float(xv),
                                          np.nan, np.nan, False))
                    branches[bid] = (False, st)
                    continue
                f_val = defn.f(st_new.y, st_new.x_copy)
                value = f_val if spec.quantity == "sol" else \
                    f_val - mu * float(np.log(st_new.s).sum())
                out.append(CurvePoint(spec.example, bid, mu, float(xv),
                                      float(value), float(st_new.y[0]),
                                      True, state=st_new))
                branches[bid] = (True, st_new)
            # merge coincident branches, keep the older label
            live = [(b, st) for b, (al, st) in branches.items() if al]
            for k in range(len(live)):
                for kk in range(k + 1, len(live)):
                    b1, s1 = live[k]
                    b2, s2 = live[kk]
                    if abs(float(s1.y[0]) - float(s2.y[0])) <= 1e-6 * (
                            1 + abs(float(s1.y[0]))):
                        branches[max(b1, b2)] = (False, branches[max(b1, b2)][1])
    return out


def write_curves_csv(points: list, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for p in points:
            w.writerow(p.row())
