"""Primal-dual interior-point solver for smooth nonlinear programs.

Problems have the form::

    min f(x)  s.t.  ce(x) = 0,  il <= ci(x) <= iu,  xl <= x <= xu

Inequalities receive slack variables, all bounds are handled by a
logarithmic barrier whose parameter decreases monotonically, and each
iteration takes a damped Newton step on the perturbed KKT conditions. The
symmetric indefinite KKT matrix is factorised with a sparse LDL^T (qdldl);
its inertia is read off the diagonal factor and corrected with a diagonal
shift of the Hessian block when it is wrong. Step acceptance uses a filter
line search with second-order corrections. When no Hessian callback is
given, a damped BFGS approximation of the Lagrangian Hessian is used.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import qdldl
import scipy.sparse as sp

log = logging.getLogger(__name__)

Array = np.ndarray
_EMPTY = (np.zeros(0, dtype=int), np.zeros(0, dtype=int))


class Status(str, enum.Enum):
    LOCALLY_OPTIMAL = "locally-optimal"
    MAX_ITERATIONS = "max-iterations"
    INFEASIBLE = "infeasible-detected"
    NUMERICAL_FAILURE = "numerical-failure"


@dataclass
class NlpProblem:
    """Smooth NLP with fixed sparsity patterns.

    Jacobian callbacks return the values of the entries declared in the
    matching ``*_structure`` pair ``(rows, cols)``. The optional Hessian
    callback ``hessian(x, obj_factor, y_eq, y_ineq)`` returns the lower
    triangle of ``obj_factor*f + y_eq.ce + y_ineq.ci`` in ``hess_structure``.
    ``objective_offset`` is a constant added to the reported objective only;
    keeping large constants out of ``objective`` preserves finite-difference
    and line-search accuracy.
    """

    n: int
    x_lower: Array
    x_upper: Array
    objective: Callable[[Array], float]
    gradient: Callable[[Array], Array]
    n_eq: int = 0
    eq_values: Callable[[Array], Array] | None = None
    eq_jacobian: Callable[[Array], Array] | None = None
    eq_structure: tuple[Array, Array] = _EMPTY
    n_ineq: int = 0
    ineq_values: Callable[[Array], Array] | None = None
    ineq_jacobian: Callable[[Array], Array] | None = None
    ineq_structure: tuple[Array, Array] = _EMPTY
    ineq_lower: Array | None = None
    ineq_upper: Array | None = None
    hessian: Callable[[Array, float, Array, Array], Array] | None = None
    hess_structure: tuple[Array, Array] = _EMPTY
    objective_offset: float = 0.0

    def __post_init__(self):
        self.x_lower = np.broadcast_to(np.asarray(self.x_lower, dtype=float), (self.n,)).copy()
        self.x_upper = np.broadcast_to(np.asarray(self.x_upper, dtype=float), (self.n,)).copy()
        if np.any(self.x_lower > self.x_upper):
            raise ValueError("variable lower bound exceeds upper bound")
        self.eq_structure = tuple(np.asarray(a, dtype=int) for a in self.eq_structure)
        self.ineq_structure = tuple(np.asarray(a, dtype=int) for a in self.ineq_structure)
        self.hess_structure = tuple(np.asarray(a, dtype=int) for a in self.hess_structure)
        if self.ineq_upper is None:
            self.ineq_upper = np.full(self.n_ineq, np.inf)
        if self.ineq_lower is None:
            self.ineq_lower = np.full(self.n_ineq, -np.inf)
        self.ineq_lower = np.asarray(self.ineq_lower, dtype=float)
        self.ineq_upper = np.asarray(self.ineq_upper, dtype=float)
        if len(self.ineq_lower) != self.n_ineq or len(self.ineq_upper) != self.n_ineq:
            raise ValueError("inequality bound arrays do not match n_ineq")
        if np.any(self.ineq_lower >= self.ineq_upper):
            raise ValueError("inequality rows need ineq_lower < ineq_upper")
        for rows, cols, m in (
            (*self.eq_structure, self.n_eq),
            (*self.ineq_structure, self.n_ineq),
        ):
            if len(rows) != len(cols):
                raise ValueError("structure rows/cols length mismatch")
            if len(rows) and (rows.max() >= m or cols.max() >= self.n or rows.min() < 0):
                raise ValueError("Jacobian structure out of range")

    # checked evaluation helpers -------------------------------------------

    def eval_eq(self, x) -> Array:
        if self.n_eq == 0:
            return np.zeros(0)
        return _checked(self.eq_values(x), self.n_eq, "eq_values")

    def eval_ineq(self, x) -> Array:
        if self.n_ineq == 0:
            return np.zeros(0)
        return _checked(self.ineq_values(x), self.n_ineq, "ineq_values")

    def eval_eq_jac(self, x) -> Array:
        if self.n_eq == 0:
            return np.zeros(0)
        return _checked(self.eq_jacobian(x), len(self.eq_structure[0]), "eq_jacobian")

    def eval_ineq_jac(self, x) -> Array:
        if self.n_ineq == 0:
            return np.zeros(0)
        return _checked(self.ineq_jacobian(x), len(self.ineq_structure[0]), "ineq_jacobian")

    def eval_grad(self, x) -> Array:
        return _checked(self.gradient(x), self.n, "gradient")

    def constraint_violation(self, x) -> float:
        """Largest violation of equalities, inequalities and variable bounds."""
        viol = [0.0]
        if self.n_eq:
            viol.append(np.max(np.abs(self.eval_eq(x))))
        if self.n_ineq:
            ci = self.eval_ineq(x)
            viol.append(np.max(np.maximum(ci - self.ineq_upper, self.ineq_lower - ci)))
        viol.append(np.max(np.maximum(x - self.x_upper, self.x_lower - x), initial=0.0))
        return float(max(viol))


def _checked(values, size, name) -> Array:
    arr = np.asarray(values, dtype=float).ravel()
    if arr.shape != (size,):
        raise ValueError(f"{name} returned {arr.shape[0]} values, expected {size}")
    return arr


@dataclass
class NlpOptions:
    tol: float = 1e-6
    feas_tol: float = 1e-8
    max_iter: int = 3000
    mu_init: float = 0.1
    bound_push: float = 1e-2
    max_time: float = float("inf")
    print_level: int = 0
    nlp_scaling_max_gradient: float = 100.0


@dataclass
class NlpSolution:
    x: Array
    status: Status
    kkt: dict[str, float]
    objective: float
    iterations: int
    wall_time: float
    y_eq: Array = field(default_factory=lambda: np.zeros(0))
    y_ineq: Array = field(default_factory=lambda: np.zeros(0))
    z_lower: Array = field(default_factory=lambda: np.zeros(0))
    z_upper: Array = field(default_factory=lambda: np.zeros(0))
    mu_history: list[float] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status is Status.LOCALLY_OPTIMAL


# -- derivative checker ------------------------------------------------------


def check_derivatives(problem: NlpProblem, point, hessian: bool = False):
    """Compare declared derivatives with central finite differences.

    Every declared gradient and Jacobian entry is checked (and, with
    ``hessian=True``, the Lagrangian Hessian at unit multipliers). Errors are
    ``|analytic - fd| / max(1, |fd|)``.

    Returns:
        ``(max_error, location)`` where location names the worst entry.
    """
    x = np.asarray(point, dtype=float).copy()
    n = problem.n
    h = 1e-6 * np.maximum(1.0, np.abs(x))
    worst = (0.0, "none")

    def consider(analytic, fd, label):
        nonlocal worst
        err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))
        if err.size:
            k = int(np.argmax(err))
            if err[k] > worst[0]:
                worst = (float(err[k]), label(k))

    def central(fun, j):
        xp, xm = x.copy(), x.copy()
        xp[j] += h[j]
        xm[j] -= h[j]
        return (fun(xp) - fun(xm)) / (xp[j] - xm[j])

    g = problem.eval_grad(x)
    g_fd = np.array([central(problem.objective, j) for j in range(n)])
    consider(g, g_fd, lambda k: f"gradient[{k}]")

    for kind, rows_cols, vals, fun in (
        ("eq", problem.eq_structure, problem.eval_eq_jac, problem.eval_eq),
        ("ineq", problem.ineq_structure, problem.eval_ineq_jac, problem.eval_ineq),
    ):
        rows, cols = rows_cols
        if not len(rows):
            continue
        analytic = vals(x)
        m = problem.n_eq if kind == "eq" else problem.n_ineq
        dense = sp.coo_matrix((analytic, (rows, cols)), shape=(m, n)).tocsc()
        fd_cols = {}
        for j in np.unique(cols):
            fd_cols[j] = central(fun, j)
        fd = np.array([fd_cols[c][r] for r, c in zip(rows, cols)])
        summed = np.asarray(dense[rows, cols]).ravel()
        consider(summed, fd, lambda k, kind=kind: f"{kind}_jacobian[{rows[k]},{cols[k]}]")
        # entries missing from the declared pattern
        for j, col in fd_cols.items():
            declared = np.zeros(m, dtype=bool)
            declared[rows[cols == j]] = True
            stray = np.where(~declared & (np.abs(col) > 1e-6 * max(1.0, np.abs(col).max())))[0]
            if len(stray):
                err = float(np.abs(col[stray]).max())
                rel = err / max(1.0, err)
                if rel > worst[0]:
                    worst = (rel, f"{kind}_jacobian[{stray[0]},{j}] undeclared")

    if hessian and problem.hessian is not None:
        ye, yi = np.ones(problem.n_eq), np.ones(problem.n_ineq)

        def lag_grad(z):
            out = problem.eval_grad(z)
            for rows_cols, jac, y in (
                (problem.eq_structure, problem.eval_eq_jac, ye),
                (problem.ineq_structure, problem.eval_ineq_jac, yi),
            ):
                r, c = rows_cols
                if len(r):
                    out = out + np.bincount(c, weights=jac(z) * y[r], minlength=n)
            return out

        hr, hc = problem.hess_structure
        H = sp.coo_matrix((problem.hessian(x, 1.0, ye, yi), (hr, hc)), shape=(n, n)).toarray()
        H = H + np.tril(H, -1).T
        H_fd = np.column_stack([central(lag_grad, j) for j in range(n)])
        lower = np.tril_indices(n)
        consider(H[lower], H_fd[lower], lambda k: f"hessian[{lower[0][k]},{lower[1][k]}]")
    return worst


# -- KKT assembly ------------------------------------------------------------


class _KKT:
    """Fixed-pattern upper-triangular KKT matrix with an LDL^T factorisation.

    Unknown ordering: ``[dx (n), dy_eq (me), dy_ineq (mi)]``.
    """

    def __init__(self, n, me, mi, hess_rc, je_rc, ji_rc):
        self.n, self.me, self.mi = n, me, mi
        N = n + me + mi
        self.N = N
        hr, hc = hess_rc
        diag = np.arange(N)
        blocks = [
            (np.minimum(hr, hc), np.maximum(hr, hc)),
            (diag, diag),
            (je_rc[1], je_rc[0] + n),
            (ji_rc[1], ji_rc[0] + n + me),
        ]
        self.sizes = [len(b[0]) for b in blocks]
        rows = np.concatenate([b[0] for b in blocks])
        cols = np.concatenate([b[1] for b in blocks])
        key = cols.astype(np.int64) * N + rows
        uniq, self.slot = np.unique(key, return_inverse=True)
        self.indices = (uniq % N).astype(np.int32)
        ucols = uniq // N
        self.indptr = np.searchsorted(ucols, np.arange(N + 1)).astype(np.int32)
        self.nnz = len(uniq)
        self.diag_pos = self.slot[self.sizes[0] : self.sizes[0] + N]
        self.solver = None

    def assemble(self, hess_vals, diag_vals, je_vals, ji_vals) -> sp.csc_matrix:
        data = np.bincount(
            self.slot,
            weights=np.concatenate([hess_vals, diag_vals, je_vals, ji_vals]),
            minlength=self.nnz,
        )
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(self.N, self.N))

    def factor(self, K: sp.csc_matrix) -> tuple[int, int, int]:
        """Factorise and return the inertia (positive, negative, zero)."""
        try:
            if self.solver is None:
                self.solver = qdldl.Solver(K, upper=True)
            else:
                self.solver.update(K, upper=True)
        except (RuntimeError, ValueError):
            self.solver = None
            return 0, 0, self.N
        D = self.solver.factors()[1]
        bad = ~np.isfinite(D) | (np.abs(D) < 1e-300)
        return int(np.sum((D > 0) & ~bad)), int(np.sum((D < 0) & ~bad)), int(np.sum(bad))

    def solve(self, rhs: Array) -> Array:
        return self.solver.solve(rhs)


def _sym_matvec(K_upper: sp.csc_matrix, diag: Array, x: Array) -> Array:
    return K_upper @ x + K_upper.T @ x - diag * x


# -- solver ------------------------------------------------------------------


class _Reduced:
    """View of a problem with fixed variables (xl == xu) removed and scaling applied."""

    def __init__(self, prob: NlpProblem, x0: Array, opts: NlpOptions):
        self.prob = prob
        self.free = np.flatnonzero(prob.x_lower < prob.x_upper)
        self.template = np.where(prob.x_lower == prob.x_upper, prob.x_lower, x0)
        col_map = -np.ones(prob.n, dtype=int)
        col_map[self.free] = np.arange(len(self.free))
        self.col_map = col_map
        self.n = len(self.free)
        self.xl = prob.x_lower[self.free]
        self.xu = prob.x_upper[self.free]

        er, ec = prob.eq_structure
        self.eq_keep = col_map[ec] >= 0
        self.je_rc = (er[self.eq_keep], col_map[ec[self.eq_keep]])
        ir, ic = prob.ineq_structure
        self.in_keep = col_map[ic] >= 0
        self.ji_rc = (ir[self.in_keep], col_map[ic[self.in_keep]])
        if prob.hessian is not None:
            hr, hc = prob.hess_structure
            self.h_keep = (col_map[hr] >= 0) & (col_map[hc] >= 0)
            self.h_rc = (col_map[hr[self.h_keep]], col_map[hc[self.h_keep]])
        else:
            r, c = np.tril_indices(self.n)
            self.h_rc = (r, c)

        x = self.full(np.clip(x0[self.free], self.xl, self.xu))
        g = prob.eval_grad(x)[self.free]
        gmax = opts.nlp_scaling_max_gradient
        self.obj_scale = min(1.0, gmax / max(np.max(np.abs(g), initial=0.0), 1e-300))
        self.eq_scale = self._row_scale(prob.n_eq, self.je_rc, prob.eval_eq_jac(x)[self.eq_keep], gmax)
        self.in_scale = self._row_scale(prob.n_ineq, self.ji_rc, prob.eval_ineq_jac(x)[self.in_keep], gmax)

    @staticmethod
    def _row_scale(m, rc, vals, gmax):
        if m == 0:
            return np.ones(0)
        rowmax = np.zeros(m)
        np.maximum.at(rowmax, rc[0], np.abs(vals))
        return np.minimum(1.0, gmax / np.maximum(rowmax, 1e-300))

    def full(self, xr: Array) -> Array:
        x = self.template.copy()
        x[self.free] = xr
        return x

    def f(self, x):
        return self.obj_scale * float(self.prob.objective(x))

    def grad(self, x):
        return self.obj_scale * self.prob.eval_grad(x)[self.free]

    def ce(self, x):
        return self.eq_scale * self.prob.eval_eq(x)

    def ci(self, x):
        return self.in_scale * self.prob.eval_ineq(x)

    def je(self, x):
        return self.eq_scale[self.je_rc[0]] * self.prob.eval_eq_jac(x)[self.eq_keep]

    def ji(self, x):
        return self.in_scale[self.ji_rc[0]] * self.prob.eval_ineq_jac(x)[self.in_keep]

    def hess(self, x, ye, yi):
        vals = self.prob.hessian(x, self.obj_scale, self.eq_scale * ye, self.in_scale * yi)
        return np.asarray(vals, dtype=float)[self.h_keep]


def _spmv_t(rc, vals, y, n):
    """J^T y for a COO Jacobian."""
    if len(rc[0]) == 0:
        return np.zeros(n)
    return np.bincount(rc[1], weights=vals * y[rc[0]], minlength=n)


def _spmv(rc, vals, x, m):
    if len(rc[0]) == 0:
        return np.zeros(m)
    return np.bincount(rc[0], weights=vals * x[rc[1]], minlength=m)


def _push(v, lo, hi, push):
    """Move ``v`` strictly inside ``[lo, hi]`` by a relative margin."""
    v = v.copy()
    fl, fu = np.isfinite(lo), np.isfinite(hi)
    both = fl & fu
    span = np.where(both, np.where(both, hi, 0.0) - np.where(both, lo, 0.0), np.inf)
    lo0, hi0 = np.where(fl, lo, 0.0), np.where(fu, hi, 0.0)
    pl = np.minimum(push * np.maximum(1.0, np.abs(lo0)), push * span)
    pu = np.minimum(push * np.maximum(1.0, np.abs(hi0)), push * span)
    v[fl] = np.maximum(v[fl], (lo0 + pl)[fl])
    v[fu] = np.minimum(v[fu], (hi0 - pu)[fu])
    mid = both & (lo0 + pl > hi0 - pu)
    v[mid] = 0.5 * (lo0[mid] + hi0[mid])
    return v


def solve_nlp(
    problem: NlpProblem,
    start,
    options: NlpOptions | None = None,
    warm: NlpSolution | None = None,
    **overrides,
) -> NlpSolution:
    """Solve ``problem`` from ``start`` to local stationarity.

    ``warm`` supplies multipliers from an earlier solve of a problem with
    the same constraints; ``overrides`` update individual options.
    """
    opts = NlpOptions(**{**(options or NlpOptions()).__dict__, **overrides})
    t0 = time.perf_counter()
    x0 = np.asarray(start, dtype=float).ravel()
    if x0.shape != (problem.n,):
        raise ValueError(f"start has {x0.size} entries, expected {problem.n}")
    if not np.all(np.isfinite(x0)):
        raise ValueError("start contains non-finite values")
    return _Solver(problem, x0, opts, warm, t0).run()


class _Solver:
    # filter line-search and barrier constants
    kappa_eps = 10.0
    kappa_mu = 0.2
    theta_mu = 1.5
    tau_min = 0.99
    gamma_theta = 1e-5
    gamma_phi = 1e-8
    delta_sw = 1.0
    s_theta = 1.1
    s_phi = 2.3
    eta_phi = 1e-4
    kappa_sigma = 1e10
    kappa_d = 1e-5
    delta_c = 1e-9
    max_soc = 4

    def __init__(self, prob, x0, opts, warm, t0):
        self.prob, self.opts, self.t0 = prob, opts, t0
        self.red = red = _Reduced(prob, x0, opts)
        n, me, mi = red.n, prob.n_eq, prob.n_ineq
        self.n, self.me, self.mi = n, me, mi

        # primal vector z = [x; s] with bounds
        self.L = np.concatenate([red.xl, red.in_scale * prob.ineq_lower])
        self.U = np.concatenate([red.xu, red.in_scale * prob.ineq_upper])
        self.has_l = np.isfinite(self.L)
        self.has_u = np.isfinite(self.U)
        only_l = self.has_l & ~self.has_u
        only_u = self.has_u & ~self.has_l
        self.damp = np.where(only_l, 1.0, np.where(only_u, -1.0, 0.0))

        x = _push(x0[red.free], red.xl, red.xu, opts.bound_push)
        s = _push(red.ci(red.full(x)), self.L[n:], self.U[n:], opts.bound_push)
        self.z = np.concatenate([x, s])
        self.mu = opts.mu_init

        self.ye, self.yi = np.zeros(me), np.zeros(mi)
        self.zl = np.where(self.has_l, 1.0, 0.0)
        self.zu = np.where(self.has_u, 1.0, 0.0)
        if warm is not None:
            self._apply_warm(warm)

        self.kkt = _KKT(n, me, mi, red.h_rc, red.je_rc, red.ji_rc)
        self.delta_w_last = 0.0
        self.bfgs = None if prob.hessian is not None else np.eye(n)
        self.mu_history = [self.mu]

    def _apply_warm(self, warm: NlpSolution):
        red = self.red
        if len(warm.y_eq) == self.me:
            self.ye = warm.y_eq * red.obj_scale / np.where(red.eq_scale > 0, red.eq_scale, 1.0)
        if len(warm.y_ineq) == self.mi:
            yi = warm.y_ineq * red.obj_scale / np.where(red.in_scale > 0, red.in_scale, 1.0)
            self.yi = yi
            # slack multipliers follow the sign of the inequality multiplier
            self.zl[self.n :] = np.where(self.has_l[self.n :], np.maximum(-yi, 0.0), 0.0)
            self.zu[self.n :] = np.where(self.has_u[self.n :], np.maximum(yi, 0.0), 0.0)
        if len(warm.z_lower) == self.prob.n:
            self.zl[: self.n] = np.where(self.has_l[: self.n], warm.z_lower[red.free] * red.obj_scale, 0.0)
            self.zu[: self.n] = np.where(self.has_u[: self.n], warm.z_upper[red.free] * red.obj_scale, 0.0)
        floor = self.opts.mu_init
        self.zl = np.where(self.has_l, np.maximum(self.zl, floor), 0.0)
        self.zu = np.where(self.has_u, np.maximum(self.zu, floor), 0.0)

    # -- evaluations -------------------------------------------------------

    def _eval(self, z):
        red = self.red
        x = red.full(z[: self.n])
        ev = {"x": x, "f": red.f(x), "ce": red.ce(x), "ci": red.ci(x)}
        return ev

    def _eval_derivs(self, ev):
        red = self.red
        x = ev["x"]
        ev["g"] = red.grad(x)
        ev["je"] = red.je(x)
        ev["ji"] = red.ji(x)
        return ev

    def _theta(self, ev, z):
        return float(np.sum(np.abs(ev["ce"])) + np.sum(np.abs(ev["ci"] - z[self.n :])))

    def _phi(self, ev, z):
        mu = self.mu
        dl = z - self.L
        du = self.U - z
        if np.any(dl[self.has_l] <= 0) or np.any(du[self.has_u] <= 0):
            return np.inf
        val = ev["f"] - mu * np.sum(np.log(dl[self.has_l])) - mu * np.sum(np.log(du[self.has_u]))
        val += self.kappa_d * mu * np.sum(self.damp * z)
        return float(val)

    def _barrier_grad(self, ev, z):
        mu = self.mu
        g = np.zeros_like(z)
        g[: self.n] = ev["g"]
        g[self.has_l] -= mu / (z - self.L)[self.has_l]
        g[self.has_u] += mu / (self.U - z)[self.has_u]
        g += self.kappa_d * mu * self.damp
        return g

    def _grad_lag(self, ev):
        """Gradient of the Lagrangian w.r.t. z, excluding bound multipliers."""
        red = self.red
        n = self.n
        gl = np.zeros(n + self.mi)
        gl[:n] = ev["g"] + _spmv_t(red.je_rc, ev["je"], self.ye, n) + _spmv_t(red.ji_rc, ev["ji"], self.yi, n)
        gl[n:] = -self.yi
        return gl

    def _errors(self, ev, z, mu):
        gl = self._grad_lag(ev) - self.zl + self.zu
        mult = np.concatenate([self.ye, self.yi, self.zl, self.zu])
        mult_max = np.max(np.abs(mult), initial=0.0)
        zmax = np.max(np.concatenate([self.zl, self.zu]), initial=0.0)
        dual = np.max(np.abs(gl), initial=0.0) / (1.0 + mult_max)
        primal = max(
            np.max(np.abs(ev["ce"]), initial=0.0),
            np.max(np.abs(ev["ci"] - z[self.n :]), initial=0.0),
        )
        hl, hu = self.has_l, self.has_u
        cl = (z - self.L)[hl] * self.zl[hl] - mu
        cu = (self.U - z)[hu] * self.zu[hu] - mu
        compl = max(np.max(np.abs(cl), initial=0.0), np.max(np.abs(cu), initial=0.0)) / (1.0 + zmax)
        return dual, primal, compl

    def _unscaled_violation(self, ev, z):
        red = self.red
        ce = ev["ce"] / np.where(red.eq_scale > 0, red.eq_scale, 1.0)
        ci = ev["ci"] / np.where(red.in_scale > 0, red.in_scale, 1.0)
        prob = self.prob
        v = [np.max(np.abs(ce), initial=0.0)]
        if self.mi:
            v.append(np.max(np.maximum(ci - prob.ineq_upper, prob.ineq_lower - ci)))
        return float(max(v))

    # -- Newton system -----------------------------------------------------

    def _hess_values(self, ev):
        if self.bfgs is not None:
            r, c = self.red.h_rc
            return self.bfgs[r, c]
        return self.red.hess(ev["x"], self.ye, self.yi)

    def _sigma(self, z):
        # gaps can round to zero after many fraction-to-boundary steps
        sig = np.zeros_like(z)
        hl, hu = self.has_l, self.has_u
        floor = np.finfo(float).eps
        sig[hl] += self.zl[hl] / np.maximum(z[hl] - self.L[hl], floor * np.maximum(1.0, np.abs(self.L[hl])))
        sig[hu] += self.zu[hu] / np.maximum(self.U[hu] - z[hu], floor * np.maximum(1.0, np.abs(self.U[hu])))
        return sig

    def _factor(self, ev, z, hvals):
        """Build and factorise the KKT matrix with inertia correction."""
        n, me, mi = self.n, self.me, self.mi
        sig = self._sigma(z)
        sx, ss = sig[:n], sig[n:]
        delta_w = 0.0
        attempts = 0
        while True:
            ds = ss + delta_w
            diag = np.concatenate([
                sx + delta_w,
                np.full(me, -self.delta_c),
                -(1.0 / ds + self.delta_c),
            ])
            K = self.kkt.assemble(hvals, diag, ev["je"], ev["ji"])
            pos, neg, zero = self.kkt.factor(K)
            if zero == 0 and pos == n and neg == me + mi:
                break
            attempts += 1
            if delta_w == 0.0:
                delta_w = 1e-4 if self.delta_w_last == 0 else max(1e-20, self.delta_w_last / 3.0)
            else:
                delta_w *= 100.0 if self.delta_w_last == 0 else 8.0
            if delta_w > 1e40:
                return None
        if delta_w > 0:
            self.delta_w_last = delta_w
        # exact system (without the static regularisation) for refinement
        diag_exact = diag.copy()
        diag_exact[n : n + me] = 0.0
        diag_exact[n + me :] = -1.0 / ds
        K_exact = self.kkt.assemble(hvals, diag_exact, ev["je"], ev["ji"])
        return {"K": K_exact, "diag": K_exact.diagonal(), "ds": ds, "delta_w": delta_w}

    def _solve_kkt(self, fac, rhs):
        sol = self.kkt.solve(rhs)
        for _ in range(5):
            res = rhs - _sym_matvec(fac["K"], fac["diag"], sol)
            if np.max(np.abs(res)) <= 1e-12 * (1.0 + np.max(np.abs(rhs))):
                break
            sol = sol + self.kkt.solve(res)
        return sol

    def _direction(self, fac, ev, z, r_e=None, r_i=None):
        """Primal-dual search direction; optional constraint residual overrides (SOC)."""
        n, me = self.n, self.me
        bg = self._barrier_grad(ev, z)
        red = self.red
        r_x = bg[:n] + _spmv_t(red.je_rc, ev["je"], self.ye, n) + _spmv_t(red.ji_rc, ev["ji"], self.yi, n)
        r_s = bg[n:] - self.yi
        if r_e is None:
            r_e = ev["ce"]
        if r_i is None:
            r_i = ev["ci"] - z[n:]
        ds_diag = fac["ds"]
        rhs = np.concatenate([-r_x, -r_e, -(r_i + r_s / ds_diag)])
        sol = self._solve_kkt(fac, rhs)
        dx = sol[:n]
        dye = sol[n : n + me]
        dyi = sol[n + me :]
        ds = (dyi - r_s) / ds_diag
        dz = np.concatenate([dx, ds])
        mu = self.mu
        dzl = np.zeros_like(z)
        dzu = np.zeros_like(z)
        hl, hu = self.has_l, self.has_u
        dzl[hl] = (mu / (z - self.L) - self.zl - self.zl / (z - self.L) * dz)[hl]
        dzu[hu] = (mu / (self.U - z) - self.zu + self.zu / (self.U - z) * dz)[hu]
        return dz, dye, dyi, dzl, dzu

    def _frac_to_boundary(self, v, dv, lo_mask, lo, hi_mask, hi, tau):
        alpha = 1.0
        m = lo_mask & (dv < 0)
        if np.any(m):
            alpha = min(alpha, float(np.min(-tau * (v - lo)[m] / dv[m])))
        m = hi_mask & (dv > 0)
        if np.any(m):
            alpha = min(alpha, float(np.min(tau * (hi - v)[m] / dv[m])))
        return alpha

    # -- main loop ---------------------------------------------------------

    def run(self) -> NlpSolution:
        opts = self.opts
        z = self.z
        ev = self._eval_derivs(self._eval(z))
        theta0 = self._theta(ev, z)
        self.theta_max = 1e4 * max(1.0, theta0)
        self.theta_min = 1e-4 * max(1.0, theta0)
        self.filter: list[tuple[float, float]] = []
        status = Status.MAX_ITERATIONS
        it = 0
        alpha_pr = alpha_du = 0.0
        while True:
            dual, primal, compl = self._errors(ev, z, 0.0)
            unscaled = self._unscaled_violation(ev, z)
            if opts.print_level or log.isEnabledFor(logging.DEBUG):
                log.log(
                    logging.INFO if opts.print_level else logging.DEBUG,
                    "iter %4d obj %.8e inf_pr %.2e inf_du %.2e mu %.2e a_pr %.2e a_du %.2e",
                    it, ev["f"] / self.red.obj_scale, primal, dual, self.mu, alpha_pr, alpha_du,
                )
            if max(dual, primal, compl) <= opts.tol and unscaled <= opts.feas_tol:
                status = Status.LOCALLY_OPTIMAL
                break
            if it >= opts.max_iter or time.perf_counter() - self.t0 > opts.max_time:
                status = Status.MAX_ITERATIONS
                break

            # barrier update (monotone)
            while True:
                e_mu = max(self._errors(ev, z, self.mu))
                if e_mu > self.kappa_eps * self.mu or self.mu <= opts.tol / 10:
                    break
                self.mu = max(opts.tol / 10, min(self.kappa_mu * self.mu, self.mu**self.theta_mu))
                self.filter = []
            self.mu_history.append(self.mu)

            hvals = self._hess_values(ev)
            fac = self._factor(ev, z, hvals)
            if fac is None:
                status = Status.NUMERICAL_FAILURE
                break
            dz, dye, dyi, dzl, dzu = self._direction(fac, ev, z)

            tau = max(self.tau_min, 1.0 - self.mu)
            a_max = self._frac_to_boundary(z, dz, self.has_l, self.L, self.has_u, self.U, tau)
            a_z = min(
                self._frac_to_boundary(self.zl, dzl, self.has_l, 0.0, np.zeros_like(z, bool), 0.0, tau),
                self._frac_to_boundary(self.zu, dzu, self.has_u, 0.0, np.zeros_like(z, bool), 0.0, tau),
            )
            accepted = self._line_search(ev, z, dz, a_max, fac, tau)
            if accepted is None:
                accepted = self._restore(ev, z)
                if accepted is None:
                    status = Status.INFEASIBLE if primal > opts.feas_tol else Status.NUMERICAL_FAILURE
                    break
                z_new, ev_new, alpha_pr = accepted
                dz = z_new - z
                self.ye, self.yi = self.ye * 1.0, self.yi * 1.0
                alpha_du = 0.0
            else:
                z_new, ev_new, alpha_pr = accepted
                alpha_du = a_z
                self.ye = self.ye + alpha_pr * dye
                self.yi = self.yi + alpha_pr * dyi
                self.zl = self.zl + a_z * dzl
                self.zu = self.zu + a_z * dzu
            # keep bound multipliers close to the central path
            dl = (z_new - self.L)
            du = (self.U - z_new)
            ks = self.kappa_sigma
            hl, hu = self.has_l, self.has_u
            self.zl[hl] = np.clip(self.zl[hl], self.mu / (ks * dl[hl]), ks * self.mu / dl[hl])
            self.zu[hu] = np.clip(self.zu[hu], self.mu / (ks * du[hu]), ks * self.mu / du[hu])

            ev_new = self._eval_derivs(ev_new)
            if self.bfgs is not None:
                self._bfgs_update(ev, ev_new, z_new - z)
            z, ev = z_new, ev_new
            it += 1

        return self._finish(z, ev, status, it)

    def _line_search(self, ev, z, dz, a_max, fac, tau):
        theta = self._theta(ev, z)
        phi = self._phi(ev, z)
        gd = float(self._barrier_grad(ev, z) @ dz)
        alpha = a_max
        if gd < 0:
            a_min = min(self.gamma_theta, self.gamma_phi * theta / -gd,
                        self.delta_sw * theta**self.s_theta / (-gd) ** self.s_phi)
        else:
            a_min = self.gamma_theta
        a_min = max(0.05 * a_min, 1e-14)
        # a step at round-off level cannot be ranked by the filter; take it
        if np.max(np.abs(dz) / (1.0 + np.abs(z))) < 10.0 * np.finfo(float).eps and theta <= self.opts.feas_tol:
            zt = z + alpha * dz
            return zt, self._eval(zt), alpha
        first = True
        while alpha >= a_min:
            zt = z + alpha * dz
            evt = self._eval(zt)
            res = self._acceptable(evt, zt, theta, phi, gd, alpha)
            if res:
                return zt, evt, alpha
            if first:
                first = False
                soc = self._second_order(ev, z, dz, evt, zt, alpha, fac, tau, theta, phi, gd)
                if soc is not None:
                    return soc
            alpha *= 0.5
        return None

    def _acceptable(self, evt, zt, theta, phi, gd, alpha) -> bool:
        theta_t = self._theta(evt, zt)
        phi_t = self._phi(evt, zt)
        if not (np.isfinite(theta_t) and np.isfinite(phi_t)):
            return False
        if theta_t > self.theta_max:
            return False
        for tf, pf in self.filter:
            if theta_t >= tf and phi_t >= pf:
                return False
        switching = gd < 0 and alpha * (-gd) ** self.s_phi > self.delta_sw * theta**self.s_theta
        if theta <= self.theta_min and switching:
            return phi_t <= phi + self.eta_phi * alpha * gd
        ok = theta_t <= (1 - self.gamma_theta) * theta or phi_t <= phi - self.gamma_phi * theta
        if ok:
            self.filter.append(((1 - self.gamma_theta) * theta, phi - self.gamma_phi * theta))
        return ok

    def _second_order(self, ev, z, dz, evt, zt, alpha, fac, tau, theta, phi, gd):
        n = self.n
        theta_t = self._theta(evt, zt)
        if theta_t < theta:
            return None
        ce_soc = alpha * ev["ce"] + evt["ce"]
        ci_soc = alpha * (ev["ci"] - z[n:]) + (evt["ci"] - zt[n:])
        theta_old = theta_t
        for _ in range(self.max_soc):
            dz_soc = self._direction(fac, ev, z, r_e=ce_soc, r_i=ci_soc)[0]
            a_soc = self._frac_to_boundary(z, dz_soc, self.has_l, self.L, self.has_u, self.U, tau)
            zs = z + a_soc * dz_soc
            evs = self._eval(zs)
            if self._acceptable(evs, zs, theta, phi, gd, alpha):
                return zs, evs, a_soc
            theta_s = self._theta(evs, zs)
            if theta_s > 0.99 * theta_old:
                return None
            theta_old = theta_s
            ce_soc = a_soc * ce_soc + evs["ce"]
            ci_soc = a_soc * ci_soc + (evs["ci"] - zs[n:])
        return None

    def _restore(self, ev, z):
        """Feasibility restoration: Gauss-Newton steps on the constraints only."""
        n, me = self.n, self.me
        theta0 = self._theta(ev, z)
        red = self.red
        cur_z, cur_ev = z, self._eval_derivs(self._eval(z))
        for _ in range(50):
            sig = self._sigma(cur_z) + np.sqrt(self.mu)
            zero_h = np.zeros(len(red.h_rc[0]))
            ds_ = sig[n:]
            diag = np.concatenate([sig[:n], np.full(me, -self.delta_c), -(1.0 / ds_ + self.delta_c)])
            K = self.kkt.assemble(zero_h, diag, cur_ev["je"], cur_ev["ji"])
            pos, neg, zero = self.kkt.factor(K)
            if zero:
                return None
            r_e = cur_ev["ce"]
            r_i = cur_ev["ci"] - cur_z[n:]
            rhs = np.concatenate([np.zeros(n), -r_e, -r_i])
            sol = self.kkt.solve(rhs)
            dx = sol[:n]
            ds = sol[n + me :] / ds_
            dz = np.concatenate([dx, ds])
            a = self._frac_to_boundary(cur_z, dz, self.has_l, self.L, self.has_u, self.U, 0.99)
            th = self._theta(cur_ev, cur_z)
            while a > 1e-8:
                zt = cur_z + a * dz
                evt = self._eval(zt)
                if self._theta(evt, zt) < (1 - 1e-4 * a) * th:
                    break
                a *= 0.5
            else:
                return None
            cur_z, cur_ev = zt, self._eval_derivs(evt)
            th_new = self._theta(cur_ev, cur_z)
            phi_new = self._phi(cur_ev, cur_z)
            dominated = any(th_new >= tf and phi_new >= pf for tf, pf in self.filter)
            if th_new <= 0.9 * theta0 and not dominated:
                self.filter.append(((1 - self.gamma_theta) * theta0, self._phi(ev, z) - self.gamma_phi * theta0))
                return cur_z, cur_ev, a
        return None

    def _bfgs_update(self, ev, ev_new, step):
        n = self.n
        red = self.red
        s = step[:n]
        if not np.any(s):
            return

        def lag_grad(e):
            return e["g"] + _spmv_t(red.je_rc, e["je"], self.ye, n) + _spmv_t(red.ji_rc, e["ji"], self.yi, n)

        y = lag_grad(ev_new) - lag_grad(ev)
        B = self.bfgs
        Bs = B @ s
        sBs = float(s @ Bs)
        sy = float(s @ y)
        if sBs <= 0:
            return
        theta = 1.0 if sy >= 0.2 * sBs else 0.8 * sBs / (sBs - sy)
        r = theta * y + (1 - theta) * Bs
        self.bfgs = B - np.outer(Bs, Bs) / sBs + np.outer(r, r) / float(s @ r)

    def _finish(self, z, ev, status, it) -> NlpSolution:
        red, prob = self.red, self.prob
        x = red.full(z[: self.n])
        dual, primal, compl = self._errors(ev, z, 0.0)
        if status is Status.LOCALLY_OPTIMAL and prob.constraint_violation(x) > self.opts.feas_tol:
            status = Status.NUMERICAL_FAILURE
        sf = red.obj_scale
        zl_full = np.zeros(prob.n)
        zu_full = np.zeros(prob.n)
        zl_full[red.free] = self.zl[: self.n] / sf
        zu_full[red.free] = self.zu[: self.n] / sf
        return NlpSolution(
            x=x,
            status=status,
            kkt={"stationarity": dual, "feasibility": self._unscaled_violation(ev, z), "complementarity": compl},
            objective=float(prob.objective(x)) + prob.objective_offset,
            iterations=it,
            wall_time=time.perf_counter() - self.t0,
            y_eq=self.ye * red.eq_scale / sf,
            y_ineq=self.yi * red.in_scale / sf,
            z_lower=zl_full,
            z_upper=zu_full,
            mu_history=self.mu_history,
        )
