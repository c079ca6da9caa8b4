"""Primal-dual interior-point method for LP/QP/SOCP.

Mehrotra predictor-corrector with Nesterov-Todd scaling over the product of a
nonnegative orthant and second-order cones.  Internally a ConicProblem is put
into the standard form

    minimize    1/2 x' P x + c' x
    subject to  A x = b
                G x + s = h,   s in K = R+^p x Q_{d1} x ... x Q_{dq},

with box bounds and general inequality rows mapped to orthant slacks and each
cone membership mapped to a selection block of G.  Every iteration solves one
condensed KKT system

    [[P + G' W^-2 G, A'], [A, 0]]

through :class:`~gridshield.solver.kkt.KktSystem`.

The solver is deterministic: identical inputs produce identical iterates.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from .kkt import KktSystem
from .problem import ConicProblem, Solution

__all__ = ["solve", "InteriorPointSolver"]

_STEP_FRAC = 0.99
_BIG_OBJ = 1e14


# ---------------------------------------------------------------------------
# cone arithmetic; s and lambda are partitioned into an orthant prefix of
# length p followed by SOC blocks of the given dims

class _Cone:
    def __init__(self, p, dims):
        self.p = p
        self.dims = list(dims)
        self.m = p + sum(dims)
        self.degree = p + len(dims)   # normalizer for the duality gap
        self.slices = []
        off = p
        for d in dims:
            self.slices.append(slice(off, off + d))
            off += d

    def e(self):
        u = np.zeros(self.m)
        u[:self.p] = 1.0
        for sl in self.slices:
            u[sl.start] = 1.0
        return u

    def margin(self, u):
        """min distance-to-boundary statistic (>0 means strictly interior)."""
        vals = []
        if self.p:
            vals.append(u[:self.p].min())
        for sl in self.slices:
            blk = u[sl]
            vals.append(blk[0] - np.linalg.norm(blk[1:]))
        return min(vals) if vals else np.inf

    def push_interior(self, u):
        a = -self.margin(u)
        if a < 0:
            return u
        return u + (1.0 + a) * self.e()

    def prod(self, u, v):
        """Jordan product u o v."""
        w = np.empty(self.m)
        w[:self.p] = u[:self.p] * v[:self.p]
        for sl in self.slices:
            ub, vb = u[sl], v[sl]
            w[sl.start] = ub @ vb
            w[sl.start + 1:sl.stop] = ub[0] * vb[1:] + vb[0] * ub[1:]
        return w

    def solve_prod(self, u, d):
        """Solve u o z = d for z (u strictly interior)."""
        z = np.empty(self.m)
        z[:self.p] = d[:self.p] / u[:self.p]
        for sl in self.slices:
            ub, db = u[sl], d[sl]
            u0, u1 = ub[0], ub[1:]
            det = u0 * u0 - u1 @ u1
            z0 = (u0 * db[0] - u1 @ db[1:]) / det
            z[sl.start] = z0
            z[sl.start + 1:sl.stop] = (db[1:] - z0 * u1) / u0
        return z

    def max_step(self, u, du):
        """Largest t >= 0 with u + t*du in K (np.inf if unbounded)."""
        t = np.inf
        if self.p:
            neg = du[:self.p] < 0
            if neg.any():
                with np.errstate(over="ignore", divide="ignore"):
                    t = min(t, float(np.min(-u[:self.p][neg] / du[:self.p][neg])))
        for sl in self.slices:
            ub, db = u[sl], du[sl]
            t = min(t, _soc_max_step(ub, db))
        return t


def _soc_max_step(u, du):
    # g(t) = (u0 + t d0) - ||u1 + t d1|| is concave with g(0) >= 0; find its
    # positive root via the quadratic (u0+t d0)^2 = ||u1+t d1||^2
    u0, u1 = u[0], u[1:]
    d0, d1 = du[0], du[1:]
    a = d0 * d0 - d1 @ d1
    b = u0 * d0 - u1 @ d1
    c = u0 * u0 - u1 @ u1
    c = max(c, 0.0)
    if a == 0.0:
        if b >= 0.0:
            return np.inf
        return c / (-2.0 * b)
    disc = b * b - a * c
    if a > 0.0:
        if disc < 0.0 or b >= 0.0:
            return np.inf
        # two positive roots; first crossing is the smaller one
        return (-b - np.sqrt(disc)) / a
    # a < 0: single positive crossing
    disc = max(disc, 0.0)
    return (-b - np.sqrt(disc)) / a


class _Scaling:
    """Nesterov-Todd scaling point for (s, lam): W lam = W^-1 s = v.

    For a SOC block, W = eta * V(wbar) with wbar the normalized scaling point
    (wbar' J wbar = 1, J = diag(1, -I)) and

        V(wbar) = [[w0, w1'], [w1, I + w1 w1' / (1 + w0)]],

    the PSD square root of the quadratic representation P(wbar) = 2 wbar wbar'
    - J, so that W^2 lam = s and W^-2 = eta^-2 P(J wbar).
    """

    def __init__(self, cone, s, lam):
        self.cone = cone
        p = cone.p
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            ratio = np.clip(s[:p] / lam[:p], 1e-16, 1e16) if p else np.empty(0)
        np.nan_to_num(ratio, copy=False, nan=1.0)
        self.d = np.sqrt(ratio)
        self.v = np.empty(cone.m)
        self.v[:p] = np.sqrt(s[:p] * lam[:p])
        self.q = []      # per SOC block: (eta, wbar)
        for sl in cone.slices:
            sb, lb = s[sl], lam[sl]
            js = max(sb[0] ** 2 - sb[1:] @ sb[1:], 1e-300)
            jl = max(lb[0] ** 2 - lb[1:] @ lb[1:], 1e-300)
            sbar, lbar = sb / np.sqrt(js), lb / np.sqrt(jl)
            gamma = np.sqrt((1.0 + sbar @ lbar) / 2.0)
            wbar = (sbar + _jhat(lbar)) / (2.0 * gamma)
            eta = (js / jl) ** 0.25
            self.q.append((eta, wbar))
            self.v[sl] = eta * _vmul(wbar, lb)

    def mul_w(self, u):
        out = np.empty(self.cone.m)
        p = self.cone.p
        out[:p] = self.d * u[:p]
        for (eta, wbar), sl in zip(self.q, self.cone.slices):
            out[sl] = eta * _vmul(wbar, u[sl])
        return out

    def mul_winv(self, u):
        out = np.empty(self.cone.m)
        p = self.cone.p
        out[:p] = u[:p] / self.d
        for (eta, wbar), sl in zip(self.q, self.cone.slices):
            out[sl] = _vmul(_jhat(wbar), u[sl]) / eta
        return out

    def lambda_blocks(self):
        """W^-2 as (diagonal, [dense blocks]) for the condensed KKT."""
        dense = []
        for (eta, wbar), sl in zip(self.q, self.cone.slices):
            d = sl.stop - sl.start
            jw = _jhat(wbar)
            H = 2.0 * np.outer(jw, jw)
            H[0, 0] -= 1.0
            H[1:, 1:] += np.eye(d - 1)
            dense.append(H / eta ** 2)
        return (1.0 / self.d ** 2 if self.cone.p else np.empty(0)), dense


def _jhat(u):
    v = u.copy()
    v[1:] = -v[1:]
    return v


def _vmul(w, u):
    """V(w) u for the PSD square root of P(w), w' J w = 1."""
    w0, w1 = w[0], w[1:]
    dot = w1 @ u[1:]
    out = np.empty_like(u)
    out[0] = w0 * u[0] + dot
    out[1:] = u[0] * w1 + u[1:] + (dot / (1.0 + w0)) * w1
    return out


# ---------------------------------------------------------------------------

class _StandardForm:
    """ConicProblem -> (P, c, A, b, G, h, cone) plus dual bookkeeping."""

    def __init__(self, prob):
        n = prob.n
        self.n = n
        self.c = np.asarray(prob.c, dtype=float)
        self.P = prob.P.tocsr() if prob.P is not None else None
        if prob.A_eq is not None and prob.A_eq.shape[0] > 0:
            self.A = sp.csr_matrix(prob.A_eq)
            self.b = np.asarray(prob.b_eq, dtype=float)
        else:
            self.A = sp.csr_matrix((0, n))
            self.b = np.zeros(0)

        rows, cols, vals, h = [], [], [], []
        self.lb_rows, self.ub_rows, self.ineq_rows = [], [], []
        r = 0
        if prob.lb is not None:
            for i, v in enumerate(prob.lb):
                if np.isfinite(v):
                    rows.append(r); cols.append(i); vals.append(-1.0)
                    h.append(-float(v)); self.lb_rows.append((r, i)); r += 1
        if prob.ub is not None:
            for i, v in enumerate(prob.ub):
                if np.isfinite(v):
                    rows.append(r); cols.append(i); vals.append(1.0)
                    h.append(float(v)); self.ub_rows.append((r, i)); r += 1
        if prob.G_ineq is not None:
            Gi = sp.coo_matrix(prob.G_ineq)
            for i, j, v in zip(Gi.row, Gi.col, Gi.data):
                rows.append(r + int(i)); cols.append(int(j)); vals.append(float(v))
            self.ineq_rows = list(range(r, r + Gi.shape[0]))
            h.extend(np.asarray(prob.h_ineq, dtype=float))
            r += Gi.shape[0]
        p_lin = r
        dims = []
        for cone_vars in prob.cones:
            d = len(cone_vars)
            for k, j in enumerate(cone_vars):
                rows.append(r + k); cols.append(int(j)); vals.append(-1.0)
            h.extend([0.0] * d)
            dims.append(d)
            r += d
        self.G = sp.csr_matrix((vals, (rows, cols)), shape=(r, n))
        self.h = np.asarray(h)
        self.cone = _Cone(p_lin, dims)


class InteriorPointSolver:
    """Internal conic solver satisfying the pluggable solver contract."""

    def __init__(self, backend=None):
        self.backend = backend

    def solve(self, problem, tol=1e-8, max_iter=200):
        return solve(problem, tol=tol, max_iter=max_iter, backend=self.backend)


class _SparseOps:
    """KKT assembly through scipy.sparse plus the compiled/fallback backend."""

    def __init__(self, sf, backend):
        self.sf = sf
        self.kkt = KktSystem(sf.n, sf.A.shape[0], backend=backend)
        self.backend_name = self.kkt.backend_name
        self._Gcsc = sf.G.tocsc()

    def factor(self, lam_diag, lam_dense):
        cone, sf = self.sf.cone, self.sf
        blocks = []
        if cone.p:
            blocks.append(sp.diags(lam_diag))
        blocks.extend(lam_dense)
        Lam = sp.block_diag(blocks, format="csc") if blocks else sp.csc_matrix((0, 0))
        H = (self._Gcsc.T @ Lam @ self._Gcsc).tocsc()
        if sf.P is not None:
            H = (H + sf.P).tocsc()
        self.kkt.set_matrix(H, sf.A)

    def solve(self, r1, r2):
        n = self.sf.n
        z = self.kkt.solve(np.concatenate([r1, r2]))
        return z[:n], z[n:]


class _DenseOps:
    """Dense KKT path for small problems; avoids sparse-assembly overhead."""

    def __init__(self, sf):
        self.sf = sf
        self.backend_name = "dense"
        n, neq = sf.n, sf.A.shape[0]
        self.n, self.neq = n, neq
        self.Gd = sf.G.toarray()
        self.Ad = sf.A.toarray()
        self.Pd = sf.P.toarray() if sf.P is not None else None
        self.K = np.zeros((n + neq, n + neq))
        self.K[:n, n:] = self.Ad.T
        self.K[n:, :n] = self.Ad
        self._reg = np.concatenate([np.full(n, 1e-9), np.full(neq, -1e-9)])

    def factor(self, lam_diag, lam_dense):
        cone = self.sf.cone
        p = cone.p
        scaled = np.empty_like(self.Gd)
        scaled[:p] = lam_diag[:, None] * self.Gd[:p]
        for blk, sl in zip(lam_dense, cone.slices):
            scaled[sl] = blk @ self.Gd[sl]
        H = self.Gd.T @ scaled
        if self.Pd is not None:
            H = H + self.Pd
        n = self.n
        self.K[:n, :n] = H
        self._K0 = self.K.copy()
        Kr = self.K.copy()
        Kr[np.arange(n + self.neq), np.arange(n + self.neq)] += self._reg
        # symmetric equilibration keeps the factor out of the subnormal
        # range that extreme scalings otherwise drive it into
        d = np.sqrt(np.maximum(np.abs(Kr).max(axis=0), 1e-12))
        self._eq = 1.0 / d
        Kr *= self._eq[:, None]
        Kr *= self._eq[None, :]
        with warnings.catch_warnings():
            # degenerate end-game iterations may hit exact zero pivots; the
            # best-iterate bookkeeping in the main loop absorbs them
            warnings.simplefilter("ignore", LinAlgWarning)
            self._lu = lu_factor(Kr, check_finite=False)

    def _raw(self, rhs):
        return self._eq * lu_solve(self._lu, self._eq * rhs,
                                   check_finite=False)

    def solve(self, r1, r2):
        rhs = np.concatenate([r1, r2])
        z = self._raw(rhs)
        z += self._raw(rhs - self._K0 @ z)
        return z[:self.n], z[self.n:]


def solve(problem, tol=1e-8, max_iter=200, backend=None, _phase1=True):
    """Solve a ConicProblem to the requested KKT tolerance.

    Structure (shapes, sparsity, cones, bounds) is cached on the problem
    object, so repeated solves of the same problem with updated b_eq/c data
    skip re-assembly.
    """
    sf = getattr(problem, "_sf_cache", None)
    if sf is None:
        problem.validate()
        sf = _StandardForm(problem)
        problem._sf_cache = sf
    n, cone = sf.n, sf.cone
    A, b, G, h, c, P = sf.A, sf.b, sf.G, sf.h, sf.c, sf.P

    if cone.m == 0:
        return _solve_equality_qp(problem, sf, tol)

    ops = getattr(problem, "_ops_cache", None) if backend is None else None
    if ops is None:
        # the KKT factor is (n + n_eq)^2; inequality rows only shape the
        # Hessian assembly, so they do not drive the dense/sparse choice
        if backend is None and n + A.shape[0] <= 420:
            ops = _DenseOps(sf)
        else:
            ops = _SparseOps(sf, backend)
        if backend is None:
            problem._ops_cache = ops
    if isinstance(ops, _DenseOps):
        A, G = ops.Ad, ops.Gd
    e = cone.e()

    def factor(lam_diag, lam_dense):
        ops.factor(lam_diag, lam_dense)

    def kkt_solve(r1, r2):
        return ops.solve(r1, r2)

    # --- initial point: least-squares solve with W = I
    factor(np.ones(cone.p), [np.eye(d) for d in cone.dims])
    x, y = kkt_solve(-c + G.T @ h, b)
    zt = G @ x - h
    s = cone.push_interior(-zt)
    lam = cone.push_interior(zt)

    resx0 = max(1.0, np.linalg.norm(c))
    resy0 = max(1.0, np.linalg.norm(b))
    resz0 = max(1.0, np.linalg.norm(h))

    status = "max_iter"
    best = None
    iters = 0
    tiny_steps = 0
    since_best = 0
    for iters in range(1, max_iter + 1):
        Px = P @ x if P is not None else 0.0
        rx = Px + c + A.T @ y + G.T @ lam
        ry = A @ x - b
        rz = G @ x + s - h
        gap = float(s @ lam)
        mu = gap / cone.degree
        if not np.isfinite(gap) or not np.all(np.isfinite(x)):
            break  # numerically poisoned iterate; fall back to best-so-far

        pcost = problem.objective(x)
        xPx = float(x @ (P @ x)) if P is not None else 0.0
        dcost = -0.5 * xPx - float(b @ y) - float(h @ lam)
        pres = max(np.linalg.norm(ry) / resy0, np.linalg.norm(rz) / resz0)
        dres = np.linalg.norm(rx) / resx0
        relgap = gap / max(1.0, abs(pcost))
        metrics = (pres, dres, relgap)
        if best is None or max(metrics) < max(best[0]):
            best = (metrics, x.copy(), y.copy(), s.copy(), lam.copy(),
                    pcost, dcost, iters)
            since_best = 0
        else:
            since_best += 1
            if since_best >= 8:
                break
        if pres <= tol and dres <= tol and relgap <= tol:
            status = "optimal"
            break
        if pcost < -_BIG_OBJ and pres <= np.sqrt(tol):
            status = "unbounded"
            break
        if dcost > _BIG_OBJ and dres <= np.sqrt(tol):
            status = "infeasible"
            break

        W = _Scaling(cone, s, lam)
        v = W.v
        lam_diag, lam_dense = W.lambda_blocks()
        factor(lam_diag, lam_dense)

        def direction(dc):
            rhs_s = W.mul_winv(cone.solve_prod(v, dc))
            r1 = -rx - G.T @ (rhs_s + _lam_apply(lam_diag, lam_dense, cone, rz))
            dx, dy = kkt_solve(r1, -ry)
            ds = -rz - G @ dx
            dlam = rhs_s + _lam_apply(lam_diag, lam_dense, cone, rz + G @ dx)
            return dx, dy, ds, dlam

        # predictor
        dc_aff = -cone.prod(v, v)
        dx_a, dy_a, ds_a, dl_a = direction(dc_aff)
        a_s = cone.max_step(s, ds_a)
        a_l = cone.max_step(lam, dl_a)
        alpha = min(1.0, a_s, a_l)
        gap_aff = float((s + alpha * ds_a) @ (lam + alpha * dl_a))
        sigma = min(1.0, max(0.0, gap_aff / gap)) ** 3

        # corrector
        cross = cone.prod(W.mul_winv(ds_a), W.mul_w(dl_a))
        dc = sigma * mu * e - cone.prod(v, v) - cross
        dx, dy, ds, dlam = direction(dc)
        a_s = cone.max_step(s, ds)
        a_l = cone.max_step(lam, dlam)
        t = min(1.0, _STEP_FRAC * min(a_s, a_l))
        if not np.isfinite(t) or t <= 0.0:
            break
        tiny_steps = tiny_steps + 1 if t < 1e-8 else 0
        if tiny_steps >= 3:
            break
        x += t * dx
        y += t * dy
        s += t * ds
        lam += t * dlam

    if status != "optimal" and best is not None:
        metrics, x, y, s, lam, pcost, dcost, _ = best
    else:
        Px = P @ x if P is not None else 0.0
        rx = Px + c + A.T @ y + G.T @ lam
        ry = A @ x - b
        rz = G @ x + s - h
        gap = float(s @ lam)
        pcost = problem.objective(x)
        xPx = float(x @ (P @ x)) if P is not None else 0.0
        dcost = -0.5 * xPx - float(b @ y) - float(h @ lam)
        metrics = (max(np.linalg.norm(ry) / resy0, np.linalg.norm(rz) / resz0),
                   np.linalg.norm(rx) / resx0, gap / max(1.0, abs(pcost)))

    if status == "max_iter" and _phase1:
        status = _classify_failure(problem, sf, metrics, pcost, tol, backend)

    duals = _split_duals(sf, y, lam)
    return Solution(x=x, duals=duals, status=status, kkt_residuals=metrics,
                    objective=pcost, dual_objective=dcost, iterations=iters,
                    info={"backend": ops.backend_name})


def _lam_apply(lam_diag, lam_dense, cone, u):
    out = np.empty(cone.m)
    out[:cone.p] = lam_diag * u[:cone.p]
    for blk, sl in zip(lam_dense, cone.slices):
        out[sl] = blk @ u[sl]
    return out


def _split_duals(sf, y, lam):
    duals = {"eq": y}
    lb = {i: lam[r] for r, i in sf.lb_rows}
    ub = {i: lam[r] for r, i in sf.ub_rows}
    duals["lb"] = lb
    duals["ub"] = ub
    duals["ineq"] = np.array([lam[r] for r in sf.ineq_rows])
    cones = []
    for sl in sf.cone.slices:
        cones.append(lam[sl].copy())
    duals["cones"] = cones
    return duals


def _solve_equality_qp(problem, sf, tol):
    """No inequalities at all: a single saddle-point solve."""
    n = sf.n
    kkt = KktSystem(n, sf.A.shape[0])
    H = sf.P.tocsc() if sf.P is not None else sp.csc_matrix((n, n))
    kkt.set_matrix(H, sf.A)
    z = kkt.solve(np.concatenate([-sf.c, sf.b]), refine=2)
    x, y = z[:n], z[n:]
    rx = (sf.P @ x if sf.P is not None else 0.0) + sf.c + sf.A.T @ y
    ry = sf.A @ x - sf.b
    pcost = problem.objective(x)
    metrics = (np.linalg.norm(ry) / max(1.0, np.linalg.norm(sf.b)),
               np.linalg.norm(rx) / max(1.0, np.linalg.norm(sf.c)), 0.0)
    status = "optimal" if max(metrics[:2]) <= max(tol, 1e-7) else "max_iter"
    return Solution(x=x, duals={"eq": y, "lb": {}, "ub": {}, "ineq": np.zeros(0),
                                "cones": []},
                    status=status, kkt_residuals=metrics, objective=pcost,
                    dual_objective=pcost, iterations=1,
                    info={"backend": kkt.backend_name})


def _classify_failure(problem, sf, metrics, pcost, tol, backend):
    """Distinguish stalled-but-feasible from infeasible (Phase-I elastic
    solve) or unbounded (recession-ray search)."""
    pres = metrics[0]
    if pres <= np.sqrt(tol) or sf.A.shape[0] == 0:
        if _has_descent_ray(problem, sf, tol, backend):
            return "unbounded"
        if pres <= np.sqrt(tol):
            return "max_iter"
    if sf.A.shape[0] == 0:
        return "max_iter"
    n = sf.n
    m_eq = sf.A.shape[0]
    # min 1'(u+ + u-)  s.t.  A z + u+ - u- = b, original bounds/cones on z
    c1 = np.concatenate([np.zeros(n), np.ones(2 * m_eq)])
    A1 = sp.hstack([sf.A, sp.identity(m_eq), -sp.identity(m_eq)], format="csr")
    lb = np.full(n + 2 * m_eq, -np.inf)
    ub = np.full(n + 2 * m_eq, np.inf)
    lb[n:] = 0.0
    if problem.lb is not None:
        lb[:n] = problem.lb
    if problem.ub is not None:
        ub[:n] = problem.ub
    g1 = h1 = None
    if problem.G_ineq is not None:
        g1 = sp.hstack([problem.G_ineq,
                        sp.csr_matrix((problem.G_ineq.shape[0], 2 * m_eq))])
        h1 = problem.h_ineq
    p1 = ConicProblem(n=n + 2 * m_eq, c=c1, A_eq=A1, b_eq=sf.b, lb=lb, ub=ub,
                      G_ineq=g1, h_ineq=h1, cones=problem.cones)
    sol = solve(p1, tol=max(tol, 1e-9), max_iter=100, backend=backend,
                _phase1=False)
    scale = max(1.0, float(np.linalg.norm(sf.b)))
    if sol.status in ("optimal", "max_iter") and sol.objective > 1e-6 * scale:
        return "infeasible"
    return "max_iter"


def _has_descent_ray(problem, sf, tol, backend):
    """Certify unboundedness: a recession direction with negative cost.

    Solves  min c'd  s.t.  A_eq d = 0, d in the recession cone of the bounds
    and cones, -1 <= d <= 1.  A strictly negative optimum is a ray.
    """
    if problem.P is not None and problem.P.nnz > 0:
        return False  # curved objective: rays cannot certify here
    n = sf.n
    lb = np.full(n, -1.0)
    ub = np.full(n, 1.0)
    if problem.lb is not None:
        lb[np.isfinite(problem.lb)] = 0.0
    if problem.ub is not None:
        ub[np.isfinite(problem.ub)] = 0.0
    g1 = h1 = None
    if problem.G_ineq is not None:
        g1 = problem.G_ineq
        h1 = np.zeros(problem.G_ineq.shape[0])
    A1 = sf.A if sf.A.shape[0] else None
    b1 = np.zeros(sf.A.shape[0]) if sf.A.shape[0] else None
    ray = ConicProblem(n=n, c=sf.c, A_eq=A1, b_eq=b1, lb=lb, ub=ub,
                       G_ineq=g1, h_ineq=h1, cones=problem.cones)
    sol = solve(ray, tol=max(tol, 1e-9), max_iter=100, backend=backend,
                _phase1=False)
    return sol.status == "optimal" and sol.objective < -1e-7 * max(1.0, np.linalg.norm(sf.c))
