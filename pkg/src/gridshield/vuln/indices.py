"""Line vulnerability indices, incoherence and eigenvalue certificates.

Per line and direction, the index is the minimax

    alpha = max over sign vectors xi of  min ||h||_inf
            s.t.  A_ok' h + A_def' xi (+ cone terms) = 0

over the local one-bus boundary partition (defending rows A_ok depend only on
the boundary variables; defective rows A_def are the flows on the attacked
line and the injections at the inner node).  Methods: explicit enumeration of
the sign vectors (with the xi -> -xi symmetry halving, valid only without
cone terms), or the complementarity reformulation through
:func:`gridshield.solver.solve_lcp` (methods "lcp"/"mip").

alpha >= 1 means a single-bus attack at the line's tail can push estimation
error through its head; alpha = +inf marks an inner equality that is not
satisfiable for some sign vector (no finite defense certificate exists).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..sensing import build_sensing_model
from ..solver import LcpSystem, inner_lp_value, solve_lcp_auto

__all__ = ["LocalBoundary", "LineVIResult", "local_boundary", "line_vi",
           "line_vi_lp", "line_vi_socp", "mutual_incoherence",
           "local_incoherence", "lower_eigenvalue", "vi_model",
           "cone_term_columns"]

_FEAS_TOL = 1e-8
ENUM_CAP = 12


@dataclass
class LocalBoundary:
    branch: int
    direction: str            # "fwd": attack at from-end; "rev": at to-end
    bus_attacked: int
    bus_inner: int
    outer: tuple
    x_cols: tuple             # boundary variable columns
    m_ok: tuple               # defending rows
    m_def: tuple              # defective rows
    lines_bd: tuple           # attacked line + inner-outer lines


@dataclass
class LineVIResult:
    branch: int
    direction: str
    alpha_lp: float
    alpha_socp: Optional[float] = None
    method: str = "enumeration"
    xi_star: Optional[np.ndarray] = None
    certificate_gap: float = np.nan   # local incoherence minus alpha
    flags: tuple = ()

    @property
    def alpha(self):
        return self.alpha_lp if self.alpha_socp is None else self.alpha_socp


def vi_model(grid, profile):
    """Unit-row-normalized sensing model used by every vulnerability
    computation (cached on the grid object)."""
    cache = getattr(grid, "_vi_models", None)
    if cache is None:
        cache = {}
        grid._vi_models = cache
    key = id(profile)
    if key not in cache:
        cache[key] = build_sensing_model(grid, profile, row_norm_mode="vi")
    return cache[key]


def local_boundary(model, branch, direction):
    """One-bus boundary partition for a line and direction (vi-mode model)."""
    if model.row_norm_mode != "vi":
        raise ValueError("local_boundary expects a vi-normalized model")
    grid = model.grid
    br = grid.branches[branch]
    if direction == "fwd":
        bus_i, bus_j = br.from_bus, br.to_bus
    elif direction == "rev":
        bus_i, bus_j = br.to_bus, br.from_bus
    else:
        raise ValueError("direction must be 'fwd' or 'rev'")

    outer = tuple(sorted(set(grid.neighbors(bus_j)) - {bus_i}))
    x_cols = [int(model.mg_col[bus_j])]
    x_cols += [int(model.mg_col[o]) for o in outer]
    lines_bd = [branch]
    for o in outer:
        l = grid.branch_between(bus_j, o)
        lines_bd.append(l)
        if model.re_col[l] >= 0:
            x_cols += [int(model.re_col[l]), int(model.im_col[l])]
    x_set = set(x_cols)

    m_def = []
    for i, m in enumerate(model.rows):
        if m.kind in ("pflow", "qflow") and m.obj == branch:
            m_def.append(i)
        elif m.kind in ("pinj", "qinj") and m.obj == bus_j:
            m_def.append(i)
    def_set = set(m_def)

    A = model.A
    m_ok = []
    indptr, indices = A.indptr, A.indices
    for i in range(model.n_m):
        if i in def_set:
            continue
        sup = indices[indptr[i]:indptr[i + 1]]
        if len(sup) and set(int(c) for c in sup) <= x_set:
            m_ok.append(i)
    return LocalBoundary(branch=branch, direction=direction,
                         bus_attacked=bus_i, bus_inner=bus_j, outer=outer,
                         x_cols=tuple(x_cols), m_ok=tuple(m_ok),
                         m_def=tuple(m_def), lines_bd=tuple(lines_bd))


def _submatrices(model, lb):
    A = model.A
    cols = list(lb.x_cols)
    C = A[list(lb.m_ok)][:, cols].toarray().T if lb.m_ok else \
        np.zeros((len(cols), 0))
    E = A[list(lb.m_def)][:, cols].toarray().T if lb.m_def else \
        np.zeros((len(cols), 0))
    return C, E


def cone_term_columns(model, lb, x_lifted):
    """Columns T_l x (restricted to the boundary variables) for each boundary
    line, entering the cone-constrained index with multipliers w >= 0."""
    grid = model.grid
    colpos = {c: k for k, c in enumerate(lb.x_cols)}
    cols = []
    for l in lb.lines_bd:
        if model.re_col[l] < 0:
            continue
        br = grid.branches[l]
        mi, mj = int(model.mg_col[br.from_bus]), int(model.mg_col[br.to_bus])
        re, im = int(model.re_col[l]), int(model.im_col[l])
        ctx = (x_lifted[mi] + x_lifted[mj]) / 2.0
        full = {mi: ctx - 0.5 * x_lifted[mi],
                mj: ctx - 0.5 * x_lifted[mj],
                re: -x_lifted[re], im: -x_lifted[im]}
        vec = np.zeros(len(lb.x_cols))
        for c, v in full.items():
            if c in colpos:
                vec[colpos[c]] = v
        cols.append(vec)
    if not cols:
        return None
    return np.column_stack(cols)


def _infeasible_for_some_xi(C, E):
    """True when some sign vector makes the inner equality inconsistent,
    i.e. some column of E leaves the range of C."""
    if E.shape[1] == 0:
        return False, None
    if C.shape[1] == 0:
        Z = np.zeros((0, E.shape[1]))
        resid = E.copy()
    else:
        Z, _, _, _ = np.linalg.lstsq(C, E, rcond=None)
        resid = E - C @ Z
    bad = np.linalg.norm(resid, axis=0) > _FEAS_TOL * (1.0 + np.linalg.norm(E, axis=0))
    return bool(bad.any()), Z


def _alpha_bound(Z):
    """max_xi ||Z xi||_inf: a certified upper bound on alpha."""
    if Z is None or Z.size == 0:
        return 0.0
    return float(np.abs(Z).sum(axis=1).max())


def _enumerate_alpha(system, symmetric):
    nd = system.E.shape[1]
    if nd == 0:
        return 0.0, np.zeros(0)
    best, best_xi = -np.inf, None
    free = nd - 1 if symmetric else nd
    lead = (1.0,) if symmetric else ()
    for signs in itertools.product((-1.0, 1.0), repeat=free):
        xi = np.array(lead + signs)
        val, _ = inner_lp_value(system, xi)
        if val > best:
            best, best_xi = val, xi
    return best, best_xi


def line_vi(model, branch, direction, variant="lp", x_lifted=None,
            method="auto", enum_cap=ENUM_CAP, tol=1e-8):
    """Vulnerability index of one line and direction.

    variant "lp" ignores the cone terms; "socp" requires a lifted primal
    feasible state ``x_lifted``.  method "auto" enumerates up to ``enum_cap``
    defective rows and falls back to the complementarity solver beyond that.
    """
    lb = local_boundary(model, branch, direction)
    C, E = _submatrices(model, lb)
    W = None
    if variant == "socp":
        if x_lifted is None:
            raise ValueError("socp variant needs a lifted state")
        W = cone_term_columns(model, lb, x_lifted)
    elif variant != "lp":
        raise ValueError("variant must be 'lp' or 'socp'")

    nd = E.shape[1]
    if nd == 0:
        return LineVIResult(branch=branch, direction=direction,
                            alpha_lp=0.0 if variant == "lp" else np.nan,
                            alpha_socp=0.0 if variant == "socp" else None,
                            method="enumeration", xi_star=np.zeros(0),
                            certificate_gap=np.nan)

    infeasible, Z = _infeasible_for_some_xi(C, E)
    if infeasible:
        alpha = np.inf
        res = LineVIResult(branch=branch, direction=direction,
                           alpha_lp=alpha if variant == "lp" else np.nan,
                           alpha_socp=alpha if variant == "socp" else None,
                           method="infeasibility", xi_star=None,
                           certificate_gap=np.nan,
                           flags=("inner_infeasible",))
        return res

    cap = _alpha_bound(Z)
    system = LcpSystem(C=C, E=E, W=W, alpha_cap=cap)
    if method == "auto":
        method = "enumeration" if nd <= enum_cap else "lcp"
    if method == "enumeration":
        alpha, xi = _enumerate_alpha(system, symmetric=(W is None))
    elif method in ("lcp", "mip"):
        sol = solve_lcp_auto(system, method=method, tol=tol)
        alpha, xi = sol.info["alpha"], sol.info["xi"]
    else:
        raise ValueError(f"unknown method {method!r}")

    return LineVIResult(
        branch=branch, direction=direction,
        alpha_lp=alpha if variant == "lp" else np.nan,
        alpha_socp=alpha if variant == "socp" else None,
        method=method, xi_star=xi, certificate_gap=cap - alpha)


def line_vi_lp(model, branch, direction, method="auto", enum_cap=ENUM_CAP):
    return line_vi(model, branch, direction, "lp", method=method,
                   enum_cap=enum_cap)


def line_vi_socp(model, branch, direction, x_lifted, method="auto",
                 enum_cap=ENUM_CAP):
    return line_vi(model, branch, direction, "socp", x_lifted=x_lifted,
                   method=method, enum_cap=enum_cap)


def mutual_incoherence(model, j_rows):
    """Global mutual incoherence of a corrupted row set J: the induced
    infinity norm (maximum absolute row sum) of pinv(A_Jc)' A_J'.

    The row-sum norm is what makes rho an upper bound on the vulnerability
    index: it equals max over sign vectors xi of ||pinv(A_Jc)' A_J' xi||_inf.
    """
    j_rows = sorted(set(int(i) for i in j_rows))
    keep = sorted(set(range(model.n_m)) - set(j_rows))
    A = model.A
    A_clean = A[keep].toarray()
    A_bad = A[j_rows].toarray()
    return _incoherence_of(A_clean, A_bad)


def _incoherence_of(A_clean, A_bad):
    gram = A_clean.T @ A_clean
    eig = np.linalg.eigvalsh(gram)[0] if gram.size else 0.0
    if eig <= 1e-12:
        deficient = _null_columns(A_clean)
        raise ValueError(f"clean rows are column-rank deficient "
                         f"(columns {deficient})")
    # pinv(A_clean)' A_bad' = A_clean (A_clean' A_clean)^-1 A_bad'
    Z = A_clean @ np.linalg.solve(gram, A_bad.T)
    if Z.size == 0:
        return 0.0
    return float(np.abs(Z).sum(axis=1).max())


def _null_columns(A):
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    rank = int(np.sum(s > max(A.shape) * np.finfo(float).eps * (s[0] if s.size else 1.0)))
    null = vt[rank:]
    return [int(j) for j in np.flatnonzero(np.abs(null).max(axis=0) > 1e-8)] \
        if null.size else []


def local_incoherence(model, branch, direction):
    """Per-line incoherence rho(M_def) over the local boundary partition."""
    lb = local_boundary(model, branch, direction)
    C, E = _submatrices(model, lb)
    return _incoherence_of(C.T, E.T)


def lower_eigenvalue(model, partition):
    """C_min: smallest of the three identifiability eigenvalues."""
    A = model.A
    m_bd = sorted(partition.m_bd)
    m_bi = sorted(partition.m_bi)
    m_bo = sorted(partition.m_bo)
    m_sf = sorted(partition.m_sf)
    x_bd = sorted(partition.x_bd)
    x_sf = sorted(partition.x_sf)

    A_bd = A[m_bd][:, x_bd].toarray()
    pos_in_bd = {r: k for k, r in enumerate(m_bd)}
    I_bi = np.zeros((len(m_bd), len(m_bi)))
    for c, r in enumerate(m_bi):
        I_bi[pos_in_bd[r], c] = 1.0
    Q = np.hstack([A_bd, I_bi])

    vals = [_eig_min(Q)]
    vals.append(_eig_min(A[m_bo][:, x_bd].toarray()))
    vals.append(_eig_min(A[m_sf][:, x_sf].toarray()))
    return float(min(vals))


def _eig_min(M):
    if M.shape[1] == 0:
        return np.inf
    if M.shape[0] == 0:
        return 0.0
    return float(np.linalg.eigvalsh(M.T @ M)[0])
