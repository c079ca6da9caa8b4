"""Two-step robust state estimation.

Step 1 estimates the linear basis vector together with a sparse bad-data
vector by one of four convex programs: an l1 program with the exact-fit
equality (for the noise-free regime), the mixed quadratic + l1 objective (for
dense noise), and both again under the per-branch second-order-cone
constraints that the lifted physical states satisfy.  Thresholding the
recovered bad-data vector gives the detected support; the estimation is then
re-run on the sanitized rows (plain least squares by default).

Step 2 turns the basis estimate into voltages: magnitudes from the square
roots of the mg components, angles by spreading the per-branch phase
differences atan2(im, re) through a least-squares (or robust mixed-objective)
solve on the signed incidence matrix, with the reference bus pinned to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .sensing import SensingModel
from .solver import ConicProblem, solve as conic_solve

__all__ = [
    "Step1Config", "EstimationResult", "step1", "huber_objective",
    "clean_and_resolve", "step2_phase", "reconstruct", "step2_error_bound",
    "run_pipeline",
]

VARIANTS = ("l1", "l1_soc", "l2l1", "l2l1_soc")


@dataclass
class Step1Config:
    variant: str = "l2l1_soc"
    lambda_: Optional[float] = None      # default 3e-4 / n_m at solve time
    bdd_threshold: float = 0.01
    resolve_after_cleaning: bool = True
    resolve_variant: str = "ls"          # "ls" or "robust" (b pinned to 0)
    solver_tol: float = 1e-8
    solver_max_iter: int = 200

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown step-1 variant {self.variant!r}")
        if self.bdd_threshold <= 0:
            raise ValueError("bdd_threshold must be positive")

    def effective_lambda(self, n_m):
        return self.lambda_ if self.lambda_ is not None else 3e-4 / n_m


@dataclass
class EstimationResult:
    x_hat: np.ndarray
    b_hat: np.ndarray
    detected_support: set
    vm_hat: Optional[np.ndarray] = None
    va_hat: Optional[np.ndarray] = None
    v_hat: Optional[np.ndarray] = None
    solver_status: str = ""
    objective: float = np.nan
    unobservable: list = field(default_factory=list)
    clamped_mg: int = 0
    excluded_branches: list = field(default_factory=list)
    info: dict = field(default_factory=dict)


_SQ2 = np.sqrt(0.5)


def _soc_equalities(cone_cols, n0):
    """Auxiliary encoding of the branch cones.

    The physical cone  (mg_i + mg_j)/sqrt2 >= ||(mg_i/sqrt2, mg_j/sqrt2,
    re, im)||  has a linear combination in the scalar slot, so three helper
    variables (t, u1, u2) per branch tie it to coordinate cone memberships:

        t = (mg_i + mg_j)/sqrt2,  u1 = mg_i/sqrt2,  u2 = mg_j/sqrt2,
        cone = (t, u1, u2, re, im).

    Returns (rows, cols, vals, b, cones, n_aux) with aux columns starting at
    n0 and equality rows starting at 0 (caller offsets them).
    """
    rows, cols, vals, b, cones = [], [], [], [], []
    r = 0
    pos = n0
    for (mi, mj, re, im) in cone_cols:
        t, u1, u2 = pos, pos + 1, pos + 2
        pos += 3
        rows += [r, r, r]
        cols += [t, mi, mj]
        vals += [1.0, -_SQ2, -_SQ2]
        b.append(0.0)
        rows += [r + 1, r + 1]
        cols += [u1, mi]
        vals += [1.0, -_SQ2]
        b.append(0.0)
        rows += [r + 2, r + 2]
        cols += [u2, mj]
        vals += [1.0, -_SQ2]
        b.append(0.0)
        r += 3
        cones.append([t, u1, u2, re, im])
    return rows, cols, vals, b, cones, pos - n0


def _with_soc(A_eq, b_eq, c, lb, P, cone_cols):
    """Extend a program with the cone auxiliaries."""
    n0 = A_eq.shape[1]
    rows, cols, vals, b2, cones, n_aux = _soc_equalities(cone_cols, n0)
    if n_aux == 0:
        return A_eq, b_eq, c, lb, P, cones
    aux_eq = sp.csr_matrix((vals, (rows, cols)), shape=(len(b2), n0 + n_aux))
    A_ext = sp.vstack([sp.hstack([A_eq, sp.csr_matrix((A_eq.shape[0], n_aux))]),
                       aux_eq], format="csr")
    b_ext = np.concatenate([b_eq, b2])
    c_ext = np.concatenate([c, np.zeros(n_aux)])
    lb_ext = np.concatenate([lb, np.full(n_aux, -np.inf)])
    P_ext = None
    if P is not None:
        P_ext = sp.block_diag([P, sp.csr_matrix((n_aux, n_aux))], format="csr")
    return A_ext, b_ext, c_ext, lb_ext, P_ext, cones


def step1(model, y, cfg):
    """Solve the selected step-1 program; returns (x_hat, b_hat, Solution)."""
    y = np.asarray(y, dtype=float)
    n_m, n_x = model.n_m, model.n_x
    if y.shape != (n_m,):
        raise ValueError("measurement vector has wrong length")
    A = model.A
    cone_cols = model.cone_index_lists() if cfg.variant.endswith("_soc") else []

    if cfg.variant.startswith("l1"):
        # variables [x, b+, b-]; min 1'(b+ + b-) s.t. A x + b+ - b- = y
        c = np.concatenate([np.zeros(n_x), np.ones(2 * n_m)])
        A_eq = sp.hstack([A, sp.identity(n_m), -sp.identity(n_m)],
                         format="csr")
        lb = np.concatenate([np.full(n_x, -np.inf), np.zeros(2 * n_m)])
        P = None
    else:
        # variables [x, b+, b-, r]; min r'r/(2 n_m) + lam 1'(b+ + b-)
        # s.t. A x + b+ - b- + r = y
        lam = cfg.effective_lambda(n_m)
        c = np.concatenate([np.zeros(n_x), np.full(2 * n_m, lam),
                            np.zeros(n_m)])
        P = sp.diags(np.concatenate([np.zeros(n_x + 2 * n_m),
                                     np.full(n_m, 1.0 / n_m)]), format="csr")
        A_eq = sp.hstack([A, sp.identity(n_m), -sp.identity(n_m),
                          sp.identity(n_m)], format="csr")
        lb = np.concatenate([np.full(n_x, -np.inf), np.zeros(2 * n_m),
                             np.full(n_m, -np.inf)])
    A_eq, b_eq, c, lb, P, cones = _with_soc(A_eq, y, c, lb, P, cone_cols)
    prob = ConicProblem(n=A_eq.shape[1], c=c, P=P, A_eq=A_eq, b_eq=b_eq,
                        lb=lb, cones=cones)
    sol = conic_solve(prob, tol=cfg.solver_tol, max_iter=cfg.solver_max_iter)
    x_hat = sol.x[:n_x]
    b_hat = sol.x[n_x:n_x + n_m] - sol.x[n_x + n_m:n_x + 2 * n_m]
    if sol.status not in ("optimal", "max_iter"):
        raise RuntimeError(f"step-1 solve failed: {sol.status}")
    return x_hat, b_hat, sol


def huber_objective(model, y, x, psi):
    """(1/n_m) sum of the Huber losses of the residuals y - A x."""
    if psi <= 0:
        raise ValueError("psi must be positive")
    r = np.abs(np.asarray(y) - model.A @ np.asarray(x))
    quad = 0.5 * r ** 2
    lin = psi * (r - 0.5 * psi)
    return float(np.where(r <= psi, quad, lin).sum()) / model.n_m


def step1_objective(model, y, x_hat, b_hat, cfg):
    """Objective value of the selected step-1 program at (x_hat, b_hat)."""
    if cfg.variant.startswith("l1"):
        return float(np.abs(b_hat).sum())
    lam = cfg.effective_lambda(model.n_m)
    r = y - model.A @ x_hat - b_hat
    return float(r @ r) / (2.0 * model.n_m) + lam * float(np.abs(b_hat).sum())


def detected_support(b_hat, threshold):
    """Rows whose recovered bad-data entry is strictly above the threshold."""
    return {int(i) for i in np.flatnonzero(np.abs(b_hat) > threshold)}


def clean_and_resolve(model, y, detected, cfg=None):
    """Drop the detected rows and re-estimate x on the remaining ones.

    Plain least squares by default (cfg.resolve_variant == "ls").  Columns
    that lose all support are dropped and reported as unobservable; remaining
    rank deficiency is resolved by the minimum-norm solution and reported.
    Returns (x_hat, unobservable_columns).
    """
    keep = np.array(sorted(set(range(model.n_m)) - set(detected)), dtype=int)
    A = model.A[keep]
    y_keep = np.asarray(y)[keep]
    support = np.asarray((A != 0).sum(axis=0)).ravel()
    dead = np.flatnonzero(support == 0)
    live = np.flatnonzero(support > 0)
    unobservable = [int(j) for j in dead]
    x_hat = np.zeros(model.n_x)
    if live.size == 0:
        return x_hat, unobservable

    A_live = A[:, live]
    robust = (cfg is not None and cfg.resolve_variant == "robust"
              and cfg.variant.endswith("_soc"))
    if robust:
        # same program with b pinned to 0: cone-constrained least squares on
        # the surviving rows (cones whose columns all survive are kept)
        col_map = {int(j): k for k, j in enumerate(live)}
        cone_cols = [tuple(col_map[j] for j in cone)
                     for cone in model.cone_index_lists()
                     if all(j in col_map for j in cone)]
        n_live, m_keep = live.size, keep.size
        Pd = sp.diags(np.concatenate([np.zeros(n_live), np.ones(m_keep)]),
                      format="csr")
        A_eq = sp.hstack([A_live, sp.identity(m_keep)], format="csr")
        c0 = np.zeros(n_live + m_keep)
        lb0 = np.full(n_live + m_keep, -np.inf)
        A_eq, b_eq, c0, lb0, Pd, cones = _with_soc(A_eq, y_keep, c0, lb0, Pd,
                                                   cone_cols)
        prob = ConicProblem(n=A_eq.shape[1], c=c0, P=Pd, A_eq=A_eq,
                            b_eq=b_eq, lb=lb0, cones=cones)
        sol = conic_solve(prob)
        xs = sol.x[:n_live]
    else:
        xs, rank = _least_squares_with_rank(A_live, y_keep)
        if rank < live.size:
            null_cols = _deficient_columns(A_live)
            unobservable.extend(int(live[j]) for j in null_cols)
    x_hat[live] = xs
    return x_hat, sorted(set(unobservable))


def _least_squares_with_rank(A, y):
    AtA = (A.T @ A).toarray()
    Aty = A.T @ y
    n = AtA.shape[0]
    eig_min = np.linalg.eigvalsh(AtA)[0] if n else 1.0
    if eig_min > 1e-10:
        return np.linalg.solve(AtA, Aty), n
    x, _, rank, _ = np.linalg.lstsq(A.toarray(), y, rcond=None)
    return x, rank


def _deficient_columns(A):
    """Columns involved in the null space of A (rank-revealing SVD)."""
    _, s, vt = np.linalg.svd(A.toarray(), full_matrices=True)
    tolr = max(A.shape) * np.finfo(float).eps * (s[0] if s.size else 1.0)
    null = vt[np.sum(s > tolr):]
    return np.flatnonzero(np.abs(null).max(axis=0) > 1e-8) if null.size else []


def branch_angle_diffs(model, x_hat, zero_tol=1e-12):
    """Per-basis-branch phase differences atan2(im, re); branches whose pair
    is numerically zero are excluded and reported."""
    diffs, branches, excluded = [], [], []
    for l in model.basis_branches():
        re = x_hat[model.re_col[l]]
        im = x_hat[model.im_col[l]]
        if abs(re) < zero_tol and abs(im) < zero_tol:
            excluded.append(l)
            continue
        branches.append(l)
        diffs.append(np.arctan2(im, re))
    return branches, np.asarray(diffs), excluded


def _incidence(grid, branches, n_b):
    rows, cols, vals = [], [], []
    for r, l in enumerate(branches):
        br = grid.branches[l]
        rows += [r, r]
        cols += [br.from_bus, br.to_bus]
        vals += [1.0, -1.0]
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(branches), n_b))


def step2_phase(grid, model, x_hat, variant="ls_closed_form", lambda2=0.1,
                zero_tol=1e-12):
    """Recover bus angles from the basis estimate.

    Returns (va_hat, excluded_branches).  The reference bus is pinned to 0;
    any component of the live-branch graph not containing the reference gets
    its own zero pin (those buses are gauge-unobservable).
    """
    branches, diffs, excluded = branch_angle_diffs(model, x_hat, zero_tol)
    n_b = grid.n_buses
    L = _incidence(grid, branches, n_b)

    # connected components of the live-difference graph
    comp = np.full(n_b, -1, dtype=int)
    n_comp = 0
    adj = [[] for _ in range(n_b)]
    for l in branches:
        br = grid.branches[l]
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    for start in range(n_b):
        if comp[start] >= 0:
            continue
        stack = [start]
        comp[start] = n_comp
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if comp[v] < 0:
                    comp[v] = n_comp
                    stack.append(v)
        n_comp += 1
    pins = []
    for cidx in range(n_comp):
        members = np.flatnonzero(comp == cidx)
        pins.append(grid.ref_bus if comp[grid.ref_bus] == cidx else int(members[0]))
    free = np.array([k for k in range(n_b) if k not in set(pins)], dtype=int)

    Lf = L[:, free]
    if variant == "ls_closed_form":
        theta_free = _normal_equations(Lf, diffs)
    elif variant == "l2l1":
        theta_free = _phase_l2l1(Lf, diffs, lambda2)
    else:
        raise ValueError(f"unknown step-2 variant {variant!r}")
    va = np.zeros(n_b)
    va[free] = theta_free
    return va, excluded


def _normal_equations(L, d):
    if L.shape[1] == 0:
        return np.zeros(0)
    LtL = (L.T @ L).tocsc()
    return spla.splu(LtL).solve(L.T @ d)


def _phase_l2l1(L, d, lambda2):
    """min (1/n_l)||L t - d||^2 + lambda2 ||L t - d||_1 via the conic solver."""
    n_l, n_t = L.shape
    if n_t == 0:
        return np.zeros(0)
    # variables [t, u+, u-] with L t - u+ + u- = d; the quadratic term is
    # (u+ - u-)^2, which needs the cross blocks
    n = n_t + 2 * n_l
    scale = 1.0 / n_l
    cross = sp.bmat([[sp.csr_matrix((n_t, n_t)), None, None],
                     [None, sp.diags(np.full(n_l, 2.0 * scale)),
                      sp.diags(np.full(n_l, -2.0 * scale))],
                     [None, sp.diags(np.full(n_l, -2.0 * scale)),
                      sp.diags(np.full(n_l, 2.0 * scale))]], format="csr")
    c = np.concatenate([np.zeros(n_t), np.full(2 * n_l, lambda2)])
    A_eq = sp.hstack([L, -sp.identity(n_l), sp.identity(n_l)], format="csr")
    lb = np.concatenate([np.full(n_t, -np.inf), np.zeros(2 * n_l)])
    prob = ConicProblem(n=n, c=c, P=cross, A_eq=A_eq, b_eq=np.asarray(d), lb=lb)
    sol = conic_solve(prob)
    return sol.x[:n_t]


def reconstruct(x_hat, model, va_hat):
    """Magnitudes sqrt(mg) (negatives clamped to 0) and complex voltages."""
    n_b = model.grid.n_buses
    mg = np.asarray(x_hat[:n_b], dtype=float)
    clamped = int(np.sum(mg < 0.0))
    vm = np.sqrt(np.maximum(mg, 0.0))
    v = vm * np.exp(1j * np.asarray(va_hat))
    return vm, v, clamped


def step2_error_bound(grid, model, x_true, x_hat):
    """Per-bus bound on the closed-form angle error.

    Uses the per-branch phase-difference error surrogate
       e_l = (re dim - im dre) / (re re_hat)
    with (dre, dim) = (re_hat - re, im_hat - im), propagated through the
    least-squares solve: bound = |(L'L)^-1 L'| |e| componentwise.  Branches
    with a vanishing re component are excluded and the bound marked partial.
    """
    branches, e, partial = [], [], []
    for l in model.basis_branches():
        re_t = x_true[model.re_col[l]]
        im_t = x_true[model.im_col[l]]
        re_h = x_hat[model.re_col[l]]
        im_h = x_hat[model.im_col[l]]
        if abs(re_t) < 1e-12 or abs(re_h) < 1e-12:
            partial.append(l)
            continue
        branches.append(l)
        e.append((re_t * (im_h - im_t) - im_t * (re_h - re_t)) / (re_t * re_h))
    e = np.asarray(e)
    n_b = grid.n_buses
    L = _incidence(grid, branches, n_b)
    free = np.array([k for k in range(n_b) if k != grid.ref_bus], dtype=int)
    Lf = L[:, free].toarray()
    M = np.linalg.solve(Lf.T @ Lf, Lf.T)
    bound = np.zeros(n_b)
    bound[free] = np.abs(M) @ np.abs(e)
    return bound, partial


def run_pipeline(model, y, cfg, step2_variant="ls_closed_form", lambda2=0.1):
    """step1 -> threshold -> clean_and_resolve -> step2 -> reconstruct."""
    x1, b_hat, sol = step1(model, y, cfg)
    detected = detected_support(b_hat, cfg.bdd_threshold)
    unobservable = []
    if cfg.resolve_after_cleaning:
        x_hat, unobservable = clean_and_resolve(model, y, detected, cfg)
    else:
        x_hat = x1
    va, excluded = step2_phase(model.grid, model, x_hat, variant=step2_variant,
                               lambda2=lambda2)
    vm, v, clamped = reconstruct(x_hat, model, va)
    return EstimationResult(
        x_hat=x_hat, b_hat=b_hat, detected_support=detected,
        vm_hat=vm, va_hat=va, v_hat=v, solver_status=sol.status,
        objective=step1_objective(model, y, x1, b_hat, cfg),
        unobservable=unobservable, clamped_mg=clamped,
        excluded_branches=excluded,
        info={"iterations": sol.iterations, "step1_x": x1},
    )
