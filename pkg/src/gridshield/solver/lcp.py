"""Complementarity reformulation of the minimax vulnerability program.

The inner minimization of the index (min ||h||_inf s.t. C h + E xi = 0, plus
optional  W w  columns with w >= 0 for the cone-constrained variant) is
replaced by its KKT system, so the minimax collapses into one maximization:

    max  alpha
    s.t. -1 <= xi <= 1
         C h + E xi (+ W w) = 0
         q+ = alpha 1 - h >= 0,    q- = alpha 1 + h >= 0
         1'mu+ + 1'mu- = 1
         C' lam + mu+ - mu- = 0,   mu+, mu- >= 0
         (eta = W' lam >= 0, w >= 0)
         mu+ o q+ = mu- o q- = 0   (and w o eta = 0).

Two exact routes resolve the bilinear complementarity rows, both driven by
a depth-first branch and bound over the sign box of xi with LP relaxations
from the internal interior-point method:

* ``mip`` -- node LPs carry the big-M binary encoding (mu <= z and
  q <= M (1 - z) with z relaxed into [0, 1]); once the sign box is fully
  pinned the complementarity pattern is certified through the binaries.
* ``lcp`` -- node LPs drop the complementarity products outright (the plain
  LCP relaxation, no binaries).

Branching the sign box rather than the complementarity pairs keeps the tree
at 2^(n_def+1) nodes; pair-wise branching degenerates badly on grid
boundaries, whose defending rows come in nearly-mirrored pairs.

Node relaxations carry two families of valid cuts.  Stationarity plus the
multiplier normalization imply ||C'lam||_1 <= 1 at every feasible point, so
each (E'lam)_k is bounded by rho_k = min{||z||_inf : C z = E_k} (one inner LP
per defective column).  At complementary points strong duality of the inner
LP gives alpha = xi'E'lam, which enters the relaxation through McCormick
envelopes of the products xi_k (E'lam)_k.  Every node also rounds the relaxed
xi to a sign vector and solves the inner LP, producing valid incumbents.

The big-M choice is certified at incumbent solutions: if a multiplier sits
within 1e-6*M of its cap, :class:`BigMTooSmall` is raised so the caller can
retry with 10x M.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .ipm import solve as ipm_solve
from .problem import ConicProblem, Solution

__all__ = ["LcpSystem", "solve_lcp", "solve_lcp_auto", "BigMTooSmall",
           "default_big_m", "inner_lp_value"]

_PRUNE_TOL = 5e-8
_COMP_TOL = 1e-7


class BigMTooSmall(RuntimeError):
    """The big-M cap was active at the optimum; retry with a larger M."""


@dataclass
class LcpSystem:
    """Data of one vulnerability program.

    C: |X| x n_ok   transposed defending rows (A_ok' over boundary columns)
    E: |X| x n_def  transposed defective rows
    W: |X| x n_w    optional columns multiplied by w >= 0 (cone terms)
    alpha_cap: certified upper bound on alpha (e.g. the local mutual
        incoherence); tightens the relaxation but is not required.
    """
    C: np.ndarray
    E: np.ndarray
    W: Optional[np.ndarray] = None
    alpha_cap: Optional[float] = None


def default_big_m(system):
    """10 * (1 + max absolute column sum of the boundary submatrices)."""
    colsum = 0.0
    for M in (system.C, system.E):
        if M is not None and M.size:
            colsum = max(colsum, float(np.abs(M).sum(axis=0).max()))
    return 10.0 * (1.0 + colsum)


def _inner_lp_problem(system):
    """min ||h||_inf s.t. C h + E xi (+ W w, w>=0) = 0; cached per system,
    only b_eq changes with xi."""
    prob = getattr(system, "_inner_prob", None)
    if prob is not None:
        return prob
    C = system.C
    nx, nk = C.shape
    nw = 0 if system.W is None else system.W.shape[1]
    # variables [h, alpha, w]
    n = nk + 1 + nw
    cols = [sp.csr_matrix(C), sp.csr_matrix((nx, 1))]
    if nw:
        cols.append(sp.csr_matrix(system.W))
    A_eq = sp.hstack(cols, format="csr")
    # |h_i| <= alpha  as general rows  h_i - alpha <= 0, -h_i - alpha <= 0
    I = sp.identity(nk, format="csr")
    ones = -np.ones((nk, 1))
    G = sp.vstack([sp.hstack([I, ones, sp.csr_matrix((nk, nw))]),
                   sp.hstack([-I, ones, sp.csr_matrix((nk, nw))])],
                  format="csr")
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb[nk] = 0.0
    if nw:
        lb[nk + 1:] = 0.0
    c = np.zeros(n)
    c[nk] = 1.0
    prob = ConicProblem(n=n, c=c, A_eq=A_eq, b_eq=np.zeros(nx), lb=lb, ub=ub,
                        G_ineq=G, h_ineq=np.zeros(2 * nk))
    system._inner_prob = prob
    return prob


def inner_lp_value(system, xi, tol=1e-9):
    """Inner minimization value for a fixed xi: (alpha, h), or (inf, None)
    when the equality system is inconsistent for this xi."""
    nk = system.C.shape[1]
    prob = _inner_lp_problem(system)
    prob.b_eq[:] = -(system.E @ xi)
    sol = ipm_solve(prob, tol=tol, max_iter=100)
    if sol.status not in ("optimal", "max_iter"):
        return np.inf, None
    return float(sol.x[nk]), sol.x[:nk].copy()


class _NodeBuilder:
    """One mutable LP relaxation shared by all branch-and-bound nodes; only
    box bounds change from node to node.  ``rho`` is the pair (lower, upper)
    of valid bounds on E'lam over the dual-feasible set."""

    def __init__(self, system, big_m, with_z, rho):
        C, E = system.C, system.E
        self.system = system
        self.big_m = big_m
        self.with_z = with_z
        self.nx, self.nk = C.shape
        self.nd = E.shape[1]
        self.nw = 0 if system.W is None else system.W.shape[1]
        self.rho_lo, self.rho_hi = rho
        gmax = np.maximum(np.abs(self.rho_lo), np.abs(self.rho_hi))
        cap = big_m
        if system.alpha_cap is not None:
            cap = min(cap, system.alpha_cap * (1.0 + 1e-9) + 1e-12)
        cap = min(cap, float(np.sum(gmax)) * (1.0 + 1e-9) + 1e-12)
        self.cap = cap
        self._gmax = gmax

        nk, nd, nx, nw = self.nk, self.nd, self.nx, self.nw
        nz = 2 * nk if with_z else 0
        off = {}
        pos = 0
        for name, width in (("xi", nd), ("h", nk), ("alpha", 1), ("lam", nx),
                            ("mup", nk), ("mum", nk), ("qp", nk), ("qm", nk),
                            ("g", nd), ("w", nw), ("eta", nw), ("z", nz)):
            off[name] = pos
            pos += width
        self.off = off
        self.n = pos

        rows, cols, vals, b = [], [], [], []
        r = 0

        def put(rr, cc, vv):
            rows.extend(np.atleast_1d(rr))
            cols.extend(np.atleast_1d(cc))
            vals.extend(np.atleast_1d(vv))

        def put_block(r0, c0, mat):
            coo = sp.coo_matrix(mat)
            put(coo.row + r0, coo.col + c0, coo.data)

        eye = np.arange(nk)
        # C h + E xi (+ W w) = 0
        put_block(r, off["h"], C)
        put_block(r, off["xi"], E)
        if nw:
            put_block(r, off["w"], system.W)
        b.extend(np.zeros(nx)); r += nx
        # q+ + h - alpha = 0 ; q- - h - alpha = 0
        put(r + eye, off["qp"] + eye, np.ones(nk))
        put(r + eye, off["h"] + eye, np.ones(nk))
        put(r + eye, np.full(nk, off["alpha"]), -np.ones(nk))
        b.extend(np.zeros(nk)); r += nk
        put(r + eye, off["qm"] + eye, np.ones(nk))
        put(r + eye, off["h"] + eye, -np.ones(nk))
        put(r + eye, np.full(nk, off["alpha"]), -np.ones(nk))
        b.extend(np.zeros(nk)); r += nk
        # 1'mu+ + 1'mu- = 1
        put(np.full(2 * nk, r), off["mup"] + np.arange(2 * nk), np.ones(2 * nk))
        b.append(1.0); r += 1
        # C'lam + mu+ - mu- = 0
        put_block(r, off["lam"], C.T)
        put(r + eye, off["mup"] + eye, np.ones(nk))
        put(r + eye, off["mum"] + eye, -np.ones(nk))
        b.extend(np.zeros(nk)); r += nk
        # alpha - 1'g = 0   (strong duality of the inner LP)
        put(r, off["alpha"], 1.0)
        put(np.full(nd, r), off["g"] + np.arange(nd), -np.ones(nd))
        b.append(0.0); r += 1
        if nw:
            # eta - W'lam = 0
            put_block(r, off["lam"], -system.W.T)
            put(r + np.arange(nw), off["eta"] + np.arange(nw), np.ones(nw))
            b.extend(np.zeros(nw)); r += nw
        A_eq = sp.csr_matrix((vals, (rows, cols)), shape=(r, self.n))
        b_eq = np.asarray(b)

        # general inequality rows: McCormick for g_k = xi_k * (E'lam)_k with
        # xi in [-1, 1] and (E'lam)_k in [-rho_k, rho_k], the rho bound rows,
        # and (for mip) the big-M switch rows.
        gi_rows, gi_cols, gi_vals, gh = [], [], [], []
        gr = 0

        def gput(rr, cc, vv):
            gi_rows.extend(np.atleast_1d(rr))
            gi_cols.extend(np.atleast_1d(cc))
            gi_vals.extend(np.atleast_1d(vv))

        Et = E.T  # rows are (E'lam) coefficient vectors over lam
        lam_cols = off["lam"] + np.arange(nx)
        for k in range(nd):
            vL, vU = self.rho_lo[k], self.rho_hi[k]
            ek = Et[k]
            # vL <= (E'lam)_k <= vU
            gput(np.full(nx, gr), lam_cols, ek); gh.append(vU); gr += 1
            gput(np.full(nx, gr), lam_cols, -ek); gh.append(-vL); gr += 1
            # McCormick for g_k = u v with u = xi_k in [-1,1], v = (E'lam)_k
            #   g >= -v + vL u + vL   ->  -g - v + vL u <= -vL
            gput(gr, off["g"] + k, -1.0)
            gput(np.full(nx, gr), lam_cols, -ek)
            gput(gr, off["xi"] + k, vL); gh.append(-vL); gr += 1
            #   g >= v + vU u - vU    ->  -g + v + vU u <= vU
            gput(gr, off["g"] + k, -1.0)
            gput(np.full(nx, gr), lam_cols, ek)
            gput(gr, off["xi"] + k, vU); gh.append(vU); gr += 1
            #   g <= v + vL u - vL    ->   g - v - vL u <= -vL
            gput(gr, off["g"] + k, 1.0)
            gput(np.full(nx, gr), lam_cols, -ek)
            gput(gr, off["xi"] + k, -vL); gh.append(-vL); gr += 1
            #   g <= -v + vU u + vU   ->   g + v - vU u <= vU
            gput(gr, off["g"] + k, 1.0)
            gput(np.full(nx, gr), lam_cols, ek)
            gput(gr, off["xi"] + k, -vU); gh.append(vU); gr += 1
        if with_z:
            for side, (mu_name, q_name) in enumerate((("mup", "qp"),
                                                      ("mum", "qm"))):
                zoff = off["z"] + side * nk
                gput(gr + eye, off[mu_name] + eye, np.ones(nk))
                gput(gr + eye, zoff + eye, -np.ones(nk))
                gh.extend(np.zeros(nk)); gr += nk
                gput(gr + eye, off[q_name] + eye, np.ones(nk))
                gput(gr + eye, zoff + eye, np.full(nk, 2.0 * cap))
                gh.extend(np.full(nk, 2.0 * cap)); gr += nk
        G_ineq = sp.csr_matrix((gi_vals, (gi_rows, gi_cols)),
                               shape=(gr, self.n))
        h_ineq = np.asarray(gh)

        lb = np.full(self.n, 0.0)
        ub = np.full(self.n, 0.0)
        lb[off["xi"]:off["xi"] + nd] = -1.0
        ub[off["xi"]:off["xi"] + nd] = 1.0
        lb[off["alpha"]] = 0.0
        ub[off["alpha"]] = cap
        lb[off["h"]:off["h"] + nk] = -cap
        ub[off["h"]:off["h"] + nk] = cap
        lb[off["lam"]:off["lam"] + nx] = -big_m
        ub[off["lam"]:off["lam"] + nx] = big_m
        for name in ("mup", "mum"):
            lb[off[name]:off[name] + nk] = 0.0
            ub[off[name]:off[name] + nk] = 1.0   # valid: 1'mu = 1, mu >= 0
        for name in ("qp", "qm"):
            lb[off[name]:off[name] + nk] = 0.0
            ub[off[name]:off[name] + nk] = 2.0 * cap
        lb[off["g"]:off["g"] + nd] = -self._gmax
        ub[off["g"]:off["g"] + nd] = self._gmax
        if nw:
            lb[off["w"]:off["w"] + nw] = 0.0
            ub[off["w"]:off["w"] + nw] = big_m
            lb[off["eta"]:off["eta"] + nw] = 0.0
            ub[off["eta"]:off["eta"] + nw] = big_m
        if with_z:
            lb[off["z"]:] = 0.0
            ub[off["z"]:] = 1.0
        self.lb0, self.ub0 = lb, ub

        c = np.zeros(self.n)
        c[off["alpha"]] = -1.0
        self.prob = ConicProblem(n=self.n, c=c, A_eq=A_eq, b_eq=b_eq,
                                 lb=lb.copy(), ub=ub.copy(), G_ineq=G_ineq,
                                 h_ineq=h_ineq)

    def solve_node(self, pins, tol):
        lb, ub = self.lb0.copy(), self.ub0.copy()
        for i, (lo, hi) in pins.items():
            lb[i], ub[i] = lo, hi
        prob = self.prob
        prob.lb, prob.ub = lb, ub
        sf = getattr(prob, "_sf_cache", None)
        if sf is not None:
            # bounds enter the standard form through h; refresh in place
            for r, i in sf.lb_rows:
                sf.h[r] = -lb[i]
            for r, i in sf.ub_rows:
                sf.h[r] = ub[i]
        # node relaxations skip infeasible/unbounded classification: the
        # search treats a stalled status conservatively anyway
        return ipm_solve(prob, tol=tol, max_iter=40, _phase1=False)

    def comp_pairs(self, z):
        """(violation, mu_index, q_index, z_index|None) sorted descending."""
        off, nk, nw = self.off, self.nk, self.nw
        out = []
        for side, (mu_name, q_name) in enumerate((("mup", "qp"), ("mum", "qm"))):
            mu = z[off[mu_name]:off[mu_name] + nk]
            q = z[off[q_name]:off[q_name] + nk]
            prod = mu * q
            for i in range(nk):
                if prod[i] > _COMP_TOL:
                    zi = off["z"] + side * nk + i if self.with_z else None
                    out.append((float(prod[i]), off[mu_name] + i,
                                off[q_name] + i, zi))
        if nw:
            w = z[off["w"]:off["w"] + nw]
            eta = z[off["eta"]:off["eta"] + nw]
            prod = w * eta
            for i in range(nw):
                if prod[i] > _COMP_TOL * max(1.0, self.big_m):
                    out.append((float(prod[i]), off["w"] + i,
                                off["eta"] + i, None))
        out.sort(key=lambda t: -t[0])
        return out

    def certify(self, z):
        m = self.big_m
        margin = 1e-6 * m
        lam = z[self.off["lam"]:self.off["lam"] + self.nx]
        if self.nx and np.max(np.abs(lam)) > m - margin:
            raise BigMTooSmall("inner multiplier at the big-M cap")
        if self.nw:
            w = z[self.off["w"]:self.off["w"] + self.nw]
            eta = z[self.off["eta"]:self.off["eta"] + self.nw]
            if max(w.max(initial=0.0), eta.max(initial=0.0)) > m - margin:
                raise BigMTooSmall("cone multiplier at the big-M cap")
        if self.system.alpha_cap is None and self.cap >= self.big_m:
            if float(z[self.off["alpha"]]) > self.cap - margin:
                raise BigMTooSmall("alpha at the big-M cap")


def solve_lcp(system, big_m=None, method="mip", tol=1e-8, max_nodes=200000):
    """Maximize alpha over the complementarity system; exact via B&B.

    Returns a Solution whose ``info`` carries ``alpha``, the worst-case sign
    vector ``xi`` and the node count.
    """
    if method not in ("mip", "lcp"):
        raise ValueError("method must be 'mip' or 'lcp'")
    if big_m is None:
        big_m = default_big_m(system)
    nd = system.E.shape[1]
    if nd == 0:
        return Solution(x=np.zeros(0), duals={}, status="optimal",
                        kkt_residuals=(0.0, 0.0, 0.0), objective=0.0,
                        dual_objective=0.0, iterations=0,
                        info={"alpha": 0.0, "xi": np.zeros(0), "nodes": 0})

    # per-column inner values bound (E'lam)_k over the dual-feasible set;
    # the set is sign-symmetric only without cone columns
    rho_hi = np.empty(nd)
    rho_lo = np.empty(nd)
    for k in range(nd):
        ek = np.zeros(nd)
        ek[k] = 1.0
        rho_hi[k], _ = inner_lp_value(system, ek)
        if system.W is None:
            rho_lo[k] = -rho_hi[k]
        else:
            v, _ = inner_lp_value(system, -ek)
            rho_lo[k] = -v
    rho = (rho_lo, rho_hi)
    if not (np.all(np.isfinite(rho_hi)) and np.all(np.isfinite(rho_lo))):
        return Solution(x=np.zeros(0), duals={}, status="infeasible",
                        kkt_residuals=(np.inf,) * 3, objective=np.inf,
                        dual_objective=np.inf, iterations=0,
                        info={"alpha": np.inf, "xi": None, "nodes": 0})

    builder = _NodeBuilder(system, big_m, with_z=(method == "mip"), rho=rho)
    off = builder.off

    best_alpha, best_xi = -np.inf, None
    nodes = 0
    round_cache = {}
    stack = [{}]  # pin dictionaries
    seen = set()
    while stack:
        pins = stack.pop()
        key = frozenset(pins.items())
        if key in seen:
            continue
        seen.add(key)
        nodes += 1
        if nodes > max_nodes:
            raise RuntimeError("branch-and-bound node limit exceeded")
        sol = builder.solve_node(pins, tol)
        if sol.status == "infeasible":
            continue
        if sol.status not in ("optimal", "max_iter"):
            continue
        if sol.status == "optimal":
            bound = float(sol.x[off["alpha"]])
        else:
            # stalled relaxation: the dual objective still upper-bounds the
            # maximum when the dual residual is small; otherwise fall back
            # to the a-priori cap
            if sol.kkt_residuals[1] <= 1e-6 and np.isfinite(sol.dual_objective):
                bound = -float(sol.dual_objective) + 1e-7
            else:
                bound = builder.cap
        if not np.isfinite(bound) or bound <= best_alpha + _PRUNE_TOL:
            continue
        # rounding incumbent: any sign vector is outer-feasible
        xi_rel = sol.x[off["xi"]:off["xi"] + nd]
        xi_round = np.where(xi_rel >= 0.0, 1.0, -1.0)
        rkey = xi_round.tobytes()
        if rkey not in round_cache:
            round_cache[rkey] = inner_lp_value(system, xi_round)[0]
        val = round_cache[rkey]
        if np.isfinite(val) and val > best_alpha:
            best_alpha, best_xi = val, xi_round
        if bound <= best_alpha + _PRUNE_TOL:
            continue
        # branch the xi box.  At a fully pinned node the rounding incumbent
        # above evaluated exactly this sign vector, which is the whole
        # subtree (the McCormick envelopes collapse to the strong-duality
        # equality there), so the node is closed outright.
        unpinned = [k for k in range(nd) if (off["xi"] + k) not in pins]
        if not unpinned:
            if not builder.comp_pairs(sol.x):
                builder.certify(sol.x)
            continue
        k = max(unpinned, key=lambda k_: 1.0 - abs(abs(xi_rel[k_]) - 1.0))
        col = off["xi"] + k
        kid_neg = dict(pins); kid_neg[col] = (-1.0, -1.0)
        kid_pos = dict(pins); kid_pos[col] = (1.0, 1.0)
        # explore the side the relaxation leans toward first
        if xi_rel[k] >= 0.0:
            stack.extend([kid_neg, kid_pos])
        else:
            stack.extend([kid_pos, kid_neg])

    if best_xi is None:
        return Solution(x=np.zeros(0), duals={}, status="infeasible",
                        kkt_residuals=(np.inf,) * 3, objective=np.nan,
                        dual_objective=np.nan, iterations=0,
                        info={"alpha": np.nan, "xi": None, "nodes": nodes})
    _certify_incumbent(system, best_xi, best_alpha, big_m)
    return Solution(x=np.zeros(0), duals={}, status="optimal",
                    kkt_residuals=(0.0, 0.0, 0.0), objective=best_alpha,
                    dual_objective=best_alpha, iterations=0,
                    info={"alpha": best_alpha, "xi": best_xi, "nodes": nodes})


def _certify_incumbent(system, xi, alpha, big_m):
    """The complementarity completion of the winner must fit inside big-M:
    the inner LP's equality multiplier is the lam block of the system."""
    margin = 1e-6 * big_m
    prob = _inner_lp_problem(system)
    prob.b_eq[:] = -(system.E @ xi)
    sol = ipm_solve(prob, tol=1e-9, max_iter=100)
    if sol.status not in ("optimal", "max_iter"):
        return
    lam = np.asarray(sol.duals.get("eq", np.zeros(0)))
    if lam.size and np.max(np.abs(lam)) > big_m - margin:
        raise BigMTooSmall("inner equality multiplier exceeds big-M")
    if alpha > big_m - margin:
        raise BigMTooSmall("alpha exceeds big-M")
    nw = 0 if system.W is None else system.W.shape[1]
    if nw:
        w = sol.x[system.C.shape[1] + 1:]
        if w.size and w.max(initial=0.0) > big_m - margin:
            raise BigMTooSmall("cone multiplier exceeds big-M")


def solve_lcp_auto(system, method="mip", tol=1e-8, retries=3):
    """solve_lcp with the default big-M and x10 escalation on certificate
    failure (at most ``retries`` attempts)."""
    big_m = default_big_m(system)
    for attempt in range(retries + 1):
        try:
            return solve_lcp(system, big_m=big_m, method=method, tol=tol)
        except BigMTooSmall:
            if attempt == retries:
                raise
            big_m *= 10.0
