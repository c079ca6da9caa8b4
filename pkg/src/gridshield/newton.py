"""Gauss-Newton nonlinear least squares in polar coordinates, the
conventional state-estimation baseline, with residual-threshold bad-data
rejection (remove rows with large residuals, re-solve).

The measurement functions mirror the rows of the sensing model, including the
per-row normalization factors, so the baseline sees exactly the same data as
the convex pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

__all__ = ["NlsConfig", "newton_se", "measure", "jacobian"]


@dataclass
class NlsConfig:
    max_newton_iter: int = 40
    step_tol: float = 1e-10
    residual_bdd_threshold: Optional[float] = None  # None: 3x robust scale
    max_bdd_rounds: int = 1
    init: str = "flat"            # "flat" | "perturbed" | "truth"
    init_tau: float = 0.1
    init_angle_scale: float = 100.0
    init_seed: int = 0

    def __post_init__(self):
        if self.residual_bdd_threshold is not None and self.residual_bdd_threshold <= 0:
            raise ValueError("residual threshold must be positive")
        if self.max_bdd_rounds < 0:
            raise ValueError("max_bdd_rounds must be nonnegative")


def _flows(grid, vm, va, branch, at_from, reactive):
    br = grid.branches[branch]
    i, j = (br.from_bus, br.to_bus) if at_from else (br.to_bus, br.from_bus)
    vi, vj, th = vm[i], vm[j], va[i] - va[j]
    ct, st_ = np.cos(th), np.sin(th)
    if not reactive:
        val = vi * vi * br.g - vi * vj * (br.g * ct + br.b * st_)
        d_vi = 2.0 * vi * br.g - vj * (br.g * ct + br.b * st_)
        d_vj = -vi * (br.g * ct + br.b * st_)
        d_th = -vi * vj * (-br.g * st_ + br.b * ct)
    else:
        bt = br.b + 0.5 * br.b_sh
        val = -vi * vi * bt + vi * vj * (br.b * ct - br.g * st_)
        d_vi = -2.0 * vi * bt + vj * (br.b * ct - br.g * st_)
        d_vj = vi * (br.b * ct - br.g * st_)
        d_th = vi * vj * (-br.b * st_ - br.g * ct)
    # derivatives wrt (vm_i, vm_j, va_i, va_j); d va_j = -d va_i
    return val, ((i, d_vi), (j, d_vj)), ((i, d_th), (j, -d_th))


def measure(model, vm, va):
    """Measurement functions m(vm, va) for every row, normalized."""
    grid = model.grid
    out = np.empty(model.n_m)
    for idx, m in enumerate(model.rows):
        if m.kind == "vmag2":
            val = vm[m.obj] ** 2
        elif m.kind in ("pflow", "qflow"):
            val, _, _ = _flows(grid, vm, va, m.obj, m.direction == "fwd",
                               m.kind == "qflow")
        else:
            val = 0.0
            for br_id, is_from in grid.adjacency[m.obj]:
                v, _, _ = _flows(grid, vm, va, br_id, is_from,
                                 m.kind == "qinj")
                val += v
        out[idx] = val * model.row_scale[idx]
    return out


def jacobian(model, vm, va, rows=None):
    """Analytic Jacobian wrt (vm, va) with the reference angle column kept;
    callers drop it before solving."""
    grid = model.grid
    n_b = grid.n_buses
    sel = range(model.n_m) if rows is None else rows
    ridx, cidx, vals = [], [], []

    def add(r, col, val):
        ridx.append(r)
        cidx.append(col)
        vals.append(val)

    for r, idx in enumerate(sel):
        m = model.rows[idx]
        scale = model.row_scale[idx]
        if m.kind == "vmag2":
            add(r, m.obj, 2.0 * vm[m.obj] * scale)
            continue
        if m.kind in ("pflow", "qflow"):
            parts = [(m.obj, m.direction == "fwd")]
        else:
            parts = grid.adjacency[m.obj]
        reactive = m.kind in ("qflow", "qinj")
        acc_v, acc_t = {}, {}
        for br_id, at_from in parts:
            _, dv, dt = _flows(grid, vm, va, br_id, at_from, reactive)
            for k, val in dv:
                acc_v[k] = acc_v.get(k, 0.0) + val
            for k, val in dt:
                acc_t[k] = acc_t.get(k, 0.0) + val
        for k, val in acc_v.items():
            add(r, k, val * scale)
        for k, val in acc_t.items():
            add(r, n_b + k, val * scale)
    n_rows = len(sel) if rows is not None else model.n_m
    return sp.csr_matrix((vals, (ridx, cidx)), shape=(n_rows, 2 * n_b))


def _gauss_newton(model, y, rows, vm, va, cfg):
    grid = model.grid
    n_b = grid.n_buses
    keep_cols = np.array([c for c in range(2 * n_b) if c != n_b + grid.ref_bus])
    converged = False
    for _ in range(cfg.max_newton_iter):
        r = y[rows] - measure(model, vm, va)[rows]
        J = jacobian(model, vm, va, rows)[:, keep_cols]
        JtJ = (J.T @ J).toarray()
        g = J.T @ r
        mu = 1e-8
        for _ in range(25):
            try:
                step = np.linalg.solve(JtJ + mu * np.eye(JtJ.shape[0]), g)
                break
            except np.linalg.LinAlgError:
                mu *= 2.0
        else:
            break
        vm_new, va_new = vm.copy(), va.copy()
        vm_new += np.concatenate([step[:n_b]])
        dva = np.zeros(n_b)
        dva[np.arange(n_b) != grid.ref_bus] = step[n_b:]
        va_new += dva
        vm_new = np.maximum(vm_new, 1e-3)
        vm, va = vm_new, va_new
        if np.linalg.norm(step) < cfg.step_tol:
            converged = True
            break
    return vm, va, converged


def _observable(model, rows, vm, va):
    grid = model.grid
    keep_cols = [c for c in range(2 * grid.n_buses)
                 if c != grid.n_buses + grid.ref_bus]
    J = jacobian(model, vm, va, rows)[:, keep_cols].toarray()
    sv = np.linalg.svd(J, compute_uv=False)
    return sv[-1] > 1e-8 * max(1.0, sv[0])


def newton_se(model, y, cfg=None, state0=None):
    """Newton/Gauss-Newton SE with residual-threshold bad-data rejection.

    Returns (vm, va, converged, removed_rows).
    """
    cfg = cfg or NlsConfig()
    grid = model.grid
    n_b = grid.n_buses
    y = np.asarray(y, dtype=float)

    if cfg.init == "flat":
        vm = np.ones(n_b)
        va = np.zeros(n_b)
    elif cfg.init == "truth":
        if state0 is None:
            raise ValueError("init='truth' needs state0")
        vm = np.asarray(state0.vm, dtype=float).copy()
        va = np.asarray(state0.va, dtype=float).copy()
    elif cfg.init == "perturbed":
        if state0 is None:
            raise ValueError("init='perturbed' needs state0")
        rng = np.random.Generator(np.random.Philox(key=np.uint64(cfg.init_seed)))
        tau = cfg.init_tau
        mag = rng.uniform(1.0 - tau, 1.0 + tau, n_b)
        ang = np.radians(rng.uniform(-cfg.init_angle_scale * tau,
                                     cfg.init_angle_scale * tau, n_b))
        vm = np.asarray(state0.vm) * mag
        va = np.asarray(state0.va) + ang
        va -= va[grid.ref_bus]
    else:
        raise ValueError(f"unknown init {cfg.init!r}")

    rows = np.arange(model.n_m)
    removed = set()
    vm, va, converged = _gauss_newton(model, y, rows, vm, va, cfg)
    for _ in range(cfg.max_bdd_rounds):
        resid = np.abs(y[rows] - measure(model, vm, va)[rows])
        if cfg.residual_bdd_threshold is not None:
            thr = cfg.residual_bdd_threshold
        else:
            # robust scale; the floor keeps noise-free residuals (all at
            # solver precision) from flagging every row
            scale = np.median(resid) / 0.6745
            thr = 3.0 * max(scale, 1e-6)
        bad = rows[resid > thr]
        if bad.size == 0:
            break
        removed.update(int(i) for i in bad)
        rows = np.array(sorted(set(rows) - set(int(i) for i in bad)))
        if rows.size < 2 * n_b - 1 or not _observable(model, rows, vm, va):
            converged = False  # removal lost observability; keep last fit
            break
        vm, va, converged = _gauss_newton(model, y, rows, vm, va, cfg)
    return vm, va, converged, removed
