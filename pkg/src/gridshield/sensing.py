"""Linear measurement basis and sensing-matrix construction.

Every supported measurement is a linear function of the basis variables

* ``mg_k``  -- squared voltage magnitude at bus k,
* ``re_l``, ``im_l`` -- real/imaginary parts of v_i v_j* for branch l = (i, j),

so the full set of sensors is one sparse matrix row per measurement.  Branch
variables are created adaptively: a branch gets its (re, im) pair only when
some measurement touches it (a flow on the branch, or an injection at either
endpoint), which keeps the basis sparse.

Row normalization: under ``estimation`` mode squared-voltage rows are scaled
to squared norm equal to the bus degree and every other row to unit norm;
under ``vi`` mode (used by the vulnerability indices) every row has unit norm.
The scale factor of each row is recorded so that simulated measurements can be
scaled consistently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .grid import Grid, GroundTruthState, node_degree

__all__ = [
    "Measurement", "MeasurementProfile", "VariableIndex", "SensingModel",
    "build_sensing_model", "lift_state", "evaluate", "make_profile",
    "PROFILE_PRESETS",
]

FLOW_KINDS = ("pflow", "qflow")
ALL_KINDS = ("vmag2", "pflow", "qflow", "pinj", "qinj")


@dataclass(frozen=True, order=True)
class Measurement:
    """One sensor: kind in {vmag2, pflow, qflow, pinj, qinj}; ``obj`` is a bus
    id for nodal kinds and a branch id for flows; flows carry a direction."""
    kind: str
    obj: int
    direction: Optional[str] = None  # "fwd" (from->to) or "rev" for flows

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        if self.kind in FLOW_KINDS:
            if self.direction not in ("fwd", "rev"):
                raise ValueError("flow measurements need direction fwd/rev")
        elif self.direction is not None:
            raise ValueError(f"{self.kind} takes no direction")


@dataclass(frozen=True)
class VariableIndex:
    kind: str   # "mg", "re", "im"
    obj: int    # bus id for mg, branch id for re/im
    column: int


class MeasurementProfile:
    """Ordered, duplicate-free collection of measurements on a grid."""

    def __init__(self, measurements):
        self.measurements = list(measurements)
        if len(set(self.measurements)) != len(self.measurements):
            raise ValueError("duplicate measurements in profile")

    def __len__(self):
        return len(self.measurements)

    def __iter__(self):
        return iter(self.measurements)

    def validate(self, grid):
        for m in self.measurements:
            n = grid.n_branches if m.kind in FLOW_KINDS else grid.n_buses
            if not 0 <= m.obj < n:
                raise ValueError(f"profile references missing element: {m}")
        return self


# Flow subsets used by the named presets.  The 3-flow presets drop the
# reverse reactive flow; which of the four to drop is a repo convention.
_FLOWS_4 = (("pflow", "fwd"), ("pflow", "rev"), ("qflow", "fwd"), ("qflow", "rev"))
_FLOWS_3 = (("pflow", "fwd"), ("pflow", "rev"), ("qflow", "fwd"))
_FLOWS_2 = (("pflow", "fwd"), ("qflow", "fwd"))

PROFILE_PRESETS = {
    "full":        {"vmag2": True, "inj": True, "flows": _FLOWS_4},
    "profile_i":   {"vmag2": True, "inj": True, "flows": _FLOWS_2},
    "profile_ii":  {"vmag2": False, "inj": True, "flows": _FLOWS_3},
    "profile_iii": {"vmag2": True, "inj": True, "flows": _FLOWS_3},
    "profile_iv":  {"vmag2": True, "inj": True, "flows": _FLOWS_4},
    "profile_v":   {"vmag2": True, "inj": False, "flows": _FLOWS_3},
}
# profile_iv lists full nodal + 4 flows, same content as "full"


def make_profile(grid, preset="full"):
    """Build a named preset profile for ``grid``."""
    if preset not in PROFILE_PRESETS:
        raise ValueError(f"unknown profile preset {preset!r}")
    cfg = PROFILE_PRESETS[preset]
    rows = []
    if cfg["vmag2"]:
        rows += [Measurement("vmag2", k) for k in range(grid.n_buses)]
    for kind, direction in cfg["flows"]:
        rows += [Measurement(kind, l, direction) for l in range(grid.n_branches)]
    if cfg["inj"]:
        rows += [Measurement("pinj", k) for k in range(grid.n_buses)]
        rows += [Measurement("qinj", k) for k in range(grid.n_buses)]
    return MeasurementProfile(rows)


@dataclass
class SensingModel:
    grid: Grid
    profile: MeasurementProfile
    A: sp.csr_matrix                 # n_m x n_x, rows normalized
    rows: list[Measurement]
    cols: list[VariableIndex]
    row_norm_mode: str               # "estimation" or "vi"
    row_scale: np.ndarray            # factor applied to each raw row (and to y)
    mg_col: np.ndarray               # bus id -> column
    re_col: np.ndarray               # branch id -> column or -1
    im_col: np.ndarray

    @property
    def n_m(self):
        return self.A.shape[0]

    @property
    def n_x(self):
        return self.A.shape[1]

    def row_index(self, measurement):
        return self._row_lookup[measurement]

    def __post_init__(self):
        self._row_lookup = {m: i for i, m in enumerate(self.rows)}

    def basis_branches(self):
        """Branch ids that own (re, im) columns."""
        return [l for l in range(self.grid.n_branches) if self.re_col[l] >= 0]

    def cone_index_lists(self):
        """Per basis branch, the column lists (mg_i, mg_j, re_l, im_l) entering
        the second-order-cone membership of that branch."""
        out = []
        for l in self.basis_branches():
            br = self.grid.branches[l]
            out.append((int(self.mg_col[br.from_bus]), int(self.mg_col[br.to_bus]),
                        int(self.re_col[l]), int(self.im_col[l])))
        return out


def _raw_row_entries(model_grid, m, mg_col, re_col, im_col):
    """(column, coefficient) pairs of one measurement row, pre-normalization."""
    g_ = model_grid
    entries = {}

    def add(col, val):
        entries[col] = entries.get(col, 0.0) + val

    def flow_terms(branch, at_from, reactive):
        br = g_.branches[branch]
        bus = br.from_bus if at_from else br.to_bus
        sign = 1.0 if at_from else -1.0
        if not reactive:
            add(mg_col[bus], br.g)
            add(re_col[branch], -br.g)
            add(im_col[branch], -sign * br.b)
        else:
            add(mg_col[bus], -(br.b + 0.5 * br.b_sh))
            add(re_col[branch], br.b)
            add(im_col[branch], -sign * br.g)

    if m.kind == "vmag2":
        add(mg_col[m.obj], 1.0)
    elif m.kind in FLOW_KINDS:
        flow_terms(m.obj, m.direction == "fwd", m.kind == "qflow")
    else:  # pinj / qinj: sum of the incident directed branch-flow rows
        for br_id, is_from in g_.adjacency[m.obj]:
            flow_terms(br_id, is_from, m.kind == "qinj")
    return entries


def build_sensing_model(grid, profile, row_norm_mode="estimation"):
    """Assemble the sparse sensing matrix for ``profile`` on ``grid``."""
    if row_norm_mode not in ("estimation", "vi"):
        raise ValueError("row_norm_mode must be 'estimation' or 'vi'")
    profile.validate(grid)

    # adaptive branch columns: flows on the branch or injections at an endpoint
    live = np.zeros(grid.n_branches, dtype=bool)
    inj_buses = {m.obj for m in profile if m.kind in ("pinj", "qinj")}
    for m in profile:
        if m.kind in FLOW_KINDS:
            live[m.obj] = True
    for k in inj_buses:
        for br_id, _ in grid.adjacency[k]:
            live[br_id] = True

    mg_col = np.arange(grid.n_buses, dtype=np.int64)
    re_col = np.full(grid.n_branches, -1, dtype=np.int64)
    im_col = np.full(grid.n_branches, -1, dtype=np.int64)
    col = grid.n_buses
    cols = [VariableIndex("mg", k, k) for k in range(grid.n_buses)]
    for l in range(grid.n_branches):
        if live[l]:
            re_col[l], im_col[l] = col, col + 1
            cols.append(VariableIndex("re", l, col))
            cols.append(VariableIndex("im", l, col + 1))
            col += 2
    n_x = col

    rows = list(profile)
    data, indices, indptr = [], [], [0]
    scale = np.empty(len(rows))
    for i, m in enumerate(rows):
        entries = _raw_row_entries(grid, m, mg_col, re_col, im_col)
        entries = {c: v for c, v in sorted(entries.items()) if v != 0.0}
        raw_norm = np.sqrt(sum(v * v for v in entries.values()))
        if raw_norm == 0.0:
            raise ValueError(f"measurement {m} has an all-zero row")
        if row_norm_mode == "estimation" and m.kind == "vmag2":
            target = np.sqrt(node_degree(grid, m.obj)) or 1.0
        else:
            target = 1.0
        s = target / raw_norm
        scale[i] = s
        for c, v in entries.items():
            indices.append(c)
            data.append(v * s)
        indptr.append(len(indices))

    A = sp.csr_matrix((np.asarray(data), np.asarray(indices, dtype=np.int32),
                       np.asarray(indptr, dtype=np.int32)), shape=(len(rows), n_x))
    return SensingModel(grid=grid, profile=profile, A=A, rows=rows, cols=cols,
                        row_norm_mode=row_norm_mode, row_scale=scale,
                        mg_col=mg_col, re_col=re_col, im_col=im_col)


def lift_state(model, state):
    """Map (vm, va) to the basis vector: mg_k = vm_k^2,
    re_l = vm_i vm_j cos(va_i - va_j), im_l = vm_i vm_j sin(va_i - va_j)."""
    vm = np.asarray(state.vm, dtype=float)
    va = np.asarray(state.va, dtype=float)
    if vm.shape[0] != model.grid.n_buses:
        raise ValueError("state dimension mismatch")
    x = np.zeros(model.n_x)
    x[:model.grid.n_buses] = vm ** 2
    for l in model.basis_branches():
        br = model.grid.branches[l]
        i, j = br.from_bus, br.to_bus
        prod = vm[i] * vm[j]
        dth = va[i] - va[j]
        x[model.re_col[l]] = prod * np.cos(dth)
        x[model.im_col[l]] = prod * np.sin(dth)
    return x


def evaluate(model, state):
    """Noise-free measurement vector A @ lift(state) (normalized rows)."""
    return model.A @ lift_state(model, state)
