"""Region partitions induced by an attacked bus set.

The attacked set induces inner/outer boundary and safe bus sets, line sets,
and the matching measurement/variable partitions of a sensing model.  Two
simplifying assumptions are enforced by automatic enlargement of the attacked
region (each step is logged): no line may connect two inner-boundary buses,
and no two attacked buses may share an inner-boundary neighbour.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["RegionPartition", "build_partition"]


@dataclass
class RegionPartition:
    attacked_buses: frozenset
    inner_boundary: frozenset
    outer_boundary: frozenset
    safe_buses: frozenset
    lines_at: frozenset = frozenset()
    lines_at_bi: frozenset = frozenset()
    lines_bd: frozenset = frozenset()
    lines_sf: frozenset = frozenset()
    m_at: frozenset = frozenset()
    m_bi: frozenset = frozenset()
    m_bo: frozenset = frozenset()
    m_sf: frozenset = frozenset()
    x_at: frozenset = frozenset()
    x_bd: frozenset = frozenset()
    x_sf: frozenset = frozenset()
    enlargement_log: list = field(default_factory=list)

    @property
    def m_bd(self):
        return self.m_bi | self.m_bo


def _enlarge_to_assumptions(grid, attacked):
    """Grow the attacked set until the two simplifying assumptions hold."""
    attacked = set(attacked)
    log = []
    while True:
        inner = {v for k in attacked for v in grid.neighbors(k)} - attacked
        # (a) no line between two inner-boundary buses
        absorb = set()
        for br in grid.branches:
            if br.from_bus in inner and br.to_bus in inner:
                absorb.update((br.from_bus, br.to_bus))
        if absorb:
            log.append(f"absorbed inner-inner line endpoints {sorted(absorb)}")
            attacked |= absorb
            continue
        # (b) no two attacked buses share an inner-boundary neighbour
        shared = set()
        for j in inner:
            hits = [v for v in grid.neighbors(j) if v in attacked]
            if len(hits) > 1:
                shared.add(j)
        if shared:
            log.append(f"absorbed shared inner neighbours {sorted(shared)}")
            attacked |= shared
            continue
        return attacked, inner, log


def build_partition(model, attacked_buses):
    """Partition of buses, lines, measurements and variables of ``model``."""
    grid = model.grid
    attacked = set(int(k) for k in attacked_buses)
    if not attacked:
        raise ValueError("attacked set must be non-empty")
    if not attacked <= set(range(grid.n_buses)):
        raise ValueError("attacked set references unknown buses")

    attacked, inner, log = _enlarge_to_assumptions(grid, attacked)
    if len(attacked) >= grid.n_buses:
        raise ValueError("attacked region covers the whole grid; "
                         "no safe region remains")
    outer = ({v for j in inner for v in grid.neighbors(j)}
             - attacked - inner)
    safe = set(range(grid.n_buses)) - attacked - inner - outer
    bd = inner | outer

    lines_at, lines_at_bi, lines_bd, lines_sf = set(), set(), set(), set()
    for br in grid.branches:
        ends = {br.from_bus, br.to_bus}
        if ends <= attacked:
            lines_at.add(br.id)
        elif ends & attacked and ends & inner:
            lines_at_bi.add(br.id)
        elif ends <= bd:
            lines_bd.add(br.id)
        elif ends <= safe:
            lines_sf.add(br.id)
        # bo-sf bridging lines belong to no named line set

    m_at, m_bi, m_bo, m_sf = set(), set(), set(), set()
    for i, m in enumerate(model.rows):
        if m.kind == "vmag2":
            if m.obj in attacked:
                m_at.add(i)
            elif m.obj in bd:
                m_bo.add(i)
            else:
                m_sf.add(i)
        elif m.kind in ("pinj", "qinj"):
            if m.obj in attacked:
                m_at.add(i)
            elif m.obj in inner:
                m_bi.add(i)
            else:
                m_sf.add(i)
        else:
            if m.obj in lines_at:
                m_at.add(i)
            elif m.obj in lines_at_bi:
                m_bi.add(i)
            elif m.obj in lines_bd:
                m_bo.add(i)
            else:
                m_sf.add(i)

    x_at, x_bd, x_sf = set(), set(), set()
    for k in range(grid.n_buses):
        col = int(model.mg_col[k])
        if k in attacked:
            x_at.add(col)
        elif k in bd:
            x_bd.add(col)
        else:
            x_sf.add(col)
    for l in model.basis_branches():
        cols = (int(model.re_col[l]), int(model.im_col[l]))
        if l in lines_at or l in lines_at_bi:
            x_at.update(cols)
        elif l in lines_bd:
            x_bd.update(cols)
        else:
            x_sf.update(cols)

    return RegionPartition(
        attacked_buses=frozenset(attacked), inner_boundary=frozenset(inner),
        outer_boundary=frozenset(outer), safe_buses=frozenset(safe),
        lines_at=frozenset(lines_at), lines_at_bi=frozenset(lines_at_bi),
        lines_bd=frozenset(lines_bd), lines_sf=frozenset(lines_sf),
        m_at=frozenset(m_at), m_bi=frozenset(m_bi), m_bo=frozenset(m_bo),
        m_sf=frozenset(m_sf), x_at=frozenset(x_at), x_bd=frozenset(x_bd),
        x_sf=frozenset(x_sf), enlargement_log=log)
