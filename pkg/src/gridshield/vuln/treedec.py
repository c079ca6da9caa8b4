"""Tree decomposition of the grid graph and bag vulnerability indices.

Decompositions come from elimination orderings (min-degree or min-fill);
the width reported is an upper bound on the treewidth.  Given an attacked bus
set, bags split into infected / link / safe; for a link bag adjacent to
exactly one infected bag, the bag index runs the same minimax machinery as
the line index with the adhesion measurements as the defective set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..solver import LcpSystem, solve_lcp_auto
from .indices import (ENUM_CAP, _alpha_bound, _enumerate_alpha,
                      _infeasible_for_some_xi)

__all__ = ["TreeDecomposition", "tree_decompose", "validate_decomposition",
           "BagClassification", "classify_bags", "BagVIResult", "bag_vi"]


@dataclass
class TreeDecomposition:
    bags: list                # bag id -> frozenset of buses
    tree: list                # list of (bag id, bag id) edges
    width: int

    def neighbors(self, t):
        out = []
        for a, b in self.tree:
            if a == t:
                out.append(b)
            elif b == t:
                out.append(a)
        return out


def _elimination_order(grid, heuristic):
    n = grid.n_buses
    adj = [set() for _ in range(n)]
    for br in grid.branches:
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)
    alive = np.ones(n, dtype=bool)
    order, bags = [], []
    for _ in range(n):
        cand = np.flatnonzero(alive)
        if heuristic == "min_degree":
            scores = [len(adj[v]) for v in cand]
        elif heuristic == "min_fill":
            scores = []
            for v in cand:
                nb = list(adj[v])
                fill = sum(1 for a in range(len(nb)) for b in range(a + 1, len(nb))
                           if nb[b] not in adj[nb[a]])
                scores.append(fill)
        else:
            raise ValueError(f"unknown heuristic {heuristic!r}")
        v = int(cand[int(np.argmin(scores))])
        order.append(v)
        nbrs = set(adj[v])
        bags.append(frozenset({v} | nbrs))
        for u in nbrs:
            adj[u].discard(v)
            adj[u] |= nbrs - {u}
        adj[v] = set()
        alive[v] = False
    return order, bags


def tree_decompose(grid, heuristic="min_degree"):
    """Clique-tree construction over an elimination ordering."""
    order, bags = _elimination_order(grid, heuristic)
    pos = {v: k for k, v in enumerate(order)}
    edges = []
    for t, bag in enumerate(bags):
        rest = bag - {order[t]}
        if rest:
            parent = min((pos[u] for u in rest))
            edges.append((t, parent))
    # join any remaining forest components (disconnected grids) arbitrarily
    n_bags = len(bags)
    comp = list(range(n_bags))

    def find(a):
        while comp[a] != a:
            comp[a] = comp[comp[a]]
            a = comp[a]
        return a

    for a, b in edges:
        comp[find(a)] = find(b)
    roots = sorted({find(t) for t in range(n_bags)})
    for extra in roots[1:]:
        edges.append((roots[0], extra))
        comp[find(extra)] = find(roots[0])
    width = max((len(b) - 1 for b in bags), default=0)
    return TreeDecomposition(bags=list(bags), tree=edges, width=width)


def validate_decomposition(grid, td):
    """Node coverage, edge coverage, running intersection; raises on failure."""
    covered = set()
    for bag in td.bags:
        covered |= bag
    if covered != set(range(grid.n_buses)):
        raise AssertionError("node coverage fails")
    for br in grid.branches:
        if not any({br.from_bus, br.to_bus} <= bag for bag in td.bags):
            raise AssertionError(f"edge coverage fails for branch {br.id}")
    # running intersection: bags containing each bus form a subtree
    adj = [[] for _ in td.bags]
    for a, b in td.tree:
        adj[a].append(b)
        adj[b].append(a)
    if len(td.tree) != len(td.bags) - 1:
        raise AssertionError("decomposition graph is not a tree")
    for v in range(grid.n_buses):
        holders = [t for t, bag in enumerate(td.bags) if v in bag]
        seen = {holders[0]}
        stack = [holders[0]]
        holder_set = set(holders)
        while stack:
            t = stack.pop()
            for u in adj[t]:
                if u in holder_set and u not in seen:
                    seen.add(u)
                    stack.append(u)
        if seen != holder_set:
            raise AssertionError(f"running intersection fails for bus {v}")
    return True


@dataclass
class BagClassification:
    infected: list
    link: list
    safe: list
    infected_subtree: bool
    qualifying: list = field(default_factory=list)  # (link bag, infected bag)


def classify_bags(td, attacked_buses):
    attacked = set(attacked_buses)
    infected = [t for t, bag in enumerate(td.bags) if bag & attacked]
    inf_set = set(infected)
    link = sorted({u for t in infected for u in td.neighbors(t)} - inf_set)
    safe = [t for t in range(len(td.bags))
            if t not in inf_set and t not in set(link)]
    # infected bags must form a subtree for the boundary analysis
    subtree = True
    if infected:
        seen = {infected[0]}
        stack = [infected[0]]
        while stack:
            t = stack.pop()
            for u in td.neighbors(t):
                if u in inf_set and u not in seen:
                    seen.add(u)
                    stack.append(u)
        subtree = seen == inf_set
    qualifying = []
    for t in link:
        inf_nbrs = [u for u in td.neighbors(t) if u in inf_set]
        if len(inf_nbrs) == 1:
            qualifying.append((t, inf_nbrs[0]))
    return BagClassification(infected=infected, link=link, safe=safe,
                             infected_subtree=subtree, qualifying=qualifying)


@dataclass
class BagVIResult:
    link_bag: int
    infected_bag: int
    alpha: float
    variant: str
    method: str
    m_adhesion: tuple
    m_outer_link: tuple
    x_link: tuple
    xi_star: Optional[np.ndarray] = None


def _bag_partition(model, td, cls, link_bag, infected_bag):
    """Adhesion/outer-link measurement and link-variable split for one
    qualifying link bag."""
    grid = model.grid
    w_lk = td.bags[link_bag]
    inf_nodes = set().union(*(td.bags[t] for t in cls.infected))
    n_ad = w_lk & td.bags[infected_bag]
    inf_only = inf_nodes - n_ad

    induced_lk, induced_if, l_ad = set(), set(), set()
    for br in grid.branches:
        ends = {br.from_bus, br.to_bus}
        if ends <= inf_nodes:
            induced_if.add(br.id)
        if ends <= w_lk:
            induced_lk.add(br.id)
        if (ends & n_ad) and (ends & inf_only):
            l_ad.add(br.id)

    x_lk = [int(model.mg_col[k]) for k in sorted(w_lk)]
    for l in sorted(induced_lk - induced_if):
        if model.re_col[l] >= 0:
            x_lk += [int(model.re_col[l]), int(model.im_col[l])]

    m_ad, m_ol = [], []
    for i, m in enumerate(model.rows):
        if m.kind in ("pinj", "qinj") and m.obj in n_ad:
            m_ad.append(i)
        elif m.kind in ("pflow", "qflow") and m.obj in l_ad:
            m_ad.append(i)
        elif m.kind == "vmag2" and m.obj in w_lk:
            m_ol.append(i)
        elif m.kind in ("pflow", "qflow") and m.obj in induced_lk - induced_if:
            m_ol.append(i)
    return x_lk, m_ad, m_ol, sorted(induced_lk)


def bag_vi(model, td, attacked_buses, variant="lp", x_lifted=None,
           method="auto", enum_cap=ENUM_CAP):
    """Bag vulnerability indices for every qualifying link bag.

    Requires the infected bags to form a subtree; reports (raises) otherwise.
    """
    if model.row_norm_mode != "vi":
        raise ValueError("bag_vi expects a vi-normalized model")
    cls = classify_bags(td, attacked_buses)
    if not cls.infected:
        raise ValueError("no infected bags: attacked set is empty?")
    if not cls.infected_subtree:
        raise ValueError("infected bags do not form a subtree; "
                         "analysis unsupported for this decomposition")
    if not cls.qualifying:
        raise ValueError("no link bag adjacent to exactly one infected bag")

    results = []
    A = model.A
    for link_bag, infected_bag in cls.qualifying:
        x_lk, m_ad, m_ol, induced_lk = _bag_partition(model, td, cls,
                                                      link_bag, infected_bag)
        C = A[m_ol][:, x_lk].toarray().T if m_ol else np.zeros((len(x_lk), 0))
        E = A[m_ad][:, x_lk].toarray().T if m_ad else np.zeros((len(x_lk), 0))
        W = None
        if variant == "socp":
            if x_lifted is None:
                raise ValueError("socp variant needs a lifted state")
            W = _bag_cone_columns(model, x_lk, induced_lk, x_lifted)
        if E.shape[1] == 0:
            alpha, xi = 0.0, np.zeros(0)
            used = "enumeration"
        else:
            infeasible, Z = _infeasible_for_some_xi(C, E)
            if infeasible:
                alpha, xi, used = np.inf, None, "infeasibility"
            else:
                system = LcpSystem(C=C, E=E, W=W, alpha_cap=_alpha_bound(Z))
                used = method
                if method == "auto":
                    used = "enumeration" if E.shape[1] <= enum_cap else "lcp"
                if used == "enumeration":
                    alpha, xi = _enumerate_alpha(system, symmetric=(W is None))
                else:
                    sol = solve_lcp_auto(system, method=used)
                    alpha, xi = sol.info["alpha"], sol.info["xi"]
        results.append(BagVIResult(link_bag=link_bag, infected_bag=infected_bag,
                                   alpha=float(alpha), variant=variant,
                                   method=used, m_adhesion=tuple(m_ad),
                                   m_outer_link=tuple(m_ol),
                                   x_link=tuple(x_lk), xi_star=xi))
    return results


def _bag_cone_columns(model, x_lk, induced_lk, x_lifted):
    colpos = {c: k for k, c in enumerate(x_lk)}
    grid = model.grid
    cols = []
    for l in induced_lk:
        if model.re_col[l] < 0:
            continue
        br = grid.branches[l]
        mi, mj = int(model.mg_col[br.from_bus]), int(model.mg_col[br.to_bus])
        re, im = int(model.re_col[l]), int(model.im_col[l])
        ctx = (x_lifted[mi] + x_lifted[mj]) / 2.0
        full = {mi: ctx - 0.5 * x_lifted[mi], mj: ctx - 0.5 * x_lifted[mj],
                re: -x_lifted[re], im: -x_lifted[im]}
        vec = np.zeros(len(x_lk))
        for c, v in full.items():
            if c in colpos:
                vec[colpos[c]] = v
        cols.append(vec)
    return np.column_stack(cols) if cols else None
