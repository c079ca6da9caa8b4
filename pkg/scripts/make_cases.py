#!/usr/bin/env python3
"""Generate the bundled synthetic test grids.

The repo ships desk-scale cases sized like the classic 14/30/118-bus test
systems (same bus and branch counts) with realistic per-unit admittance
ranges, a plausible operating state, contiguous zones and planar coordinates.
Topologies are random geometric graphs: a minimum spanning tree for
connectivity plus nearest-neighbour chords up to the target branch count.
Regenerating is deterministic (Philox, fixed seeds).
"""

import json
import pathlib

import numpy as np

OUT = pathlib.Path(__file__).resolve().parents[1] / "src" / "gridshield" / "cases"

SIZES = {  # name -> (buses, branches, zones, seed)
    "case14": (14, 20, 2, 14),
    "case30": (30, 41, 3, 30),
    "case118": (118, 186, 5, 118),
}


def build_topology(n_bus, n_branch, rng):
    pos = rng.uniform(0.0, 1.0, size=(n_bus, 2))
    # MST on Euclidean distances (Prim)
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
    in_tree = np.zeros(n_bus, dtype=bool)
    in_tree[0] = True
    edges = set()
    best = dist[0].copy()
    best_from = np.zeros(n_bus, dtype=int)
    for _ in range(n_bus - 1):
        cand = np.where(in_tree, np.inf, best)
        v = int(np.argmin(cand))
        edges.add((min(best_from[v], v), max(best_from[v], v)))
        in_tree[v] = True
        closer = dist[v] < best
        best[closer] = dist[v][closer]
        best_from[closer] = v
    # add shortest non-tree chords, capping node degree at 9
    deg = np.zeros(n_bus, dtype=int)
    for i, j in edges:
        deg[i] += 1
        deg[j] += 1
    pairs = [(dist[i, j], i, j) for i in range(n_bus) for j in range(i + 1, n_bus)
             if (i, j) not in edges]
    pairs.sort()
    for _, i, j in pairs:
        if len(edges) >= n_branch:
            break
        if deg[i] >= 9 or deg[j] >= 9:
            continue
        edges.add((i, j))
        deg[i] += 1
        deg[j] += 1
    return pos, sorted(edges)


def make_case(name, n_bus, n_branch, n_zones, seed):
    rng = np.random.Generator(np.random.Philox(key=seed))
    pos, edges = build_topology(n_bus, n_branch, rng)

    x = rng.uniform(0.03, 0.25, size=len(edges))
    r = x * rng.uniform(0.10, 0.35, size=len(edges))
    b_sh = np.where(rng.uniform(size=len(edges)) < 0.3, 0.0,
                    rng.uniform(0.01, 0.08, size=len(edges)))

    # operating state: magnitudes near nominal, angles spread along a BFS tree
    vm = rng.uniform(0.96, 1.05, size=n_bus)
    adj = [[] for _ in range(n_bus)]
    for k, (i, j) in enumerate(edges):
        adj[i].append(j)
        adj[j].append(i)
    va = np.zeros(n_bus)
    seen = [False] * n_bus
    seen[0] = True
    queue = [0]
    while queue:
        u = queue.pop(0)
        for v_ in adj[u]:
            if not seen[v_]:
                seen[v_] = True
                va[v_] = va[u] + rng.uniform(-0.06, 0.06)
                queue.append(v_)

    # contiguous zones by multi-source BFS
    seeds = rng.choice(n_bus, size=n_zones, replace=False)
    zone = np.full(n_bus, -1, dtype=int)
    frontier = list(seeds)
    for z, s in enumerate(seeds):
        zone[s] = z + 1
    while frontier:
        nxt = []
        for u in frontier:
            for v_ in adj[u]:
                if zone[v_] < 0:
                    zone[v_] = zone[u]
                    nxt.append(v_)
        frontier = nxt

    ref = int(np.argmax([len(a) for a in adj]))
    va -= va[ref]

    lines = ["function mpc = " + name,
             f"% synthetic {n_bus}-bus test case (deterministic, seed {seed})",
             "mpc.version = '2';",
             "mpc.baseMVA = 100;",
             "mpc.bus = ["]
    for k in range(n_bus):
        btype = 3 if k == ref else 1
        lines.append(f"    {k + 1}  {btype}  0 0 0 0  1  "
                     f"{vm[k]:.6f}  {np.degrees(va[k]):.6f}  138  {zone[k]}  1.1  0.9;")
    lines.append("];")
    lines.append("mpc.branch = [")
    for k, (i, j) in enumerate(edges):
        lines.append(f"    {i + 1}  {j + 1}  {r[k]:.6f}  {x[k]:.6f}  {b_sh[k]:.6f}"
                     "  0 0 0  0 0  1  -360 360;")
    lines.append("];")
    (OUT / f"{name}.m").write_text("\n".join(lines) + "\n")

    # the canonical json twin is derived from the parsed .m file (so both
    # formats agree bit for bit) with coordinates added
    import dataclasses
    import sys
    sys.path.insert(0, str(OUT.parents[2]))
    from gridshield.grid import Bus, Grid, grid_to_json, parse_case
    grid, state = parse_case((OUT / f"{name}.m").read_text(), "matpower_subset")
    buses = [dataclasses.replace(b, coords=(round(float(pos[b.id, 0] * 4 - 100), 6),
                                            round(float(pos[b.id, 1] * 3 + 35), 6)))
             for b in grid.buses]
    grid2 = Grid(buses=buses, branches=grid.branches, base_mva=grid.base_mva,
                 ref_bus=grid.ref_bus)
    (OUT / f"{name}.json").write_text(grid_to_json(grid2, state) + "\n")
    print(f"{name}: {n_bus} buses, {len(edges)} branches, ref {ref}")


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for name, (nb, nl, nz, seed) in SIZES.items():
        make_case(name, nb, nl, nz, seed)
