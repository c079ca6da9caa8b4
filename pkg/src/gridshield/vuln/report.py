"""Robust/vulnerable classification, bus critical indices and report output.

A line is vulnerable (V-line) when either directional index reaches 1 (ties
count as vulnerable; an infinite index always does).  A line is critical
(C-line) when, treating its two endpoints as attacked, some *other* line
incident to an endpoint is vulnerable pointing outward.  A bus is critical
(C-bus) when some incident line is vulnerable pointing away from it, and its
critical index is the number of buses reachable along directed vulnerable
edges.  Reports serialize to CSV rows and, when the grid carries coordinates,
to a GeoJSON FeatureCollection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = ["VulnerabilityReport", "classify", "report_csv_rows",
           "report_geojson"]

ROBUST_THRESHOLD = 1.0  # alpha >= 1 classifies as vulnerable (ties included)


@dataclass
class VulnerabilityReport:
    grid: object
    results: dict               # (branch, direction) -> LineVIResult
    v_line: np.ndarray          # per-branch bool
    c_line: np.ndarray
    c_bus: np.ndarray
    critical_index: np.ndarray  # per-bus int
    fractions: dict
    certificates: dict = field(default_factory=dict)

    def directional_alpha(self, branch, direction):
        return self.results[(branch, direction)].alpha


def _alpha_out(results, grid, bus, branch):
    """alpha of ``branch`` in the direction pointing away from ``bus``."""
    br = grid.branches[branch]
    direction = "fwd" if br.from_bus == bus else "rev"
    return results[(branch, direction)].alpha


def classify(grid, vi_results, certificates=None):
    """Build the report from per-line directional results.

    ``vi_results`` maps (branch id, "fwd"/"rev") to LineVIResult; both
    directions of every branch must be present.
    """
    n_l, n_b = grid.n_branches, grid.n_buses
    for l in range(n_l):
        for d in ("fwd", "rev"):
            if (l, d) not in vi_results:
                raise ValueError(f"missing VI result for branch {l} {d}")

    v_line = np.zeros(n_l, dtype=bool)
    for l in range(n_l):
        alphas = [vi_results[(l, d)].alpha for d in ("fwd", "rev")]
        v_line[l] = max(alphas) >= ROBUST_THRESHOLD

    # directed vulnerable edge u -> v: the line (u, v) is vulnerable in the
    # direction pointing out of u
    out_edges = [[] for _ in range(n_b)]
    for l in range(n_l):
        br = grid.branches[l]
        if vi_results[(l, "fwd")].alpha >= ROBUST_THRESHOLD:
            out_edges[br.from_bus].append(br.to_bus)
        if vi_results[(l, "rev")].alpha >= ROBUST_THRESHOLD:
            out_edges[br.to_bus].append(br.from_bus)

    c_bus = np.array([len(out_edges[k]) > 0 for k in range(n_b)])

    c_line = np.zeros(n_l, dtype=bool)
    for l in range(n_l):
        br = grid.branches[l]
        crit = False
        for end in (br.from_bus, br.to_bus):
            for other_id, _ in grid.adjacency[end]:
                if other_id == l:
                    continue
                if _alpha_out(vi_results, grid, end, other_id) >= ROBUST_THRESHOLD:
                    crit = True
        c_line[l] = crit

    ci = np.zeros(n_b, dtype=int)
    for k in range(n_b):
        seen = {k}
        stack = [k]
        while stack:
            u = stack.pop()
            for v in out_edges[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        ci[k] = len(seen) - 1

    fractions = {
        "v_line": float(v_line.mean()) if n_l else 0.0,
        "c_line": float(c_line.mean()) if n_l else 0.0,
        "c_bus": float(c_bus.mean()) if n_b else 0.0,
        "mean_critical_index": float(ci.mean()) if n_b else 0.0,
    }
    return VulnerabilityReport(grid=grid, results=dict(vi_results),
                               v_line=v_line, c_line=c_line, c_bus=c_bus,
                               critical_index=ci, fractions=fractions,
                               certificates=certificates or {})


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        if np.isnan(x):
            return "nan"
        if np.isinf(x):
            return "inf"
        return f"{x:.12g}"
    return str(x)


def report_csv_rows(report):
    """One row per line and direction, plus header."""
    header = ["branch", "from_bus", "to_bus", "direction", "alpha_lp",
              "alpha_socp", "method", "v_line", "c_line", "certificate_gap"]
    rows = [header]
    grid = report.grid
    for l in range(grid.n_branches):
        br = grid.branches[l]
        for d in ("fwd", "rev"):
            r = report.results[(l, d)]
            rows.append([str(l), str(br.from_bus), str(br.to_bus), d,
                         _fmt(r.alpha_lp), _fmt(r.alpha_socp), r.method,
                         str(int(report.v_line[l])),
                         str(int(report.c_line[l])),
                         _fmt(r.certificate_gap)])
    return rows


def report_geojson(report):
    """FeatureCollection: lines colored by robustness, buses by CI.

    Returns None when the grid has no coordinates.
    """
    grid = report.grid
    if any(b.coords is None for b in grid.buses):
        return None
    features = []
    for l in range(grid.n_branches):
        br = grid.branches[l]
        a, b = grid.buses[br.from_bus], grid.buses[br.to_bus]
        features.append({
            "type": "Feature",
            "geometry": {"type": "LineString",
                         "coordinates": [list(a.coords), list(b.coords)]},
            "properties": {
                "branch": l,
                "vulnerable": bool(report.v_line[l]),
                "critical": bool(report.c_line[l]),
                "stroke": "#d62728" if report.v_line[l] else "#2ca02c",
                "alpha_fwd": _fmt(report.results[(l, "fwd")].alpha),
                "alpha_rev": _fmt(report.results[(l, "rev")].alpha),
            },
        })
    for k, bus in enumerate(grid.buses):
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": list(bus.coords)},
            "properties": {
                "bus": k,
                "name": bus.name,
                "critical": bool(report.c_bus[k]),
                "critical_index": int(report.critical_index[k]),
            },
        })
    return {"type": "FeatureCollection", "features": features}
