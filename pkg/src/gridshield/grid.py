"""Network model and case-file ingestion.

Two on-disk formats are supported:

* ``matpower_subset`` -- plain-text ``.m`` case files; only the ``mpc.baseMVA``,
  ``mpc.bus`` and ``mpc.branch`` blocks are read.  Series impedance is converted
  to admittance (g = r/(r^2+x^2), b = -x/(r^2+x^2)); the line-charging column is
  kept as the total shunt susceptance.  Tap ratios and phase shifts are ignored,
  out-of-service branches are dropped, and parallel branches are merged by
  summing admittances.
* ``json_grid`` -- the canonical JSON schema of this repo, mirroring
  :class:`Grid` and :class:`GroundTruthState` exactly (see ``grid_to_json``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

__all__ = [
    "Bus", "Branch", "Grid", "GroundTruthState", "CaseError",
    "parse_case", "node_degree", "grid_to_json", "load_case",
]


class CaseError(ValueError):
    """Malformed case file.  Carries a 1-based line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Bus:
    id: int
    name: str
    coords: Optional[tuple[float, float]] = None  # (lon, lat) degrees
    zone: Optional[int] = None


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    g: float      # series conductance, p.u.
    b: float      # series susceptance, p.u.
    b_sh: float   # total shunt susceptance, p.u.


@dataclass
class Grid:
    buses: list[Bus]
    branches: list[Branch]
    base_mva: float = 100.0
    ref_bus: int = 0
    # adjacency[k] lists (branch_id, is_from_end) for every branch incident to k
    adjacency: list[list[tuple[int, bool]]] = field(default_factory=list)

    def __post_init__(self):
        if not self.adjacency:
            adj = [[] for _ in self.buses]
            for br in self.branches:
                adj[br.from_bus].append((br.id, True))
                adj[br.to_bus].append((br.id, False))
            self.adjacency = adj

    @property
    def n_buses(self):
        return len(self.buses)

    @property
    def n_branches(self):
        return len(self.branches)

    def neighbors(self, bus):
        out = []
        for br_id, is_from in self.adjacency[bus]:
            br = self.branches[br_id]
            out.append(br.to_bus if is_from else br.from_bus)
        return out

    def branch_between(self, i, j):
        """Branch id connecting buses i and j, or None."""
        for br_id, is_from in self.adjacency[i]:
            br = self.branches[br_id]
            other = br.to_bus if is_from else br.from_bus
            if other == j:
                return br_id
        return None

    def connected_components(self):
        seen = [False] * self.n_buses
        comps = []
        for start in range(self.n_buses):
            if seen[start]:
                continue
            comp, stack = [], [start]
            seen[start] = True
            while stack:
                u = stack.pop()
                comp.append(u)
                for v in self.neighbors(u):
                    if not seen[v]:
                        seen[v] = True
                        stack.append(v)
            comps.append(sorted(comp))
        return comps

    @property
    def is_connected(self):
        return self.n_buses == 0 or len(self.connected_components()) == 1


@dataclass
class GroundTruthState:
    vm: list[float]   # per-bus voltage magnitude, p.u. (> 0)
    va: list[float]   # per-bus voltage angle, rad; reference bus pinned to 0

    def validate(self, grid):
        if len(self.vm) != grid.n_buses or len(self.va) != grid.n_buses:
            raise ValueError("state dimension does not match grid")
        if any(v <= 0 for v in self.vm):
            raise ValueError("voltage magnitudes must be positive")
        if abs(self.va[grid.ref_bus]) > 1e-12:
            raise ValueError("reference bus angle must be 0")


def node_degree(grid, bus):
    """Number of branches incident to ``bus`` (after parallel-branch merging)."""
    if not 0 <= bus < grid.n_buses:
        raise ValueError(f"invalid bus id {bus}")
    return len(grid.adjacency[bus])


# ---------------------------------------------------------------------------
# MATPOWER subset parser

def _strip_comment(line):
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _read_matrix(lines, start, name):
    """Read rows of ``mpc.<name> = [ ... ];`` starting at index ``start``."""
    rows = []
    i = start
    while i < len(lines):
        raw, lineno = lines[i]
        i += 1
        txt = raw.strip()
        closing = txt.endswith("];")
        if closing:
            txt = txt[:-2]
        txt = txt.rstrip(";")
        if txt:
            try:
                rows.append(([float(tok) for tok in txt.split()], lineno))
            except ValueError:
                raise CaseError(f"bad numeric row in mpc.{name}", lineno)
        if closing:
            return rows, i
    raise CaseError(f"unterminated mpc.{name} block", lines[start - 1][1])


def _parse_matpower(text):
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = _strip_comment(raw)
        if stripped.strip():
            lines.append((stripped, lineno))

    base_mva = 100.0
    bus_rows = branch_rows = None
    i = 0
    while i < len(lines):
        txt, lineno = lines[i]
        s = txt.strip()
        if s.startswith("mpc.baseMVA"):
            try:
                base_mva = float(s.split("=")[1].strip().rstrip(";"))
            except (IndexError, ValueError):
                raise CaseError("bad mpc.baseMVA", lineno)
            i += 1
        elif s.startswith("mpc.bus") and "=" in s and "[" in s:
            bus_rows, i = _read_matrix(lines, i + 1, "bus")
        elif s.startswith("mpc.branch") and "=" in s and "[" in s:
            branch_rows, i = _read_matrix(lines, i + 1, "branch")
        else:
            i += 1

    if bus_rows is None:
        raise CaseError("missing mpc.bus block")
    if branch_rows is None:
        raise CaseError("missing mpc.branch block")

    id_map, buses, vm, va, ref = {}, [], [], [], None
    for row, lineno in bus_rows:
        if len(row) < 9:
            raise CaseError("bus row needs at least 9 columns", lineno)
        ext_id = int(row[0])
        if ext_id in id_map:
            raise CaseError(f"duplicate bus id {ext_id}", lineno)
        k = len(buses)
        id_map[ext_id] = k
        zone = int(row[10]) if len(row) > 10 else None
        buses.append(Bus(id=k, name=str(ext_id), zone=zone))
        vm.append(float(row[7]))
        va.append(math.radians(float(row[8])))
        if int(row[1]) == 3 and ref is None:
            ref = k
    ref = 0 if ref is None else ref

    merged = {}
    for row, lineno in branch_rows:
        if len(row) < 4:
            raise CaseError("branch row needs at least 4 columns", lineno)
        f_ext, t_ext = int(row[0]), int(row[1])
        for ext in (f_ext, t_ext):
            if ext not in id_map:
                raise CaseError(f"branch references absent bus {ext}", lineno)
        if len(row) > 10 and int(row[10]) == 0:
            continue  # out of service
        f, t = id_map[f_ext], id_map[t_ext]
        if f == t:
            raise CaseError(f"self-loop at bus {f_ext}", lineno)
        r, x = float(row[2]), float(row[3])
        if r == 0.0 and x == 0.0:
            raise CaseError(f"zero-impedance branch {f_ext}-{t_ext}", lineno)
        z2 = r * r + x * x
        g, b = r / z2, -x / z2
        b_sh = float(row[4]) if len(row) > 4 else 0.0
        key = (min(f, t), max(f, t))
        swap = f > t
        if swap:
            f, t = t, f
        prev = merged.get(key, (0.0, 0.0, 0.0))
        merged[key] = (prev[0] + g, prev[1] + b, prev[2] + b_sh)

    branches = [Branch(id=i, from_bus=f, to_bus=t, g=g, b=b, b_sh=b_sh)
                for i, ((f, t), (g, b, b_sh)) in enumerate(sorted(merged.items()))]
    grid = Grid(buses=buses, branches=branches, base_mva=base_mva, ref_bus=ref)
    va = [a - va[ref] for a in va]
    return grid, GroundTruthState(vm=vm, va=va)


# ---------------------------------------------------------------------------
# JSON grid format

def _parse_json_grid(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"invalid JSON: {exc.msg}", exc.lineno)

    for key in ("buses", "branches", "state"):
        if key not in doc:
            raise CaseError(f"missing required key '{key}'")

    buses = []
    with_coords = 0
    for k, entry in enumerate(doc["buses"]):
        if entry.get("id") != k:
            raise CaseError(f"bus ids must be dense, expected {k}")
        coords = entry.get("coords")
        if coords is not None:
            coords = (float(coords[0]), float(coords[1]))
            with_coords += 1
        buses.append(Bus(id=k, name=str(entry.get("name", k)),
                         coords=coords, zone=entry.get("zone")))
    if with_coords not in (0, len(buses)):
        raise CaseError("coords must be present for all buses or none")

    merged = {}
    for entry in doc["branches"]:
        f, t = int(entry["from"]), int(entry["to"])
        for end in (f, t):
            if not 0 <= end < len(buses):
                raise CaseError(f"branch references absent bus {end}")
        if f == t:
            raise CaseError(f"self-loop at bus {f}")
        g, b = float(entry["g"]), float(entry["b"])
        if g == 0.0 and b == 0.0:
            raise CaseError(f"zero-admittance branch {f}-{t}")
        b_sh = float(entry.get("b_sh", 0.0))
        key = (min(f, t), max(f, t))
        prev = merged.get(key, (0.0, 0.0, 0.0))
        merged[key] = (prev[0] + g, prev[1] + b, prev[2] + b_sh)
    branches = [Branch(id=i, from_bus=f, to_bus=t, g=g, b=b, b_sh=b_sh)
                for i, ((f, t), (g, b, b_sh)) in enumerate(sorted(merged.items()))]

    ref = int(doc.get("reference_bus", 0))
    grid = Grid(buses=buses, branches=branches,
                base_mva=float(doc.get("base_mva", 100.0)), ref_bus=ref)
    vm = [float(v) for v in doc["state"]["vm"]]
    va = [float(v) for v in doc["state"]["va"]]
    state = GroundTruthState(vm=vm, va=[a - va[ref] for a in va])
    state.validate(grid)
    return grid, state


def grid_to_json(grid, state):
    """Serialize to the canonical json_grid schema (round-trips exactly)."""
    doc = {
        "base_mva": grid.base_mva,
        "reference_bus": grid.ref_bus,
        "buses": [
            {"id": b.id, "name": b.name,
             **({"coords": list(b.coords)} if b.coords is not None else {}),
             **({"zone": b.zone} if b.zone is not None else {})}
            for b in grid.buses
        ],
        "branches": [
            {"id": br.id, "from": br.from_bus, "to": br.to_bus,
             "g": br.g, "b": br.b, "b_sh": br.b_sh}
            for br in grid.branches
        ],
        "state": {"vm": list(state.vm), "va": list(state.va)},
    }
    return json.dumps(doc, indent=1)


def parse_case(text, fmt):
    """Parse a case into (Grid, GroundTruthState).

    ``fmt`` is ``"matpower_subset"`` or ``"json_grid"``.  Buses are re-indexed
    densely, parallel branches merged, and the ground-truth angles shifted so
    the reference bus sits at 0.
    """
    if fmt == "matpower_subset":
        return _parse_matpower(text)
    if fmt == "json_grid":
        return _parse_json_grid(text)
    raise ValueError(f"unknown case format {fmt!r}")


def load_case(path):
    """Parse a case file, inferring the format from the extension."""
    path = str(path)
    with open(path) as fh:
        text = fh.read()
    fmt = "json_grid" if path.endswith(".json") else "matpower_subset"
    return parse_case(text, fmt)
