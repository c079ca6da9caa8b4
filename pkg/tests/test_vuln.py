import numpy as np
import pytest

from gridshield.sensing import (Measurement, MeasurementProfile,
                                build_sensing_model, evaluate, lift_state,
                                make_profile)
from gridshield.solver import LcpSystem, inner_lp_value
from gridshield.vuln import (build_partition, classify, line_vi, line_vi_lp,
                             line_vi_socp, local_boundary, local_incoherence,
                             lower_eigenvalue, mutual_incoherence, vi_model)
from gridshield.vuln.indices import LineVIResult, _submatrices
from conftest import load_bundled, toy_grid


@pytest.fixture(scope="module")
def vi14():
    grid, state = load_bundled("case14.m")
    return grid, state, vi_model(grid, make_profile(grid, "full"))


# --- partitions --------------------------------------------------------------

def test_partition_leaf_attack_on_path(path6_grid):
    grid, _ = path6_grid
    model = build_sensing_model(grid, make_profile(grid, "full"))
    part = build_partition(model, {0})
    assert part.attacked_buses == {0}
    assert part.inner_boundary == {1}
    assert part.outer_boundary == {2}
    assert part.safe_buses == {3, 4, 5}
    assert not part.enlargement_log


def test_partition_enlarges_shared_neighbor():
    # two attacked buses both adjacent to bus 1
    grid, _ = toy_grid([(0, 1), (1, 2), (1, 3), (3, 4), (4, 5), (5, 6), (6, 3)])
    model = build_sensing_model(grid, make_profile(grid, "full"))
    part = build_partition(model, {0, 2})
    assert 1 in part.attacked_buses
    assert part.enlargement_log


def test_partition_whole_grid_rejected(triangle_grid):
    grid, _ = triangle_grid
    model = build_sensing_model(grid, make_profile(grid, "full"))
    with pytest.raises(ValueError, match="whole grid|safe region"):
        build_partition(model, {0, 1, 2})


def test_partition_block_structure(case118):
    grid, _ = case118
    model = build_sensing_model(grid, make_profile(grid, "full"))
    part = build_partition(model, {5})
    A = model.A
    sets = {"sf": part.m_sf, "bo": part.m_bo, "bi": part.m_bi, "at": part.m_at}
    xs = {"sf": part.x_sf, "bd": part.x_bd, "at": part.x_at}
    assert (part.attacked_buses | part.inner_boundary | part.outer_boundary
            | part.safe_buses) == set(range(grid.n_buses))
    assert xs["sf"] | xs["bd"] | xs["at"] == set(range(model.n_x))

    def block_is_zero(rows, cols):
        if not rows or not cols:
            return True
        sub = A[sorted(rows)][:, sorted(cols)]
        return sub.nnz == 0 or np.abs(sub.data).max() == 0.0

    # zero blocks mandated by the region structure
    assert block_is_zero(sets["sf"], xs["at"])
    assert block_is_zero(sets["bo"], xs["at"])
    assert block_is_zero(sets["bo"], xs["sf"])
    assert block_is_zero(sets["bi"], xs["sf"])
    assert block_is_zero(sets["at"], xs["sf"])
    assert block_is_zero(sets["at"], xs["bd"])


# --- local boundaries ---------------------------------------------------------

def test_local_boundary_no_defective_rows(path6_grid):
    grid, _ = path6_grid
    profile = MeasurementProfile(
        [Measurement("vmag2", k) for k in range(grid.n_buses)]
        + [Measurement("pflow", l, "fwd") for l in range(1, grid.n_branches)])
    model = build_sensing_model(grid, profile, row_norm_mode="vi")
    # branch 0 carries no flow rows; bus 1 has no injections
    lb = local_boundary(model, 0, "fwd")
    assert lb.m_def == ()
    res = line_vi_lp(model, 0, "fwd")
    assert res.alpha_lp == 0.0


def test_local_boundary_full_profile_def_rows(vi14):
    grid, state, model = vi14
    # pick a branch whose inner end has degree >= 3
    br = next(b for b in grid.branches
              if len(grid.adjacency[b.to_bus]) >= 3)
    lb = local_boundary(model, br.id, "fwd")
    kinds = sorted((model.rows[i].kind, model.rows[i].direction)
                   for i in lb.m_def)
    assert kinds == sorted([("pflow", "fwd"), ("pflow", "rev"),
                            ("qflow", "fwd"), ("qflow", "rev"),
                            ("pinj", None), ("qinj", None)])
    # defective rows touch the attacked line's columns or the inner bus
    for i in lb.m_def:
        m = model.rows[i]
        assert (m.obj == br.id if m.kind.endswith("flow")
                else m.obj == br.to_bus)


def test_local_boundary_reverse_swaps_roles(vi14):
    grid, state, model = vi14
    lb_f = local_boundary(model, 4, "fwd")
    lb_r = local_boundary(model, 4, "rev")
    assert lb_f.bus_attacked == lb_r.bus_inner
    assert lb_f.bus_inner == lb_r.bus_attacked


def test_vi_requires_vi_mode(case14):
    grid, _ = case14
    est = build_sensing_model(grid, make_profile(grid, "full"))
    with pytest.raises(ValueError, match="vi-normalized"):
        local_boundary(est, 0, "fwd")


# --- line vulnerability index -------------------------------------------------

def test_line_vi_exact_cancellation():
    # degree-2 inner bus j: one defending flow row mirrors the defective one
    grid, _ = toy_grid([(0, 1), (1, 2)], g=1.0, b=-2.0)
    profile = MeasurementProfile([
        Measurement("pflow", 0, "rev"),   # defective: measured at inner bus 1
        Measurement("pflow", 1, "fwd"),   # defending: depends on mg1, re1, im1
        Measurement("vmag2", 1), Measurement("vmag2", 2),
        Measurement("qflow", 1, "fwd"),
    ])
    model = build_sensing_model(grid, profile, row_norm_mode="vi")
    res = line_vi_lp(model, 0, "fwd")
    assert np.isfinite(res.alpha_lp)
    # oracle: enumerate explicitly via the inner LP
    lb = local_boundary(model, 0, "fwd")
    C, E = _submatrices(model, lb)
    vals = [inner_lp_value(LcpSystem(C=C, E=E), np.array([s]))[0]
            for s in (-1.0, 1.0)]
    assert res.alpha_lp == pytest.approx(max(vals), abs=1e-7)


def test_line_vi_methods_agree(vi14, rng):
    grid, state, model = vi14
    picks = rng.choice(grid.n_branches, size=6, replace=False)
    for l in picks:
        d = "fwd" if rng.uniform() < 0.5 else "rev"
        a_enum = line_vi(model, int(l), d, "lp", method="enumeration").alpha_lp
        a_lcp = line_vi(model, int(l), d, "lp", method="lcp").alpha_lp
        a_mip = line_vi(model, int(l), d, "lp", method="mip").alpha_lp
        assert a_lcp == pytest.approx(a_enum, abs=1e-6)
        assert a_mip == pytest.approx(a_enum, abs=1e-6)


def test_hypercube_relaxation_never_exceeds(vi14, rng):
    # interior xi samples never beat the sign-vector optimum
    grid, state, model = vi14
    for l in rng.choice(grid.n_branches, size=4, replace=False):
        lb = local_boundary(model, int(l), "fwd")
        C, E = _submatrices(model, lb)
        if E.shape[1] == 0:
            continue
        sys_ = LcpSystem(C=C, E=E)
        res = line_vi(model, int(l), "fwd", "lp", method="enumeration")
        if not np.isfinite(res.alpha_lp):
            continue
        for _ in range(10):
            xi = rng.uniform(-1.0, 1.0, E.shape[1])
            val, _ = inner_lp_value(sys_, xi)
            assert val <= res.alpha_lp + 1e-6


def test_soc_never_exceeds_lp(vi14):
    grid, state, model = vi14
    x0 = lift_state(model, state)
    for l in range(0, grid.n_branches, 4):
        for d in ("fwd", "rev"):
            a_lp = line_vi(model, l, d, "lp").alpha_lp
            a_soc = line_vi(model, l, d, "socp", x_lifted=x0).alpha_socp
            assert a_soc <= a_lp + 1e-7


def test_incoherence_bounds_alpha(vi14):
    grid, state, model = vi14
    for l in range(0, grid.n_branches, 3):
        for d in ("fwd", "rev"):
            a = line_vi(model, l, d, "lp").alpha_lp
            rho = local_incoherence(model, l, d)
            assert rho >= a - 1e-7


def test_mutual_incoherence_orthonormal_cases():
    class Stub:
        pass
    import scipy.sparse as sp
    m = Stub()
    m.A = sp.csr_matrix(np.vstack([np.eye(3), np.zeros((1, 3))]))
    m.n_m = 4
    assert mutual_incoherence(m, {3}) == pytest.approx(0.0)
    m2 = Stub()
    m2.A = sp.csr_matrix(np.vstack([np.eye(3), np.eye(3)[1]]))
    m2.n_m = 4
    assert mutual_incoherence(m2, {3}) == pytest.approx(1.0)


def test_mutual_incoherence_rank_deficiency_reported():
    class Stub:
        pass
    import scipy.sparse as sp
    m = Stub()
    m.A = sp.csr_matrix(np.vstack([np.eye(3)[:2], np.eye(3)[2]]))
    m.n_m = 3
    with pytest.raises(ValueError, match="deficient"):
        mutual_incoherence(m, {2})


# --- lower eigenvalue ---------------------------------------------------------

def test_lower_eigenvalue_matches_dense_oracle(case30):
    grid, _ = case30
    model = build_sensing_model(grid, make_profile(grid, "full"))
    part = build_partition(model, {7})
    got = lower_eigenvalue(model, part)
    A = model.A.toarray()
    m_bd = sorted(part.m_bd)
    x_bd = sorted(part.x_bd)
    I = np.zeros((len(m_bd), len(part.m_bi)))
    for c, r in enumerate(sorted(part.m_bi)):
        I[m_bd.index(r), c] = 1.0
    Q = np.hstack([A[np.ix_(m_bd, x_bd)], I])
    cands = [np.linalg.eigvalsh(Q.T @ Q)[0]]
    B = A[np.ix_(sorted(part.m_bo), x_bd)]
    cands.append(np.linalg.eigvalsh(B.T @ B)[0])
    S = A[np.ix_(sorted(part.m_sf), sorted(part.x_sf))]
    cands.append(np.linalg.eigvalsh(S.T @ S)[0])
    assert got == pytest.approx(min(cands), abs=1e-9)


def test_lower_eigenvalue_zero_when_deficient(path6_grid):
    grid, _ = path6_grid
    # only voltage magnitudes: safe block cannot identify branch variables
    profile = MeasurementProfile(
        [Measurement("vmag2", k) for k in range(grid.n_buses)]
        + [Measurement("pinj", k) for k in range(grid.n_buses)])
    model = build_sensing_model(grid, profile)
    part = build_partition(model, {0})
    assert lower_eigenvalue(model, part) == pytest.approx(0.0, abs=1e-12)


# --- classification -----------------------------------------------------------

def _mk_results(grid, alpha_map):
    out = {}
    for l in range(grid.n_branches):
        for d in ("fwd", "rev"):
            out[(l, d)] = LineVIResult(branch=l, direction=d,
                                       alpha_lp=alpha_map.get((l, d), 0.0))
    return out


def test_classify_all_robust(path6_grid):
    grid, _ = path6_grid
    rep = classify(grid, _mk_results(grid, {}))
    assert not rep.v_line.any() and not rep.c_line.any()
    assert not rep.c_bus.any()
    assert rep.critical_index.sum() == 0
    assert all(0.0 <= v <= 1.0 for v in rep.fractions.values())


def test_classify_directed_chain():
    grid, _ = toy_grid([(0, 1), (1, 2)])
    # vulnerable outward along 0 -> 1 -> 2 only
    rep = classify(grid, _mk_results(grid, {(0, "fwd"): 1.5, (1, "fwd"): 1.2}))
    assert rep.critical_index[0] == 2
    assert rep.critical_index[1] == 1
    assert rep.critical_index[2] == 0
    assert rep.c_bus[0] and rep.c_bus[1] and not rep.c_bus[2]
    # line 1 is critical at end 0?  its ends are 1 and 2; line 0 outward from
    # bus 1 is direction rev (1 -> 0), alpha 0, so line 1 is not critical;
    # line 0's end bus 1 has line 1 vulnerable outward (1 -> 2), so critical
    assert rep.c_line[0] and not rep.c_line[1]


def test_classify_relabel_invariance(rng):
    edges = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]
    grid, _ = toy_grid(edges)
    model = vi_model(grid, make_profile(grid, "full"))
    res = {}
    for l in range(grid.n_branches):
        for d in ("fwd", "rev"):
            res[(l, d)] = line_vi(model, l, d, "lp")
    rep = classify(grid, res)

    perm = [2, 0, 3, 1]  # bus relabeling
    edges2 = sorted(tuple(sorted((perm[a], perm[b]))) for a, b in edges)
    grid2, _ = toy_grid(edges2)
    model2 = vi_model(grid2, make_profile(grid2, "full"))
    res2 = {}
    for l in range(grid2.n_branches):
        for d in ("fwd", "rev"):
            res2[(l, d)] = line_vi(model2, l, d, "lp")
    rep2 = classify(grid2, res2)
    for k in range(4):
        assert rep.c_bus[k] == rep2.c_bus[perm[k]]
        assert rep.critical_index[k] == rep2.critical_index[perm[k]]
    assert sorted(rep.v_line) == sorted(rep2.v_line)
    assert rep.fractions == rep2.fractions
