import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridshield.sensing import make_profile
from gridshield.vuln import (bag_vi, classify_bags, line_vi, tree_decompose,
                             validate_decomposition, vi_model)
from gridshield.vuln.treedec import TreeDecomposition
from conftest import load_bundled, toy_grid


def random_connected_grid(rng, n, extra):
    edges = set()
    order = rng.permutation(n)
    for k in range(1, n):
        a = int(order[k])
        b = int(order[int(rng.integers(0, k))])
        edges.add((min(a, b), max(a, b)))
    for _ in range(extra):
        a, b = rng.integers(0, n, 2)
        if a != b:
            edges.add((min(int(a), int(b)), max(int(a), int(b))))
    return toy_grid(sorted(edges), n_bus=n)


@pytest.mark.parametrize("heuristic", ["min_degree", "min_fill"])
def test_path_width_one(path6_grid, heuristic):
    grid, _ = path6_grid
    td = tree_decompose(grid, heuristic)
    validate_decomposition(grid, td)
    assert td.width == 1


def test_cycle_width_two():
    for n in (3, 5, 8):
        grid, _ = toy_grid([(k, (k + 1) % n) for k in range(n)])
        td = tree_decompose(grid)
        validate_decomposition(grid, td)
        assert td.width == 2


def test_random_graphs_validate(rng):
    for _ in range(60):
        n = int(rng.integers(3, 24))
        grid, _ = random_connected_grid(rng, n, int(rng.integers(0, 2 * n)))
        for heuristic in ("min_degree", "min_fill"):
            td = tree_decompose(grid, heuristic)
            validate_decomposition(grid, td)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=2, max_value=18), st.integers(min_value=0, max_value=10**6))
def test_property_decomposition_valid(n, seed):
    rng = np.random.default_rng(seed)
    grid, _ = random_connected_grid(rng, n, int(rng.integers(0, n)))
    td = tree_decompose(grid)
    validate_decomposition(grid, td)


def test_validator_catches_bad_decomposition(path6_grid):
    grid, _ = path6_grid
    bad = TreeDecomposition(bags=[frozenset({0, 1}), frozenset({2, 3}),
                                  frozenset({4, 5})],
                            tree=[(0, 1), (1, 2)], width=1)
    with pytest.raises(AssertionError, match="edge coverage"):
        validate_decomposition(grid, bad)
    disjoint_holder = TreeDecomposition(
        bags=[frozenset({0, 1}), frozenset({1, 2}), frozenset({2, 3}),
              frozenset({3, 4}), frozenset({4, 5}), frozenset({5, 0})],
        tree=[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)], width=1)
    with pytest.raises(AssertionError, match="running intersection"):
        validate_decomposition(grid, disjoint_holder)


def test_bag_classification_path():
    grid, _ = toy_grid([(k, k + 1) for k in range(4)])  # path a-b-c-d-e
    bags = [frozenset({k, k + 1}) for k in range(4)]
    td = TreeDecomposition(bags=bags, tree=[(k, k + 1) for k in range(3)],
                           width=1)
    validate_decomposition(grid, td)
    cls = classify_bags(td, {0})
    assert cls.infected == [0]
    assert cls.link == [1]
    assert cls.safe == [2, 3]
    assert cls.infected_subtree
    assert cls.qualifying == [(1, 0)]
    # tree-property assertions: no shared nodes between safe and infected
    inf_nodes = set().union(*(td.bags[t] for t in cls.infected))
    for t in cls.safe:
        assert not (td.bags[t] & inf_nodes)
    # outer link nodes of link bags do not meet infected bags
    for t, t_inf in cls.qualifying:
        outer = td.bags[t] - td.bags[t_inf]
        assert not (outer & inf_nodes)


def test_bag_vi_equals_line_vi_on_coinciding_partition():
    # path a-b-c-d-e with bags {a,b},{b,c},{c,d},{d,e}: attacking {b} with
    # link bag {c,d} reproduces exactly the local boundary of line (b,c) in
    # the b->c direction
    grid, state = toy_grid([(k, k + 1) for k in range(4)])
    model = vi_model(grid, make_profile(grid, "full"))
    bags = [frozenset({k, k + 1}) for k in range(4)]
    td = TreeDecomposition(bags=bags, tree=[(k, k + 1) for k in range(3)],
                           width=1)
    results = bag_vi(model, td, {0, 1})
    # infected bags {0,1},{1,2}; qualifying link bag {2,3}
    assert len(results) == 1
    res = results[0]
    line = line_vi(model, 1, "fwd")  # branch (1,2), attack at 1
    assert res.alpha == pytest.approx(line.alpha_lp, abs=1e-6)
    lb_cols = set()
    from gridshield.vuln.indices import local_boundary
    lb = local_boundary(model, 1, "fwd")
    assert set(res.x_link) == set(lb.x_cols)
    assert set(res.m_adhesion) == set(lb.m_def)
    assert set(res.m_outer_link) == set(lb.m_ok)


def test_bag_vi_unsupported_cases(case14):
    grid, _ = case14
    model = vi_model(grid, make_profile(grid, "full"))
    td = tree_decompose(grid)
    validate_decomposition(grid, td)
    with pytest.raises(ValueError, match="empty"):
        bag_vi(model, td, set())


def test_bag_vi_on_decomposed_case14(case14):
    # bus 6 keeps the adhesion measurement set small enough to enumerate
    grid, state = case14
    model = vi_model(grid, make_profile(grid, "full"))
    td = tree_decompose(grid)
    cls = classify_bags(td, {6})
    assert cls.infected_subtree and cls.qualifying
    results = bag_vi(model, td, {6})
    for r in results:
        assert np.isfinite(r.alpha) and r.alpha >= 0.0
        assert r.method == "enumeration"


def test_bag_vi_empty_adhesion_gives_zero():
    # no injections and no flows on the adhesion line: nothing defective
    from gridshield.sensing import Measurement, MeasurementProfile, build_sensing_model
    grid, _ = toy_grid([(0, 1), (1, 2), (2, 3)])
    profile = MeasurementProfile(
        [Measurement("vmag2", k) for k in range(4)]
        + [Measurement("pflow", 2, "fwd"), Measurement("qflow", 2, "fwd")])
    model = build_sensing_model(grid, profile, row_norm_mode="vi")
    bags = [frozenset({k, k + 1}) for k in range(3)]
    td = TreeDecomposition(bags=bags, tree=[(0, 1), (1, 2)], width=1)
    results = bag_vi(model, td, {0})
    assert results[0].alpha == 0.0
