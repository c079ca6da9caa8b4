import itertools

import numpy as np
import pytest

from gridshield.solver import (BigMTooSmall, LcpSystem, default_big_m,
                               inner_lp_value, solve_lcp)


def enum_alpha(system):
    """Brute-force sign-vector enumeration (the oracle)."""
    nd = system.E.shape[1]
    best = 0.0
    for signs in itertools.product([-1.0, 1.0], repeat=nd):
        v, _ = inner_lp_value(system, np.array(signs))
        best = max(best, v)
    return best


def test_empty_defective_set_gives_zero():
    sys_ = LcpSystem(C=np.ones((2, 3)), E=np.zeros((2, 0)))
    for method in ("mip", "lcp"):
        assert solve_lcp(sys_, method=method).info["alpha"] == 0.0


def test_single_cancelable_measurement():
    # one defending row equal to the negative of the defective row: h = xi
    # cancels exactly, so alpha = 1
    C = np.array([[1.0], [2.0]])
    E = -C.copy()
    sys_ = LcpSystem(C=C, E=E)
    for method in ("mip", "lcp"):
        assert solve_lcp(sys_, method=method).info["alpha"] == pytest.approx(1.0, abs=1e-7)


def test_three_measurement_toy_matches_enumeration(rng):
    C = rng.normal(size=(2, 3))
    E = rng.normal(size=(2, 3))
    sys_ = LcpSystem(C=C, E=E)
    ref = enum_alpha(sys_)
    for method in ("mip", "lcp"):
        got = solve_lcp(sys_, method=method).info["alpha"]
        assert got == pytest.approx(ref, abs=1e-6)


@pytest.mark.parametrize("method", ["mip", "lcp"])
def test_random_instances_match_enumeration(rng, method):
    for _ in range(6):
        nx = int(rng.integers(2, 5))
        nk = int(rng.integers(nx + 1, 8))
        nd = int(rng.integers(1, 5))
        C = rng.normal(size=(nx, nk))
        E = rng.normal(size=(nx, nd))
        sys_ = LcpSystem(C=C, E=E)
        ref = enum_alpha(sys_)
        got = solve_lcp(sys_, method=method).info["alpha"]
        assert got == pytest.approx(ref, abs=1e-6)


def test_cone_column_instances_match_enumeration(rng):
    for _ in range(3):
        C = rng.normal(size=(4, 7))
        E = rng.normal(size=(4, 3))
        W = rng.normal(size=(4, 2))
        sys_ = LcpSystem(C=C, E=E, W=W)
        ref = enum_alpha(sys_)
        for method in ("mip", "lcp"):
            got = solve_lcp(sys_, method=method).info["alpha"]
            assert got == pytest.approx(ref, abs=1e-6)


def test_alpha_cap_does_not_change_answer(rng):
    C = rng.normal(size=(3, 6))
    E = rng.normal(size=(3, 2))
    ref = enum_alpha(LcpSystem(C=C, E=E))
    capped = LcpSystem(C=C, E=E, alpha_cap=ref * 3.0)
    assert solve_lcp(capped, method="lcp").info["alpha"] == pytest.approx(ref, abs=1e-6)


def test_big_m_certificate_fires():
    # inner equality multiplier is huge when the defending column is tiny
    C = np.array([[1e-5]])
    E = np.array([[1.0]])
    sys_ = LcpSystem(C=C, E=E)
    with pytest.raises(BigMTooSmall):
        solve_lcp(sys_, big_m=1.0, method="mip")
    # generous big-M succeeds; alpha = 1e5 (h must cancel a unit column)
    got = solve_lcp(sys_, big_m=1e7, method="mip").info["alpha"]
    assert got == pytest.approx(1e5, rel=1e-6)


def test_default_big_m_scales_with_columns():
    sys_ = LcpSystem(C=np.array([[2.0, -3.0]]), E=np.array([[4.0]]))
    assert default_big_m(sys_) == pytest.approx(10.0 * (1.0 + 4.0))


def test_worst_case_xi_reported(rng):
    C = rng.normal(size=(3, 5))
    E = rng.normal(size=(3, 2))
    sys_ = LcpSystem(C=C, E=E)
    sol = solve_lcp(sys_, method="lcp")
    xi = sol.info["xi"]
    assert set(np.unique(xi)) <= {-1.0, 1.0}
    v, _ = inner_lp_value(sys_, xi)
    assert v == pytest.approx(sol.info["alpha"], abs=1e-6)
