import numpy as np
import pytest
import scipy.sparse as sp

from gridshield.estimation import (Step1Config, branch_angle_diffs,
                                   clean_and_resolve, detected_support,
                                   huber_objective, reconstruct, run_pipeline,
                                   step1, step1_objective, step2_error_bound,
                                   step2_phase)
from gridshield.sensing import (Measurement, build_sensing_model, evaluate,
                                lift_state, make_profile)
from gridshield.solver import ConicProblem, solve as conic_solve
from gridshield.vuln import mutual_incoherence
from conftest import random_state, toy_grid


@pytest.fixture(scope="module")
def small_model(case14=None):
    from conftest import load_bundled
    grid, state = load_bundled("case14.m")
    model = build_sensing_model(grid, make_profile(grid, "full"))
    return grid, state, model


def v_complex(state):
    return np.asarray(state.vm) * np.exp(1j * np.asarray(state.va))


# The cone-constrained mixed-objective program has its cones exactly active
# with vanishing multipliers at lifted physical states, so a pure interior
# method floors near sqrt(gap); the pipeline's post-detection least-squares
# resolve restores machine accuracy (exercised by the acceptance suite).
@pytest.mark.parametrize("variant,x_tol",
                         [("l1", 1e-8), ("l1_soc", 1e-8),
                          ("l2l1", 1e-8), ("l2l1_soc", 2e-5)])
def test_noiseless_exact_recovery(small_model, variant, x_tol):
    grid, state, model = small_model
    y = evaluate(model, state)
    x_true = lift_state(model, state)
    cfg = Step1Config(variant=variant)
    if variant.startswith("l2l1"):
        cfg = Step1Config(variant=variant, lambda_=2e-3, solver_tol=1e-10)
    x_hat, b_hat, sol = step1(model, y, cfg)
    assert sol.status == "optimal"
    assert np.abs(x_hat - x_true).max() < x_tol
    assert np.abs(b_hat).max() < 1e-4
    assert not detected_support(b_hat, 0.01)


def test_l1_exact_fit_at_solution(small_model, rng):
    grid, state, model = small_model
    y = evaluate(model, state)
    y[3] += 2.0
    x_hat, b_hat, _ = step1(model, y, Step1Config(variant="l1"))
    resid = y - model.A @ x_hat - b_hat
    assert np.abs(resid).max() < 1e-6


def test_grc_single_corruption_recovery():
    # 4-bus full-profile model, one corrupted measurement with rho(J) < 1
    grid, state = toy_grid([(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)],
                           vm=[1.0, 1.01, 0.99, 1.02],
                           va=[0.0, 0.05, -0.04, 0.02])
    model = build_sensing_model(grid, make_profile(grid, "full"))
    y = evaluate(model, state)
    x_true = lift_state(model, state)
    j = {5}
    rho = mutual_incoherence(model, j)
    assert rho < 1.0
    y2 = y.copy()
    y2[5] += 4.0
    x_hat, b_hat, _ = step1(model, y2, Step1Config(variant="l1"))
    assert detected_support(b_hat, 0.01) == j
    assert np.abs(x_hat - x_true).max() < 1e-7


def test_soft_threshold_matches_l2l1_on_diagonal_problems(rng):
    # pure denoising: min 1/(2n)||y - b||^2 + lam ||b||_1
    for _ in range(100):
        n = int(rng.integers(1, 6))
        y = rng.normal(0, 3, n)
        lam = float(rng.uniform(0.05, 2.0))
        P = sp.diags(np.concatenate([np.zeros(2 * n), np.full(n, 1.0 / n)]))
        A_eq = sp.hstack([sp.identity(n), -sp.identity(n), sp.identity(n)],
                         format="csr")
        lb = np.concatenate([np.zeros(2 * n), np.full(n, -np.inf)])
        prob = ConicProblem(n=3 * n, c=np.concatenate([np.full(2 * n, lam),
                                                       np.zeros(n)]),
                            P=P, A_eq=A_eq, b_eq=y, lb=lb)
        sol = conic_solve(prob)
        b = sol.x[:n] - sol.x[n:2 * n]
        expected = np.sign(y) * np.maximum(0.0, np.abs(y) - n * lam)
        assert np.abs(b - expected).max() < 1e-6


def test_huber_objective_values(small_model):
    grid, state, model = small_model
    y = evaluate(model, state)
    x_true = lift_state(model, state)
    assert huber_objective(model, y, x_true, 0.5) == 0.0
    psi = 0.4
    y2 = y.copy()
    y2[0] += psi / 2.0
    assert huber_objective(model, y2, x_true, psi) == pytest.approx(
        (psi / 2.0) ** 2 / (2 * model.n_m))
    y3 = y.copy()
    y3[0] += 2 * psi
    assert huber_objective(model, y3, x_true, psi) == pytest.approx(
        1.5 * psi ** 2 / model.n_m)


def test_huber_equivalence_at_l2l1_optimum(small_model, rng):
    grid, state, model = small_model
    cfg = Step1Config(variant="l2l1", lambda_=8e-4 / model.n_m)
    for _ in range(5):
        st = random_state(grid, rng)
        y = evaluate(model, st) + rng.normal(0, 0.01, model.n_m)
        y[int(rng.integers(model.n_m))] += 3.0
        x_hat, b_hat, _ = step1(model, y, cfg)
        obj = step1_objective(model, y, x_hat, b_hat, cfg)
        hub = huber_objective(model, y, x_hat,
                              model.n_m * cfg.effective_lambda(model.n_m))
        assert abs(obj - hub) <= 1e-7 * max(1.0, abs(obj))


def test_l2l1_kkt_stationarity(small_model, rng):
    grid, state, model = small_model
    tol = 1e-8
    cfg = Step1Config(variant="l2l1", solver_tol=tol)
    y = evaluate(model, state) + rng.normal(0, 0.005, model.n_m)
    x_hat, b_hat, _ = step1(model, y, cfg)
    grad = model.A.T @ (y - model.A @ x_hat - b_hat) / model.n_m
    assert np.abs(grad).max() <= 10 * tol


def test_soc_constraints_satisfied(small_model, rng):
    grid, state, model = small_model
    y = evaluate(model, state) + rng.normal(0, 0.005, model.n_m)
    x_hat, _, _ = step1(model, y, Step1Config(variant="l2l1_soc"))
    for (mi, mj, re, im) in model.cone_index_lists():
        slack = x_hat[mi] * x_hat[mj] - x_hat[re] ** 2 - x_hat[im] ** 2
        assert slack >= -1e-8
        assert x_hat[mi] >= -1e-10


def test_clean_and_resolve_nothing_detected(small_model):
    grid, state, model = small_model
    y = evaluate(model, state)
    x_hat, unobs = clean_and_resolve(model, y, set())
    assert not unobs
    assert np.abs(x_hat - lift_state(model, state)).max() < 1e-9


def test_clean_and_resolve_exact_after_removal(small_model):
    grid, state, model = small_model
    y = evaluate(model, state)
    bad = {0, 7, 30}
    y2 = y.copy()
    for i in bad:
        y2[i] += 5.0
    x_hat, unobs = clean_and_resolve(model, y2, bad)
    assert not unobs
    assert np.abs(x_hat - lift_state(model, state)).max() < 1e-9


def test_clean_and_resolve_flags_unobservable():
    # leaf bus 0 observed only through vmag2(0); removing it kills the column
    grid, state = toy_grid([(0, 1), (1, 2)])
    prof_rows = [Measurement("vmag2", k) for k in range(3)]
    prof_rows += [Measurement("pflow", l, "fwd") for l in (0, 1)]
    prof_rows += [Measurement("qflow", l, "fwd") for l in (0, 1)]
    from gridshield.sensing import MeasurementProfile
    model = build_sensing_model(grid, MeasurementProfile(prof_rows))
    y = evaluate(model, state)
    x_hat, unobs = clean_and_resolve(model, y, {0})
    assert unobs  # mg column of bus 0 is gone from the kept rows


def test_step2_tree_exact():
    grid, state = toy_grid([(0, 1), (1, 2), (2, 3)],
                           va=[0.0, 0.1, -0.05, 0.2])
    model = build_sensing_model(grid, make_profile(grid, "full"))
    x = lift_state(model, state)
    va, excluded = step2_phase(grid, model, x)
    assert not excluded
    assert np.abs(np.asarray(va) - np.asarray(state.va)).max() < 1e-12


def test_step2_triangle_least_squares():
    grid, state = toy_grid([(0, 1), (1, 2), (2, 0)])
    model = build_sensing_model(grid, make_profile(grid, "full"))
    x = lift_state(model, state)
    # hand-set consistent differences 0.1, 0.1, -0.2 around the cycle
    for l, d in zip(range(3), (0.1, 0.1, -0.2)):
        x[model.re_col[l]] = np.cos(d)
        x[model.im_col[l]] = np.sin(d)
    va, _ = step2_phase(grid, model, x)
    expect = np.array([0.0, -0.1, -0.2])
    assert np.abs(va - (expect - expect[grid.ref_bus])).max() < 1e-10


def test_step2_l2l1_beats_ls_on_gross_error():
    # On a bare 3-cycle the l1 residual term is constant along the trade
    # (cycle residuals sum to a constant), so the robust solve coincides with
    # least squares there; a K4 graph has the redundancy that lets the mixed
    # objective localize one gross difference error.
    edges = [(0, 1), (1, 2), (2, 3), (0, 3), (0, 2), (1, 3)]
    grid, state = toy_grid(edges, va=[0.0, 0.08, -0.06, 0.03])
    model = build_sensing_model(grid, make_profile(grid, "full"))
    x = lift_state(model, state)
    l = 1
    x[model.re_col[l]] = np.cos(1.2)
    x[model.im_col[l]] = np.sin(1.2)
    va_ls, _ = step2_phase(grid, model, x, variant="ls_closed_form")
    va_rob, _ = step2_phase(grid, model, x, variant="l2l1", lambda2=0.1)
    true = np.asarray(state.va)
    assert np.abs(va_rob - true).max() < np.abs(va_ls - true).max()


def test_step2_excluded_zero_branch():
    grid, state = toy_grid([(0, 1), (1, 2)])
    model = build_sensing_model(grid, make_profile(grid, "full"))
    x = lift_state(model, state)
    x[model.re_col[1]] = 0.0
    x[model.im_col[1]] = 0.0
    _, diffs, excluded = branch_angle_diffs(model, x)
    assert excluded == [1]
    va, dropped = step2_phase(grid, model, x)
    assert dropped == [1]


def test_reconstruct_values_and_clamp(small_model):
    grid, state, model = small_model
    x = lift_state(model, state)
    x[0] = 1.1025
    vm, v, clamped = reconstruct(x, model, np.zeros(grid.n_buses))
    assert vm[0] == pytest.approx(1.05)
    assert clamped == 0
    x[0] = -1e-9
    vm, _, clamped = reconstruct(x, model, np.zeros(grid.n_buses))
    assert vm[0] == 0.0 and clamped == 1


def test_pipeline_end_to_end_noiseless(small_model):
    grid, state, model = small_model
    y = evaluate(model, state)
    res = run_pipeline(model, y, Step1Config(variant="l1"))
    err = np.abs(v_complex(state) - res.v_hat).max()
    assert err < 1e-8


def test_error_bound_zero_at_truth(small_model):
    grid, state, model = small_model
    x = lift_state(model, state)
    bound, partial = step2_error_bound(grid, model, x, x)
    assert not partial
    assert np.abs(bound).max() < 1e-12


def test_error_bound_dominates_actual(small_model, rng):
    grid, state, model = small_model
    x_true = lift_state(model, state)
    va_true = np.asarray(state.va)
    for _ in range(20):
        x_hat = x_true.copy()
        idx = model.re_col[model.basis_branches()]
        pert = rng.normal(0, 1e-3, model.n_x)
        x_hat += pert
        bound, partial = step2_error_bound(grid, model, x_true, x_hat)
        assert not partial
        va_hat, _ = step2_phase(grid, model, x_hat)
        err = np.abs(va_hat - va_true)
        assert np.all(err <= bound + 1e-9)


def test_error_bound_invariant_to_angle_shift(small_model, rng):
    grid, state, model = small_model
    x_true = lift_state(model, state)
    x_hat = x_true + rng.normal(0, 1e-3, model.n_x)
    b1, _ = step2_error_bound(grid, model, x_true, x_hat)
    shifted = type(state)(vm=list(state.vm),
                          va=[a + 0.3 for a in state.va])
    x2 = lift_state(model, shifted)
    x2_hat = x2 + (x_hat - x_true)
    b2, _ = step2_error_bound(grid, model, x2, x2_hat)
    assert np.abs(b1 - b2).max() < 1e-9
