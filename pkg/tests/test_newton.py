import numpy as np
import pytest

from gridshield.attacks import NoiseModel, AttackSpec, generate, rmse
from gridshield.newton import NlsConfig, jacobian, measure, newton_se
from gridshield.sensing import build_sensing_model, evaluate, make_profile
from conftest import load_bundled, random_state


@pytest.fixture(scope="module")
def model30():
    grid, state = load_bundled("case30.m")
    return grid, state, build_sensing_model(grid, make_profile(grid, "full"))


def central_diff_jacobian(model, vm, va, step=1e-6):
    n_b = len(vm)
    J = np.zeros((model.n_m, 2 * n_b))
    for k in range(n_b):
        vp, vm_ = vm.copy(), vm.copy()
        vp[k] += step
        vm_[k] -= step
        J[:, k] = (measure(model, vp, va) - measure(model, vm_, va)) / (2 * step)
        ap, am = va.copy(), va.copy()
        ap[k] += step
        am[k] -= step
        J[:, n_b + k] = (measure(model, vm, ap) - measure(model, vm, am)) / (2 * step)
    return J


def test_jacobian_matches_central_differences(model30, rng):
    grid, state, model = model30
    for _ in range(5):
        st = random_state(grid, rng)
        vm, va = np.asarray(st.vm), np.asarray(st.va)
        J = jacobian(model, vm, va).toarray()
        Jfd = central_diff_jacobian(model, vm, va)
        scale = max(1.0, np.abs(J).max())
        assert np.abs(J - Jfd).max() / scale < 1e-5


def test_exact_data_flat_start(model30):
    grid, state, model = model30
    y = evaluate(model, state)
    vm, va, converged, removed = newton_se(model, y, NlsConfig())
    assert converged
    assert not removed
    resid = np.abs(y - measure(model, vm, va)).max()
    assert resid < 1e-10
    v_true = np.asarray(state.vm) * np.exp(1j * np.asarray(state.va))
    assert rmse(v_true, vm * np.exp(1j * va)) < 1e-8


def test_truth_init_zero_step(model30):
    grid, state, model = model30
    y = evaluate(model, state)
    cfg = NlsConfig(init="truth", max_newton_iter=2)
    vm, va, converged, _ = newton_se(model, y, cfg, state0=state)
    assert converged
    assert np.abs(vm - np.asarray(state.vm)).max() < 1e-12
    assert np.abs(va - np.asarray(state.va)).max() < 1e-12


def test_perturbed_init_small_tau_recovers(model30):
    # With clean data the damped implementation converges on the shipped
    # cases even from far-off starts, so only the reliable regime is
    # asserted here; the baseline's real weakness (degradation under
    # corruption) is exercised by the scattered-attack comparisons.
    grid, state, model = model30
    y = evaluate(model, state)
    v_true = np.asarray(state.vm) * np.exp(1j * np.asarray(state.va))
    for seed in range(3):
        cfg = NlsConfig(init="perturbed", init_tau=0.02, init_seed=seed)
        vm, va, _, _ = newton_se(model, y, cfg, state0=state)
        assert rmse(v_true, vm * np.exp(1j * va)) < 1e-6


def test_corruption_degrades_newton(model30, rng):
    grid, state, model = model30
    v_true = np.asarray(state.vm) * np.exp(1j * np.asarray(state.va))
    sc = generate(model, state, NoiseModel(seed=3),
                  AttackSpec(kind="scattered", n_lines=6, seed=11))
    vm, va, _, _ = newton_se(model, sc.y, NlsConfig())
    assert rmse(v_true, vm * np.exp(1j * va)) > 1e-2


def test_bdd_flags_gross_row(model30):
    # the corrupted first fit spreads error locally, so thresholding flags
    # the gross row along with its contaminated neighbourhood; recovery is
    # not guaranteed (that failure mode is the point of the comparison)
    grid, state, model = model30
    sc = generate(model, state, NoiseModel(seed=21), AttackSpec(kind="none"))
    y2 = sc.y.copy()
    y2[10] += 4.0 * model.row_scale[10]
    vm, va, converged, removed = newton_se(model, y2, NlsConfig())
    assert 10 in removed
    assert np.all(np.isfinite(vm)) and np.all(np.isfinite(va))


def test_config_validation():
    with pytest.raises(ValueError):
        NlsConfig(residual_bdd_threshold=-1.0)
    with pytest.raises(ValueError):
        NlsConfig(max_bdd_rounds=-1)
