import math

import numpy as np
import pytest

import oracles
from robust_mfg import model as M
from robust_mfg import simulate as S
from robust_mfg.bsde import (RegressionBasis, nature_control_from_value, project, solve_adjoint_bsde,
                             solve_value_bsde)


def _coeffs(b=0.0, nu=1.0, T=0.25, x0=0.0):
    return M.ModelCoefficients(n=1, d=1, T=T, r_flag=0, a=M.constant([0.0]), b=M.constant([[b]]),
                               c=M.constant([[1.0]]), nu=M.constant([[nu]]), sigma_tensor=M.constant(np.zeros((1, 1, 1))),
                               initial_law=M.dirac([x0]), bound_L=max(1.0, abs(b), nu))


def _zero_driver():
    return M.DriverSpec("custom", lambda t, y, z: np.zeros(np.shape(y)), alpha=0.0, beta=1e-12,
                        grad=lambda t, y, z: (np.zeros(np.shape(y)), np.zeros(np.shape(z))))


def _setup(P=10000, K=50, T=0.25, nu=1.0, b=0.0, seed=0):
    co = _coeffs(b=b, nu=nu, T=T)
    W = S.sample_brownian(S.TimeGrid(K, T), P, 1, seed)
    X = S.simulate_state(co, S.ControlField.zeros(P, K, 1), W)
    return co, W, X


def test_martingale_case_recovers_the_state_and_the_volatility():
    nu = 0.5
    co, W, X = _setup(nu=nu)
    v = solve_value_bsde(X, None, X.terminal[:, 0], _zero_driver(), M.quadratic_running_cost(0.0), RegressionBasis(), W)
    err = v.Y - X.values[:, :, 0]
    # regression noise of order nu sqrt(T / P); the initial node is exact up to that level
    assert np.abs(err[:, 0]).max() < 3 * nu * math.sqrt(0.25 / W.n_paths)
    assert math.sqrt(np.mean(err ** 2)) < 1e-3
    z_err = v.Z - nu
    assert abs(z_err.mean()) < 1e-3 and math.sqrt(np.mean(z_err ** 2)) < 0.03
    assert v.converged


def test_deterministic_running_cost_with_constant_terminal():
    co, W, X = _setup()
    K, dt = 50, 0.25 / 50
    ell_t = np.cos(np.arange(K) * dt)
    v = solve_value_bsde(X, None, np.full(W.n_paths, 2.0), M.quadratic_benchmark(), M.quadratic_running_cost(),
                         RegressionBasis(), W, running=np.broadcast_to(ell_t, (W.n_paths, K)))
    expect = 2.0 + np.concatenate([np.cumsum((ell_t * dt)[::-1])[::-1], [0.0]])
    assert np.allclose(v.Y, expect[None, :], atol=1e-10)
    assert np.max(np.abs(v.Z)) < 1e-10


@pytest.mark.parametrize("name", ["linear", "quadratic", "oscillating"])
def test_quadratic_driver_matches_cole_hopf(name):
    h = {"linear": lambda x: x, "quadratic": lambda x: 0.5 * x ** 2,
         "oscillating": lambda x: np.sin(2 * x) + 0.5 * x}[name]
    co, W, X = _setup(P=10000, nu=1.0)
    v = solve_value_bsde(X, None, h(X.terminal[:, 0]), M.quadratic_benchmark(), M.quadratic_running_cost(),
                         RegressionBasis(degree=3), W, running=np.zeros((W.n_paths, 50)))
    oracle = oracles.cole_hopf_value(h, 1.0, 0.25)
    if name == "oscillating":
        e = np.exp(h(X.terminal[:, 0]))
        assert abs(v.Y0 - oracle) < 3 * e.std() / e.mean() / math.sqrt(W.n_paths)
    else:
        assert v.Y0 == pytest.approx(oracle, rel=0.01)


def test_coefficient_dump_requires_the_flag(tmp_path):
    co, W, X = _setup(P=500, K=5)
    v = solve_value_bsde(X, None, X.terminal[:, 0], _zero_driver(), M.quadratic_running_cost(0.0), RegressionBasis(), W)
    with pytest.raises(ValueError):
        v.dump_coefficients(tmp_path / "c.json")
    v = solve_value_bsde(X, None, X.terminal[:, 0], _zero_driver(), M.quadratic_running_cost(0.0), RegressionBasis(), W,
                         keep_coefficients=True)
    v.dump_coefficients(tmp_path / "c.json")
    assert (tmp_path / "c.json").stat().st_size > 0


def test_adjoint_constant_and_exponential_cases():
    co, W, X = _setup(P=2000)
    q = S.DensityProcess.unit(2000, 50)
    a = solve_adjoint_bsde(X, q, co, np.full((2000, 1), 1.7), RegressionBasis(), W, need_k=True)
    assert np.allclose(a.p, 1.7) and np.allclose(a.k, 0.0, atol=1e-10)
    b0 = 0.8
    co, W, X = _setup(P=2000, b=b0)
    a = solve_adjoint_bsde(X, q, co, np.ones((2000, 1)), RegressionBasis(), W)
    t = W.grid.nodes
    assert np.allclose(a.p[:, :, 0], np.exp(b0 * (0.25 - t))[None, :], atol=1e-7)


def test_adjoint_under_a_tilt_matches_direct_conditional_expectation():
    b0, P = 0.5, 20000
    co, W, X = _setup(P=P, b=b0, nu=0.5)
    q = S.simulate_density(S.NatureControl.constant_tilt(0.7, P, 50), W)
    tg = (q.terminal * X.terminal[:, 0])[:, None]
    a = solve_adjoint_bsde(X, q, co, tg, RegressionBasis(), W)
    direct, se = S.mean_se(math.exp(b0 * 0.25) * q.terminal * X.terminal[:, 0])
    assert abs(a.p[:, 0, 0].mean() - direct) < 3 * se + 1e-10


def test_nature_control_maps():
    co, W, X = _setup(P=200, K=5)
    v = solve_value_bsde(X, None, X.terminal[:, 0], M.quadratic_benchmark(), M.quadratic_running_cost(),
                         RegressionBasis(), W, running=np.zeros((200, 5)))
    nc = nature_control_from_value(M.quadratic_benchmark(), v, W.grid)
    assert np.allclose(nc.y_star, 0.0) and np.allclose(nc.z_star, v.Z) and nc.clip_count == 0
    v0 = solve_value_bsde(X, None, np.zeros(200), M.quadratic_benchmark(), M.quadratic_running_cost(),
                          RegressionBasis(), W, running=np.zeros((200, 5)))
    assert np.all(nature_control_from_value(M.quadratic_benchmark(), v0).z_star == 0.0)


def test_softabs_gradient_map_against_finite_differences():
    drv = M.softabs_driver(0.6, 0.1)
    y = np.linspace(-1, 1, 41)
    z = np.zeros((41, 1))
    fy, _ = drv.gradient(0.0, y, z)
    h = 1e-6
    fd = (drv.f(0.0, y + h, z) - drv.f(0.0, y - h, z)) / (2 * h)
    assert np.max(np.abs(fy - fd)) < 1e-5
    assert np.all(np.abs(fy) <= 0.6)


def test_projection_reproduces_constants_exactly():
    rng = np.random.default_rng(0)
    F = RegressionBasis().features(rng.normal(size=(500, 1)))
    fit, _ = project(F, np.full(500, 3.25))
    assert np.allclose(fit, 3.25, atol=1e-12)


def test_local_bins_basis_shapes():
    x = np.random.default_rng(1).normal(size=(1000, 1))
    F = RegressionBasis(kind="local_bins", bins=8).features(x)
    assert F.shape == (1000, 8) and np.all(F.sum(axis=1) == 1)
    with pytest.raises(ValueError):
        RegressionBasis(kind="splines")
