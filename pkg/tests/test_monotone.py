import numpy as np
import pytest

from robust_mfg import model as M
from robust_mfg import monotone as MO
from robust_mfg.measure import WeightedMeasure

PHI = M.feature_map(["tanh"], 1, scales=[1.5])


def _kernel_cost(sign: float, lam: float = 1.0):
    return M.feature_kernel_cost(PHI, [[sign]], "quadratic", lam)


def test_identical_arguments_give_zero():
    g = _kernel_cost(-1.0)
    d = MO.JointSampler(same_points=True, same_density=True)(np.random.default_rng(0))
    assert np.allclose(MO.joint_lhs_samples(g, *d), 0.0)


def test_potential_construction_passes_on_ten_samplers():
    g = MO.potential_terminal_cost(PHI, [[-1.0]], 1.0)
    for k, smp in enumerate(MO.default_samplers(10)):
        assert MO.flat_displacement_test(g, smp, 10, seed=k).passed


def test_positive_kernel_fails_with_a_reproducible_witness():
    g = M.feature_kernel_cost(PHI, [[1.0]], "quadratic", 1e-9)
    smp = MO.JointSampler(same_points=True, tilt=1.0, tilt_p=-1.0)
    rep = MO.flat_displacement_test(g, smp, 10)
    assert not rep.passed
    lhs, se = MO.reproduce_witness(rep, g, smp)
    assert lhs == rep.worst_lhs and se == rep.worst_se


def test_displacement_monotonicity_examples():
    smp = MO.default_samplers(3)[1]
    assert MO.displacement_monotone_test(M.quadratic_form_cost(1.0), smp, 5).passed
    concave = M.quadratic_form_cost(1.0, sign=-1.0)
    rep = MO.displacement_monotone_test(concave, smp, 5)
    assert not rep.passed
    assert MO.reproduce_witness(rep, concave, smp)[0] == rep.worst_lhs


def _pairs(seed=0, count=10):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        a, b = rng.normal(size=(30, 1)), rng.normal(loc=1.0, size=(30, 1))
        out.append((WeightedMeasure(a, rng.dirichlet(np.ones(30))), WeightedMeasure(b, rng.dirichlet(np.ones(30)))))
    return out


def test_flat_antimonotone_closed_form():
    pairs = _pairs()
    neg = MO.flat_antimonotone_test(_kernel_cost(-1.0), pairs)
    assert neg.passed
    m, mp = pairs[neg.witness["pair"]]
    d = m.integrate(PHI(m.points)[:, 0]) - mp.integrate(PHI(mp.points)[:, 0])
    assert neg.worst_lhs == pytest.approx(-d ** 2, abs=1e-12)
    assert not MO.flat_antimonotone_test(_kernel_cost(1.0), pairs).passed
    same = MO.flat_antimonotone_test(_kernel_cost(1.0), [(pairs[0][0], pairs[0][0])])
    assert same.worst_lhs == 0.0


def test_negative_type_examples():
    pts = np.linspace(-3, 3, 40)[:, None]
    h = np.random.default_rng(0).normal(size=(40, 5))
    minus = lambda x, y: -np.tanh(x) @ np.tanh(y).T
    assert MO.negative_type_test(minus, pts, h) < 1e-10
    anti = lambda x, y: np.sin(x - y.T)
    assert abs(np.einsum("ik,ij,jk->k", h, anti(pts, pts), h)).max() < 1e-10
    assert MO.negative_type_test(anti, pts) < 1e-10
    assert MO.negative_type_test(lambda x, y: np.ones((len(x), len(y))), pts) > 1.0


def test_kernel_cost_construction_rules():
    kc = MO.KernelCost(bump="quadratic", lam=2.0, features=PHI, matrix=[[-1.0]])
    g = MO.build_kernel_cost(kc)
    m = M.benchmark_model(terminal=g)
    rep = M.validate_model(m.coeffs, m.driver, m.ell, g)
    assert not [v for v in rep.violations if v[0] == "A7"]
    with pytest.raises(ValueError):
        MO.build_kernel_cost(MO.KernelCost(bump="sqrt_quadratic", lam=1.0, r_flag=0, features=PHI, matrix=[[-1.0]]))
    with pytest.raises(ValueError):
        MO.build_kernel_cost(MO.KernelCost(features=PHI, matrix=[[1.0]]))


def test_generic_kernel_matches_the_feature_form():
    K = lambda x, y: -np.tanh(1.5 * x) @ np.tanh(1.5 * y).T
    g_gen = MO.build_kernel_cost(MO.KernelCost(K=K))
    g_feat = _kernel_cost(-1.0)
    rng = np.random.default_rng(1)
    mu = WeightedMeasure(rng.normal(size=(40, 1)), rng.dirichlet(np.ones(40)))
    x = rng.normal(size=(25, 1))
    assert np.allclose(g_gen.g(x, mu), g_feat.g(x, mu))
    assert np.allclose(g_gen.grad_x(x, mu), g_feat.grad_x(x, mu), atol=1e-7)


def test_lambda_threshold_brackets_the_pass_fail_boundary():
    samplers = MO.default_samplers(4, size=1000)
    make = lambda lam: M.feature_kernel_cost(PHI, [[-1.0]], "quadratic", lam)
    iters = 20
    lam_star = MO.lambda_threshold(make, samplers, n_samples=3, iters=iters)
    assert lam_star > 0
    assert all(MO.flat_displacement_test(make(lam_star), s, 3).passed for s in samplers)
    below = lam_star - 16.0 / 2 ** iters
    assert not all(MO.flat_displacement_test(make(below), s, 3).passed for s in samplers)
