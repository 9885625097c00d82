import math

import numpy as np
import pytest

import oracles
from robust_mfg import model as M
from robust_mfg import saddle as SD
from robust_mfg.mfg import (EquilibriumOptions, WeightedMeasure, fm_distance, fm_distance_report, out_of_sample_consistency,
                            phi_map, read_measure_csv, solve_equilibrium, stability_check, write_measure_csv)


def test_fm_closed_forms():
    a = WeightedMeasure.dirac([0.0])
    assert fm_distance(a, a) == 0.0
    assert fm_distance(a, WeightedMeasure.dirac([1.0])) == pytest.approx(1.0)
    assert fm_distance(a, WeightedMeasure.dirac([5.0])) == pytest.approx(2.0)
    assert fm_distance(WeightedMeasure.dirac([0.0], 0.3), WeightedMeasure.dirac([0.0], 0.8)) == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(5))
def test_fm_exact_1d_matches_a_linear_programme(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=12), rng.normal(loc=0.5, scale=2, size=9)
    wa, wb = rng.dirichlet(np.ones(12)) * rng.uniform(0.5, 1), rng.dirichlet(np.ones(9)) * rng.uniform(0.5, 1)
    got = fm_distance(WeightedMeasure(x, wa), WeightedMeasure(y, wb))
    assert got == pytest.approx(oracles.fortet_mourier_lp(x, wa, y, wb), abs=1e-9)


def test_fm_in_two_dimensions_is_exact_on_small_clouds():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(8, 2)), rng.normal(size=(7, 2)) + 0.3
    wa, wb = rng.dirichlet(np.ones(8)), rng.dirichlet(np.ones(7))
    r = fm_distance_report(WeightedMeasure(x, wa), WeightedMeasure(y, wb))
    assert r.method == "exact_lp"
    assert r.value == pytest.approx(oracles.fortet_mourier_lp(x, wa, y, wb), abs=1e-7)
    assert r.lower <= r.value + 1e-9


def _bench(g, P=10000, x0=1.0, seed=1):
    m = M.benchmark_model(x0=x0, nu=0.5, T=0.25, terminal=g)
    return m, SD.make_pathset(m, P, 50, seed)


def test_phi_without_incentives_is_the_noise_law():
    m, ps = _bench(M.constant_terminal_cost(0.0), P=2000)
    img, s = phi_map(WeightedMeasure.empirical(ps.x0), m, ps)
    expect = 1.0 + 0.5 * ps.W.paths()[:, -1, 0]
    assert np.allclose(img.points[:, 0], expect) and np.allclose(img.weights, 1 / 2000)


def test_phi_image_mass_and_mean_identity():
    m, ps = _bench(M.quadratic_form_cost(1.0, kappa=0.2), P=5000)
    img, s = phi_map(WeightedMeasure.empirical(ps.x0), m, ps)
    assert abs(img.total_mass - 1.0) < 1e-12  # normalised Gibbs tilt
    direct = np.mean(s.q.terminal * s.X.terminal[:, 0])
    assert img.mean()[0] * img.total_mass == pytest.approx(direct, abs=1e-12)


def test_measure_free_cost_converges_immediately():
    m, ps = _bench(M.quadratic_form_cost(1.0), P=3000)
    rep = solve_equilibrium(m, ps, EquilibriumOptions(damping=1.0, particles=3000))
    assert rep.converged and len(rep.iterates) == 2
    # Phi is constant up to the saddle tolerance of the warm-started solve
    assert rep.consistency < 5e-3


@pytest.fixture(scope="module")
def benchmark_equilibrium():
    m, ps = _bench(M.quadratic_form_cost(1.0, kappa=0.2))
    return m, ps, solve_equilibrium(m, ps, EquilibriumOptions(particles=10000))


def test_benchmark_equilibrium_mean_agrees_with_the_scalar_fixed_point(benchmark_equilibrium):
    m, ps, rep = benchmark_equilibrium
    assert rep.converged
    assert all(b < a for a, b in zip(rep.iterates, rep.iterates[1:]))
    oracle = oracles.benchmark_equilibrium_mean(1.0, 0.2, 1.0, 1.0, 0.5, 0.25)
    assert rep.mu_star.mean()[0] == pytest.approx(oracle, rel=0.01)
    assert out_of_sample_consistency(rep, m, 10000, 50, 99) < 1e-2


def test_stability_slacks(benchmark_equilibrium):
    m, ps, rep = benchmark_equilibrium
    mu, s = rep.mu_star, rep.saddle
    same = stability_check(mu, mu, s, s, m)
    assert same.slack1 == 0.0 and same.lhs2 == 0.0 and same.rhs1 == 0.0
    mut = WeightedMeasure(mu.points + 0.5, mu.weights)
    st = SD.solve_saddle(mut, m, ps, start=s.psi)
    r = stability_check(mu, mut, s, st, m)
    assert r.slack1 >= -3 * r.slack1_se and r.slack2 >= -3 * r.slack2_se
    assert abs(r.adjoint_lhs - r.adjoint_rhs) <= 3 * r.adjoint_diff_se


def test_measure_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mu = WeightedMeasure(rng.normal(size=(50, 2)), rng.dirichlet(np.ones(50)))
    write_measure_csv(mu, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().startswith("# schema=1\n")
    back = read_measure_csv(tmp_path / "m.csv")
    assert np.array_equal(back.points, mu.points) and np.array_equal(back.weights, mu.weights)
