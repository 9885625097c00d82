import numpy as np
import pytest

from robust_mfg import model as M
from robust_mfg import nplayer as NP
from robust_mfg import saddle as SD
from robust_mfg.measure import WeightedMeasure

PHI = M.feature_map(["tanh"], 1)


def _setup(A, paths=3000, steps=20, seed=5):
    g = M.feature_kernel_cost(PHI, [[A]], "quadratic", 1.0)
    m = M.benchmark_model(x0=1.0, nu=0.5, T=0.25, terminal=g)
    ps = SD.make_pathset(m, paths, steps, seed)
    s = SD.solve_saddle(WeightedMeasure.dirac([0.9]), m, ps, SD.SaddleOptions(tol=1e-3))
    return m, ps, s


@pytest.fixture(scope="module")
def game():
    m, ps, s = _setup(-1.0)
    return m, ps, s, NP.FiniteGameConfig(m, samples=1 << 14, seed=1)


@pytest.fixture(scope="module")
def decoupled():
    m, ps, s = _setup(0.0)
    return m, ps, s, NP.FiniteGameConfig(m, samples=1 << 14, seed=1)


def test_pool_mass_is_one(game):
    m, ps, s, cfg = game
    st = NP.lift_mean_field_strategy(s, m, ps, 4)
    q = st.pool.q_T
    assert abs(q.mean() - 1.0) < 4 * q.std() / np.sqrt(q.size) + 1e-12


def test_single_player_sees_its_own_dirac(game):
    m, ps, s, cfg = game
    st = NP.lift_mean_field_strategy(s, m, ps, 1)
    x = st.pool.X_T[:, 0]
    oracle = np.mean(st.pool.q_T * (0.5 * x ** 2 - np.tanh(x) ** 2 + st.pool.L))
    val, _ = NP.player_cost(0, st, cfg)
    assert val == pytest.approx(oracle, rel=1e-12)


def test_relabelling_is_harmless(game):
    m, ps, s, cfg = game
    st = NP.lift_mean_field_strategy(s, m, ps, 5, seed=2)
    perm = [3, 0, 4, 1, 2]
    moved = st.relabel(perm)
    assert NP.nature_reward(moved, cfg) == NP.nature_reward(st, cfg)
    for k in (0, 2):
        assert NP.player_cost(k, moved, cfg) == NP.player_cost(perm[k], st, cfg)


def test_player_cost_is_deterministic(game):
    m, ps, s, cfg = game
    a = NP.player_cost(1, NP.lift_mean_field_strategy(s, m, ps, 8, seed=4), cfg)
    b = NP.player_cost(1, NP.lift_mean_field_strategy(s, m, ps, 8, seed=4), cfg)
    assert a == b


def test_costs_without_interaction_do_not_depend_on_N(decoupled):
    m, ps, s, cfg = decoupled
    x = s.X.terminal[:, 0]
    st1 = NP.lift_mean_field_strategy(s, m, ps, 1)
    oracle = np.mean(s.q.terminal * (0.5 * x ** 2 + st1.pool.L))
    for N in (1, 3, 16):
        st = NP.lift_mean_field_strategy(s, m, ps, N)
        assert NP.player_cost(N - 1, st, cfg)[0] == pytest.approx(oracle, rel=1e-12)


def test_entropy_of_a_product_adds_up(game):
    m, ps, s, cfg = game
    st = NP.lift_mean_field_strategy(s, m, ps, 3)
    mc, se, exact = NP.entropy_factorization(st, worlds=20000)
    assert abs(mc - exact) < 4 * se


def test_no_deviation_no_gain(game):
    m, ps, s, cfg = game
    st = NP.lift_mean_field_strategy(s, m, ps, 4)
    gain, _ = NP.player_deviation_gain(0, st.pool.psi, st, cfg)
    assert abs(gain) < 1e-12
    same = NP.FactorOverride(q_T=st.pool.q_T, ent=st.pool.ent)
    assert NP.nature_local_deviation_gain(0, same, st, cfg) == (0.0, 0.0)


def test_curves_vanish_without_interaction(decoupled):
    m, ps, s, cfg = decoupled
    for kind in ("player", "nature_local"):
        curve = NP.epsilon_curve(kind, (2, 8), s, m, ps, cfg)
        assert all(abs(g) < 1e-12 and se == 0.0 for g, se in curve.gains)


def test_nature_budget_is_enforced(game):
    m, ps, s, cfg = game
    st = NP.lift_mean_field_strategy(s, m, ps, 2)
    strong = NP.scaled_tilt(st, 40.0)
    with pytest.raises(ValueError, match="budget"):
        NP.nature_local_deviation_gain(0, strong, st, NP.FiniteGameConfig(m, entropy_budget=1e-3))


def test_untilted_lln_decreases():
    rng = np.random.default_rng(0)
    X = rng.normal(size=4000)
    q = np.ones(X.size)
    p = [NP.tilted_lln_probability(q, X, N, 0.2, n_trials=600).probability for N in (8, 32, 128)]
    assert p[0] > p[1] > p[2]


def test_lln_beyond_the_diameter_is_zero():
    q = np.full(100, 1.0)
    est = NP.tilted_lln_probability(q, np.linspace(-1, 1, 100), 10, 2.0)
    assert est.probability == 0.0 and est.trials == 0


def test_finite_game_needs_a_split_cost():
    m = M.benchmark_model(x0=1.0, terminal=M.quadratic_form_cost(1.0, kappa=0.2))
    with pytest.raises(ValueError, match="split"):
        NP.FiniteGameConfig(m)


def test_curve_rejects_unsorted_sizes(game):
    m, ps, s, cfg = game
    with pytest.raises(ValueError):
        NP.epsilon_curve("player", (8, 2), s, m, ps, cfg)
