"""Invariants checked over generated inputs."""
import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from robust_mfg import model as M
from robust_mfg.measure import WeightedMeasure, fm_distance
from robust_mfg.simulate import TimeGrid, dual_entropy_from_integrals, ent, relative_entropy, sample_brownian

finite = st.floats(-5, 5, allow_nan=False)
positive = st.floats(0.01, 2.0)


@st.composite
def measures(draw, max_size=12):
    n = draw(st.integers(1, max_size))
    pts = draw(arrays(float, (n, 1), elements=finite))
    w = draw(arrays(float, n, elements=positive))
    return WeightedMeasure(pts, w / w.sum() * draw(st.floats(0.2, 1.5)))


@settings(max_examples=60, deadline=None)
@given(measures(), measures())
def test_fm_is_symmetric_and_bounded(a, b):
    d = fm_distance(a, b)
    assert abs(d - fm_distance(b, a)) < 1e-12
    assert abs(a.total_mass - b.total_mass) - 1e-9 <= d <= a.total_mass + b.total_mass + 1e-9
    assert fm_distance(a, a) < 1e-12


@settings(max_examples=40, deadline=None)
@given(measures(), measures(), measures())
def test_fm_triangle_inequality(a, b, c):
    assert fm_distance(a, c) <= fm_distance(a, b) + fm_distance(b, c) + 1e-9


@settings(max_examples=40, deadline=None)
@given(measures(), measures(), st.floats(0, 1), st.integers(1, 50))
def test_mix_and_resample_keep_mass(a, b, theta, m):
    mixed = a.mix(b, theta)
    assert abs(mixed.total_mass - ((1 - theta) * a.total_mass + theta * b.total_mass)) < 1e-12
    r = mixed.resample(m) if mixed.total_mass > 0 else None
    if r is not None:
        assert abs(r.total_mass - mixed.total_mass) < 1e-12
        # one-dimensional resampling moves the CDF by at most mass / m
        assert fm_distance(r, mixed) <= mixed.total_mass / m * (np.ptp(mixed.points) + 1) + 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 20), st.integers(1, 20))
def test_brownian_paths_depend_only_on_seed_and_index(seed, k, extra):
    grid = TimeGrid(8, 1.0)
    small = sample_brownian(grid, k, 1, seed).increments
    large = sample_brownian(grid, k + extra, 1, seed).increments
    np.testing.assert_array_equal(small, large[:k])


@settings(max_examples=80, deadline=None)
@given(st.floats(1e-6, 50), st.floats(1e-6, 50), st.floats(0, 1))
def test_ent_is_convex_with_minimum_at_one(x, y, t):
    assert ent(x) >= -1.0 - 1e-12
    mid = t * x + (1 - t) * y
    assert ent(mid) <= t * ent(x) + (1 - t) * ent(y) + 1e-9 * (1 + abs(ent(x)) + abs(ent(y)))


@settings(max_examples=60, deadline=None)
@given(arrays(float, 30, elements=finite), arrays(float, 30, elements=st.floats(0.05, 5)), st.floats(0.2, 5))
def test_variational_gap_is_nonnegative(energy, raw, gamma):
    q = raw / raw.mean()
    primal = float(np.mean(q * energy)) - gamma * relative_entropy(q)[0]
    dual = dual_entropy_from_integrals(energy, gamma).value
    assert primal <= dual + 1e-9 * (1 + abs(dual))
    assert np.mean(energy) - 1e-9 <= dual <= energy.max() + 1e-9


@settings(max_examples=40, deadline=None)
@given(finite, finite, st.floats(0.05, 0.95), st.floats(0.3, 4))
def test_quadratic_driver_margin(z1, z2, theta, penalty):
    if abs(z1 - z2) < 1e-3:
        return
    c = M.strict_convexity_margin(M.quadratic_benchmark(penalty), [((0.0, z1), (0.0, z2))], theta)
    assert abs(c - 0.5 * penalty) < 1e-6 * (1 + penalty)
