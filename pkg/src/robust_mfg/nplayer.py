"""Finite-player game against Nature built from a mean-field solution.

Each player's factor (noise, initial state, control, density) is an
independent draw from a pool of mean-field paths. Under a product density
``Q = prod q^i`` with unit-mean factors, an expectation ``E[Q F]`` equals
``E[F]`` with every factor drawn proportionally to its own ``q``, so the
product density never has to be formed; it is kept in log space only where
it is reported.

Expectations that single out one factor (player ``i``) sweep that factor
over every pool path with its exact weight and draw only the others, which
removes the dominant Monte Carlo noise from deviation gains.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .measure import WeightedMeasure, fm_distance
from .model import Model, TerminalCostSpec
from .saddle import PathSet, SaddleOptions, SaddleState, player_best_response
from .simulate import ControlField, DensityProcess, mean_se, simulate_state

__all__ = [
    "FactorPool", "FactorOverride", "FiniteGameConfig", "DistributedStrategy", "DeviationCurve", "LLNEstimate",
    "build_pool", "lift_mean_field_strategy", "player_cost", "nature_reward", "surrogate_reward",
    "effective_terminal_cost", "player_deviation_gain", "nature_local_deviation_gain",
    "nature_global_deviation_gain", "gibbs_local_tilt", "scaled_tilt", "unit_density", "tilted_lln_probability",
    "weighted_lln_moment", "epsilon_curve", "log_product_density", "entropy_factorization",
]

# stream purposes for the seeded draws of the non-focal factors
_PURPOSE = {"tilted": 11, "plain": 12, "effective": 13, "gibbs": 14, "lln": 15, "check": 16}
_CHUNK_ATOMS = 1 << 18


# ---------------------------------------------------------------------------
# pool and strategies


@dataclass(frozen=True)
class FactorPool:
    """Per-path mean-field quantities: terminal state, density, running cost sum and entropy contribution."""

    X_T: np.ndarray  # [M, n]
    q_T: np.ndarray  # [M], pool mean 1
    L: np.ndarray  # [M], sum of ell dt along the path
    ent: np.ndarray  # [M], per-path P-contribution to S(q)
    gamma: float
    mu: WeightedMeasure  # measure the saddle was frozen at
    psi: ControlField
    q: DensityProcess
    ps: PathSet

    @property
    def size(self) -> int:
        return self.X_T.shape[0]

    @property
    def image(self) -> WeightedMeasure:
        return WeightedMeasure(self.X_T, self.q_T / self.size)


def build_pool(s: SaddleState, model: Model, ps: PathSet) -> FactorPool:
    if model.driver.kind != "quadratic_benchmark":
        raise NotImplementedError("the N-player harness uses the terminal entropy form of the quadratic driver")
    gam = s.driver.penalty
    qT = s.q.terminal
    L = np.asarray(model.ell.ell(0.0, s.psi.values), float).sum(axis=1) * ps.grid.dt
    ent = gam * qT * s.q.log_q[:, -1]
    for a in (s.X.terminal, qT, L, ent):
        a.setflags(write=False)
    return FactorPool(s.X.terminal, qT, L, ent, gam, s.mu, s.psi, s.q, ps)


@dataclass(frozen=True)
class FactorOverride:
    """Replacement data for one factor; ``None`` keeps the pool value."""

    X_T: Optional[np.ndarray] = None
    q_T: Optional[np.ndarray] = None
    L: Optional[np.ndarray] = None
    ent: Optional[np.ndarray] = None
    label: str = "override"


@dataclass(frozen=True)
class FiniteGameConfig:
    model: Model
    h: Optional[TerminalCostSpec] = None  # Nature's reward cost, g by default
    samples: int = 1 << 17  # atoms per Monte Carlo expectation over worlds
    grid_points: int = 65
    seed: int = 0
    entropy_budget: float = 2.0
    br_tol: float = 1e-6
    saddle: SaddleOptions = field(default_factory=SaddleOptions)

    def __post_init__(self):
        for cost in (self.model.g, self.h):
            if cost is not None and cost.measure_dependent and cost.decomposition is None:
                raise ValueError("the finite game needs a split g = g0 + g1 of every measure-dependent cost")

    @property
    def reward_cost(self) -> TerminalCostSpec:
        return self.model.g if self.h is None else self.h

    def to_json(self) -> dict:
        return {"samples": self.samples, "grid_points": self.grid_points, "seed": self.seed,
                "entropy_budget": self.entropy_budget, "br_tol": self.br_tol}


@dataclass(frozen=True)
class DistributedStrategy:
    N: int
    pool: FactorPool
    seed: int
    streams: tuple  # stream id per player; columns of every world are ordered by stream id
    overrides: tuple = ()  # pairs (player, FactorOverride)
    provenance: str = "mean_field"

    def factor(self, i: int):
        X, q, L, e = self.pool.X_T, self.pool.q_T, self.pool.L, self.pool.ent
        for j, ov in self.overrides:
            if j == i:
                X = X if ov.X_T is None else ov.X_T
                q = q if ov.q_T is None else ov.q_T
                L = L if ov.L is None else ov.L
                e = e if ov.ent is None else ov.ent
        return X, q, L, e

    def with_override(self, i: int, ov: FactorOverride) -> "DistributedStrategy":
        keep = tuple((j, o) for j, o in self.overrides if j != i)
        return replace(self, overrides=keep + ((i, ov),), provenance="custom")

    def relabel(self, perm: Sequence[int]) -> "DistributedStrategy":
        """Player ``k`` takes over the stream of player ``perm[k]``."""
        return replace(self, streams=tuple(self.streams[p] for p in perm),
                       overrides=tuple((list(perm).index(j), o) for j, o in self.overrides))

    @property
    def columns(self) -> list:
        """Players in world-column order."""
        return sorted(range(self.N), key=lambda i: self.streams[i])


def lift_mean_field_strategy(s: SaddleState, model: Model, ps: PathSet, N: int, seed: int = 0) -> DistributedStrategy:
    """N independent copies of the mean-field pair, one seeded stream per player."""
    if N < 1:
        raise ValueError("N must be positive")
    return DistributedStrategy(N, build_pool(s, model, ps), int(seed), tuple(range(N)))


# ---------------------------------------------------------------------------
# worlds


def _stratified(rng: np.random.Generator, weights: Optional[np.ndarray], count: int, M: int) -> np.ndarray:
    u = (rng.permutation(count) + rng.random(count)) / count
    if weights is None:
        return np.minimum((u * M).astype(np.int64), M - 1)
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), M - 1)


def _worlds(st: DistributedStrategy, S: int, purpose: str, tilted: bool, focal: Optional[int] = None) -> np.ndarray:
    """Pool indices [S, N], columns in stream order; the focal column (if any) is left as -1."""
    M = st.pool.size
    cols = st.columns
    idx = np.empty((S, st.N), dtype=np.int64)
    for c, i in enumerate(cols):
        if i == focal:
            idx[:, c] = -1
            continue
        rng = np.random.default_rng([st.seed, st.N, st.streams[i], _PURPOSE[purpose]])
        idx[:, c] = _stratified(rng, st.factor(i)[1] if tilted else None, S, M)
    return idx


def _gather(st: DistributedStrategy, idx: np.ndarray, focal_index: Optional[np.ndarray] = None, focal=None):
    """(x [S, N, n], q [S, N], L [S, N], ent [S, N]) from world indices."""
    S, N = idx.shape
    n = st.pool.X_T.shape[1]
    x = np.empty((S, N, n))
    qv, Lv, ev = np.empty((S, N)), np.empty((S, N)), np.empty((S, N))
    for c, i in enumerate(st.columns):
        X, q, L, e = st.factor(i)
        rows = focal_index if (i == focal and focal_index is not None) else idx[:, c]
        x[:, c], qv[:, c], Lv[:, c], ev[:, c] = X[rows], q[rows], L[rows], e[rows]
    return x, qv, Lv, ev


def _chunks(S: int, N: int):
    step = max(1, _CHUNK_ATOMS // max(N, 1))
    for lo in range(0, S, step):
        yield slice(lo, min(S, lo + step))


def _eval(cost: TerminalCostSpec, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = np.empty(w.shape)
    for sl in _chunks(w.shape[0], w.shape[1]):
        out[sl] = cost.evaluate_batch(x[sl], w[sl])[0]
    return out


def _single_atom(cost: TerminalCostSpec, X: np.ndarray) -> np.ndarray:
    """``cost(X^j, delta_{X^j})`` per pool path."""
    return _eval(cost, X[:, None, :], np.ones((X.shape[0], 1)))[:, 0]


def log_product_density(st: DistributedStrategy, idx: np.ndarray) -> np.ndarray:
    """``sum_i ln q^i`` per world; exponentiate once, never as a running product."""
    out = np.zeros(idx.shape[0])
    for c, i in enumerate(st.columns):
        out += np.log(st.factor(i)[1][idx[:, c]])
    return out


def entropy_factorization(st: DistributedStrategy, worlds: int = 20000) -> tuple:
    """Monte Carlo ``E[Q^N sum_i ent_i / q_i]`` under plain draws, against ``sum_i S(q^i)``; returns (mc, se, exact)."""
    idx = _worlds(st, worlds, "check", tilted=False)
    _, qv, _, ev = _gather(st, idx)
    Q = np.exp(log_product_density(st, idx))
    val, se = mean_se(Q * np.sum(ev / qv, axis=1))
    exact = float(sum(st.factor(i)[3].mean() for i in range(st.N)))
    return val, se, exact


# ---------------------------------------------------------------------------
# costs and rewards


def player_cost(i: int, st: DistributedStrategy, config: FiniteGameConfig) -> tuple:
    """``E[Q^N g(X^i, mu_N)] + E[int Q^N ell^i]`` with ``mu_N`` the unit-weight empirical measure; (mean, se).

    Player ``i``'s factor runs over every pool path with weight ``q``; the
    others are drawn proportionally to their densities.
    """
    M = st.pool.size
    g = config.model.g
    X, q, L, _ = st.factor(i)
    if st.N == 1:
        return mean_se(q * (_single_atom(g, X) + L))
    if not g.measure_dependent:
        return mean_se(q * (g.g(X, st.pool.mu) + L))
    reps = max(1, config.samples // (M * st.N))
    vals = np.zeros(M)
    for r in range(reps):
        idx = _worlds(replace(st, seed=st.seed + 7919 * r), M, "tilted", True, focal=i)
        x, _, _, _ = _gather(st, idx, np.arange(M), focal=i)
        gv = _eval(g, x, np.full(idx.shape, 1.0 / st.N))
        vals += gv[:, st.columns.index(i)]
    return mean_se(q * (vals / reps + L))


def nature_reward(st: DistributedStrategy, config: FiniteGameConfig, worlds: Optional[int] = None) -> tuple:
    """``E[Q^N sum_i h(X^i, mu_N)] + E[int Q^N sum_i ell^i] - S^(N)(Q^N)``; (mean, se).

    The running and entropy parts are sums of single-factor expectations and
    are taken exactly over the pool.
    """
    h = config.reward_cost
    lin = sum(float(np.mean(st.factor(i)[1] * st.factor(i)[2] - st.factor(i)[3])) for i in range(st.N))
    if st.N == 1:
        X, q, _, _ = st.factor(0)
        m, se = mean_se(q * _single_atom(h, X))
        return m + lin, se
    S = worlds if worlds is not None else max(1, config.samples // st.N)
    idx = _worlds(st, S, "tilted", True)
    x, _, _, _ = _gather(st, idx)
    hv = _eval(h, x, np.full(idx.shape, 1.0 / st.N))
    m, se = mean_se(hv.sum(axis=1))
    return m + lin, se


def _surrogate_terms(st: DistributedStrategy, config: FiniteGameConfig, idx, focal, potential: bool):
    """Per-world interaction part of the surrogate reward (the running/entropy parts are added exactly)."""
    h = config.reward_cost
    M = st.pool.size
    x, qv, _, _ = _gather(st, idx, np.arange(M) if focal is not None else None, focal=focal)
    w = qv / st.N
    if potential:
        g0 = h.decomposition[0]
        base = np.sum(qv * g0.g(x.reshape(-1, x.shape[2]), None).reshape(qv.shape), axis=1)
        pot = np.empty(idx.shape[0])
        for sl in _chunks(idx.shape[0], st.N):
            pot[sl] = h.potential_batch(x[sl], w[sl])
        return base + st.N * pot
    return np.sum(qv * _eval(h, x, w), axis=1)


def _linear_terms(st: DistributedStrategy) -> float:
    return sum(float(np.mean(st.factor(i)[1] * st.factor(i)[2] - st.factor(i)[3])) for i in range(st.N))


def surrogate_reward(st: DistributedStrategy, config: FiniteGameConfig, potential: bool = False,
                     worlds: Optional[int] = None) -> tuple:
    """Nature's surrogate reward, with the q-weighted empirical measure ``1/N sum_j q^j delta_{X^j}``; (mean, se).

    ``potential`` replaces the interaction sum by ``sum_i q^i g0(X^i) + N G(.)``.
    """
    h = config.reward_cost
    if potential and (h.potential_batch is None or h.decomposition is None):
        raise ValueError("the potential form needs a cost with a potential and a split g0 + g1")
    S = worlds if worlds is not None else max(1, config.samples // st.N)
    idx = _worlds(st, S, "plain", False)
    m, se = mean_se(_surrogate_terms(st, config, idx, None, potential))
    return m + _linear_terms(st), se


# ---------------------------------------------------------------------------
# deviations of a player


@dataclass(frozen=True)
class EffectiveCost:
    spec: TerminalCostSpec
    exact: bool
    grid: np.ndarray
    correction: np.ndarray  # G_N - g(., mu) on the grid


def effective_terminal_cost(st: DistributedStrategy, config: FiniteGameConfig, i: int = 0) -> EffectiveCost:
    """``G_N(x) = E[g(x, 1/N (delta_x + sum_{j != i} delta_{X^j}))]`` with the others under their densities.

    By independence ``R^i = E[q^i (G_N(X^i) + L^i)]`` exactly. ``G_N`` is
    ``g(x, mu)`` plus a correction interpolated by a cubic spline on a
    quantile grid and held constant beyond it. One-dimensional states only.
    """
    from scipy.interpolate import CubicSpline

    g = config.model.g
    mu = st.pool.mu
    if not g.measure_dependent:
        return EffectiveCost(g, True, np.zeros(0), np.zeros(0))
    if st.pool.X_T.shape[1] != 1:
        raise NotImplementedError("the interpolated effective cost is one-dimensional")
    xs_pool = st.pool.X_T[:, 0]
    lo, hi = np.quantile(xs_pool, [0.0005, 0.9995])
    pad = 0.25 * (hi - lo)
    grid = np.linspace(lo - pad, hi + pad, config.grid_points)
    S = max(64, config.samples // st.N)
    idx = _worlds(st, S, "effective", True, focal=i)
    col = st.columns.index(i)
    x, _, _, _ = _gather(st, np.where(idx < 0, 0, idx))
    w = np.full(idx.shape, 1.0 / st.N)
    G = np.empty(grid.size)
    for k, xv in enumerate(grid):
        x[:, col, 0] = xv
        G[k] = float(_eval(g, x, w)[:, col].mean())
    corr = G - g.g(grid[:, None], mu)
    spline = CubicSpline(grid, corr)
    dspline = spline.derivative()
    a, b = grid[0], grid[-1]

    def gfun(xx, m=None):
        xx = np.asarray(xx, float)
        return g.g(xx, mu) + spline(np.clip(xx[..., 0], a, b))

    def gradfun(xx, m=None):
        xx = np.asarray(xx, float)
        inside = (xx[..., 0] >= a) & (xx[..., 0] <= b)
        return g.grad_x(xx, mu) + (dspline(np.clip(xx[..., 0], a, b)) * inside)[..., None]

    spec = TerminalCostSpec(g=gfun, grad_x=gradfun, hess_bound=g.hess_bound, growth_const=g.growth_const,
                            measure_dependent=False, growth_exponent=g.growth_exponent, name="custom")
    return EffectiveCost(spec, False, grid, corr)


def _alt_paths(st: DistributedStrategy, config: FiniteGameConfig, psi: ControlField):
    X = simulate_state(config.model.coeffs, psi, st.pool.ps.W, x0=st.pool.ps.x0)
    L = np.asarray(config.model.ell.ell(0.0, psi.values), float).sum(axis=1) * st.pool.ps.grid.dt
    return X.terminal, L


def player_deviation_gain(i: int, alt_psi: ControlField, st: DistributedStrategy, config: FiniteGameConfig,
                          eff: Optional[EffectiveCost] = None) -> tuple:
    """``R^i(mean-field profile) - R^i(player i switches to alt_psi)``; (mean, paired se)."""
    eff = effective_terminal_cost(st, config, i) if eff is None else eff
    q = st.factor(i)[1]
    X0, L0 = st.factor(i)[0], st.factor(i)[2]
    X1, L1 = _alt_paths(st, config, alt_psi)
    mu = st.pool.mu
    return mean_se(q * ((eff.spec.g(X0, mu) + L0) - (eff.spec.g(X1, mu) + L1)))


def player_best_deviation(st: DistributedStrategy, config: FiniteGameConfig, i: int = 0,
                          eff: Optional[EffectiveCost] = None):
    """Best response of player i to the frozen others and Nature; returns (control, effective cost)."""
    eff = effective_terminal_cost(st, config, i) if eff is None else eff
    if eff.exact:
        # same terminal cost as the mean-field problem: the saddle control is already the best response
        return st.pool.psi, eff
    m = replace(config.model, g=eff.spec)
    opts = replace(config.saddle, inner_iters=max(config.saddle.inner_iters, 60))
    br = player_best_response(st.pool.mu, st.pool.q, m, st.pool.ps, st.pool.psi, opts, tol=config.br_tol)
    return br.psi, eff


# ---------------------------------------------------------------------------
# deviations of Nature


def _tilt(st: DistributedStrategy, weight: np.ndarray, label: str) -> FactorOverride:
    q0 = st.pool.q_T
    raw = q0 * weight
    ratio = float(np.mean(q0)) / float(np.mean(raw))
    qt = raw * ratio
    ent = st.pool.gamma * qt * np.log(np.maximum(qt, 1e-300))
    return FactorOverride(q_T=qt, ent=ent, label=label)


def unit_density(st: DistributedStrategy) -> FactorOverride:
    M = st.pool.size
    return FactorOverride(q_T=np.ones(M), ent=np.zeros(M), label="unit")


def scaled_tilt(st: DistributedStrategy, power: float) -> FactorOverride:
    """``q*^power`` renormalised: a tilt of the same shape, stronger or weaker."""
    lq = np.log(st.pool.q_T)
    return _tilt(st, np.exp((power - 1.0) * (lq - lq.max())), f"power {power:g}")


def gibbs_local_tilt(st: DistributedStrategy, config: FiniteGameConfig, i: int = 0) -> FactorOverride:
    """Gibbs re-tilt of factor i against the finite-N first variation of the surrogate reward.

    The variation in the weight of factor i at state x is
    ``h(x, m_N) + 1/N sum_k q^k dh/dm(X^k, m_N)(x)`` with ``m_N`` the
    q-weighted empirical measure; relative to the mean-field Gibbs density
    only its difference from ``h(x, mu)`` enters the exponent.
    """
    from scipy.interpolate import CubicSpline

    h = config.reward_cost
    if not h.measure_dependent:
        return _tilt(st, np.ones(st.pool.size), "gibbs")
    if st.pool.X_T.shape[1] != 1:
        raise NotImplementedError("the interpolated Gibbs tilt is one-dimensional")
    if h.flat_batch is None:
        raise ValueError("the Gibbs tilt needs a batched flat derivative")
    xs_pool = st.pool.X_T[:, 0]
    lo, hi = np.quantile(xs_pool, [0.0005, 0.9995])
    pad = 0.25 * (hi - lo)
    grid = np.linspace(lo - pad, hi + pad, config.grid_points)
    S = int(min(4096, max(64, config.samples // st.N)))
    idx = _worlds(st, S, "gibbs", False, focal=i)
    col = st.columns.index(i)
    x, qv, _, _ = _gather(st, np.where(idx < 0, 0, idx))
    qv[:, col] = 1.0
    A = np.empty(grid.size)
    for k, xv in enumerate(grid):
        x[:, col, 0] = xv
        w = qv / st.N
        hv = _eval(h, x, w)[:, col]
        fl = h.flat_batch(x, w, np.array([[xv]]))[:, :, 0]  # [S, N]
        A[k] = float(np.mean(hv + np.sum(w * fl, axis=1)))
    corr = A - h.g(grid[:, None], st.pool.mu)
    spline = CubicSpline(grid, corr)
    D = spline(np.clip(xs_pool, grid[0], grid[-1]))
    return _tilt(st, np.exp((D - D.max()) / st.pool.gamma), "gibbs")


def _check_budget(ov: FactorOverride, st: DistributedStrategy, config: FiniteGameConfig):
    if ov.ent is None:
        return
    S = float(np.mean(ov.ent))
    if S > config.entropy_budget:
        raise ValueError(f"deviation entropy {S:.4g} exceeds the budget {config.entropy_budget:g}")


def nature_local_deviation_gain(i: int, alt: FactorOverride, st: DistributedStrategy, config: FiniteGameConfig,
                                reps: int = 1) -> tuple:
    """``(surrogate(Q~) - surrogate(Q*)) / N`` with only factor i re-weighted; (mean, paired se).

    Factor i sweeps the whole pool in every world; the other factors are
    shared between the two evaluations.
    """
    _check_budget(alt, st, config)
    dev = st.with_override(i, FactorOverride(q_T=alt.q_T, ent=alt.ent, label=alt.label))
    M = st.pool.size
    diffs = np.zeros(M)
    for r in range(reps):
        base = replace(st, seed=st.seed + 7919 * r)
        idx = _worlds(base, M, "plain", False, focal=i)
        a = _surrogate_terms(dev, config, idx, i, False)
        b = _surrogate_terms(base, config, idx, i, False)
        diffs += a - b
    lin = _linear_terms(dev) - _linear_terms(st)
    m, se = mean_se(diffs / reps)
    return (m + lin) / st.N, se / st.N


def nature_global_deviation_gain(alt: FactorOverride, st: DistributedStrategy, config: FiniteGameConfig,
                                 worlds: Optional[int] = None) -> tuple:
    """Every factor re-weighted by ``alt``; normalised gain of the potential surrogate; (mean, paired se)."""
    h = config.reward_cost
    if h.potential_batch is None or h.decomposition is None:
        raise ValueError("global deviations are only assessed for potential games")
    _check_budget(alt, st, config)
    dev = st
    for i in range(st.N):
        dev = dev.with_override(i, alt)
    S = worlds if worlds is not None else max(1, config.samples // st.N)
    idx = _worlds(st, S, "plain", False)
    d = _surrogate_terms(dev, config, idx, None, True) - _surrogate_terms(st, config, idx, None, True)
    m, se = mean_se(d)
    return (m + _linear_terms(dev) - _linear_terms(st)) / st.N, se / st.N


# ---------------------------------------------------------------------------
# tilted law of large numbers


@dataclass(frozen=True)
class LLNEstimate:
    probability: float
    se: float
    N: int
    eps: float
    trials: int

    def __float__(self) -> float:
        return self.probability


def tilted_lln_probability(q: np.ndarray, X: np.ndarray, N: int, eps: float, n_trials: int = 2000, seed: int = 0,
                           reference_size: int = 4000) -> LLNEstimate:
    """``E[prod q^i 1{FM(1/N sum delta_{X^i}, (qP)_X) > eps}]`` for i.i.d. copies of (q, X).

    The product tilt is realised by drawing the copies proportionally to q;
    the reference ``(qP)_X`` is the q-weighted pool, resampled.
    """
    q = np.asarray(q, float)
    X = np.asarray(X, float)
    X = X[:, None] if X.ndim == 1 else X
    M = q.size
    mass = float(q.mean())
    if eps >= 1.0 + mass:
        return LLNEstimate(0.0, 0.0, N, eps, 0)
    ref = WeightedMeasure(X, q / M)
    if ref.size > reference_size:
        ref = ref.resample(reference_size)
    rng = np.random.default_rng([seed, N, _PURPOSE["lln"]])
    idx = _stratified(rng, q, n_trials * N, M).reshape(n_trials, N)
    hits = np.empty(n_trials)
    w = np.full(N, 1.0 / N)
    for t in range(n_trials):
        hits[t] = fm_distance(WeightedMeasure(X[idx[t]], w), ref) > eps
    # the draws carry mass^N relative to the unit-mean tilt
    scale = mass ** N
    p, se = mean_se(hits * scale)
    return LLNEstimate(p, se, N, eps, n_trials)


def weighted_lln_moment(q: np.ndarray, values: np.ndarray, N: int, n_trials: int = 2000, seed: int = 0) -> tuple:
    """``N^2 E|1/N sum q^i phi^i - E[q phi]|^4`` for a bounded functional; stays bounded in N."""
    q = np.asarray(q, float)
    v = np.asarray(values, float)
    target = float(np.mean(q * v))
    rng = np.random.default_rng([seed, N, _PURPOSE["check"]])
    idx = rng.integers(0, q.size, size=(n_trials, N))
    dev = np.mean(q[idx] * v[idx], axis=1) - target
    return mean_se(N ** 2 * dev ** 4)


# ---------------------------------------------------------------------------
# epsilon curves


@dataclass(frozen=True)
class DeviationCurve:
    Ns: tuple
    gains: tuple  # (mean, se) of the largest catalogue gain per N
    kind: str
    seeds: tuple
    members: tuple  # catalogue entry achieving the maximum
    catalogue: tuple = ()  # per N, {label: (mean, se)}
    slope: float = math.nan
    spearman_rho: float = math.nan
    spearman_p: float = math.nan

    def to_json(self) -> dict:
        return {"kind": self.kind, "Ns": list(self.Ns), "gains": [list(g) for g in self.gains],
                "seeds": list(self.seeds), "members": list(self.members),
                "catalogue": [{k: list(v) for k, v in c.items()} for c in self.catalogue],
                "slope": self.slope, "spearman_rho": self.spearman_rho, "spearman_p": self.spearman_p,
                "note": "maximum over a finite deviation catalogue; a lower estimate of the supremum"}

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# schema=1\n")
            fh.write("N,mean,se,seed,member\n")
            for N, (m, s), sd, mem in zip(self.Ns, self.gains, self.seeds, self.members):
                fh.write(f"{N},{m!r},{s!r},{sd},{mem}\n")


def _player_catalogue(st, config, eff):
    P, K, n = st.pool.psi.values.shape
    fam = {"zero": ControlField.zeros(P, K, n), "half": st.pool.psi.scaled(0.5), "boost": st.pool.psi.scaled(1.5)}
    out = {}
    for label, psi in fam.items():
        out[label] = player_deviation_gain(0, psi, st, config, eff)
    br, _ = player_best_deviation(st, config, 0, eff)
    if br is st.pool.psi:
        out["best_response"] = (0.0, 0.0)
    else:
        out["best_response"] = player_deviation_gain(0, br, st, config, eff)
    return out


def _nature_catalogue(st, config):
    out = {}
    for ov in (unit_density(st), scaled_tilt(st, 0.5), scaled_tilt(st, 1.5), gibbs_local_tilt(st, config, 0)):
        try:
            out[ov.label] = nature_local_deviation_gain(0, ov, st, config)
        except ValueError:
            continue  # over the entropy budget
    return out


def _global_catalogue(st, config):
    out = {}
    for ov in (unit_density(st), scaled_tilt(st, 0.5), scaled_tilt(st, 1.5)):
        try:
            out[ov.label] = nature_global_deviation_gain(ov, st, config)
        except ValueError:
            continue
    return out


def epsilon_curve(kind: str, Ns: Sequence[int], s: SaddleState, model: Model, ps: PathSet,
                  config: FiniteGameConfig) -> DeviationCurve:
    """Largest catalogue deviation gain for each N, with its standard error and the decay statistics."""
    from scipy.stats import spearmanr

    Ns = tuple(int(N) for N in Ns)
    if list(Ns) != sorted(Ns):
        raise ValueError("Ns must be increasing")
    if kind not in ("player", "nature_local", "nature_global_potential"):
        raise ValueError(f"unknown deviation kind {kind!r}")
    gains, members, cats, seeds = [], [], [], []
    for N in Ns:
        st = lift_mean_field_strategy(s, model, ps, N, config.seed)
        if kind == "player":
            cat = _player_catalogue(st, config, effective_terminal_cost(st, config, 0))
        elif kind == "nature_local":
            cat = _nature_catalogue(st, config)
        else:
            cat = _global_catalogue(st, config)
        best = max(cat, key=lambda k: cat[k][0])
        gains.append(tuple(float(v) for v in cat[best]))
        members.append(best)
        cats.append(cat)
        seeds.append(config.seed)
    means = np.array([g[0] for g in gains])
    pos = means > 0
    slope = float(np.polyfit(np.log(np.array(Ns)[pos]), np.log(means[pos]), 1)[0]) if pos.sum() >= 2 else math.nan
    if np.ptp(means) > 0 and len(Ns) >= 3:
        rho, p = spearmanr(Ns, means)
        rho, p = float(rho), float(p)
    else:
        rho, p = math.nan, math.nan
    return DeviationCurve(Ns, tuple(gains), kind, tuple(seeds), tuple(members), tuple(cats), slope, rho, p)


def curve_json(curve: DeviationCurve) -> str:
    return json.dumps(curve.to_json(), sort_keys=True)
