"""Measure fixed point under Nature's effective measure, and the stability diagnostics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .measure import FMResult, WeightedMeasure, fm_distance, fm_distance_report
from .model import Model, strict_convexity_margin
from .saddle import PathSet, SaddleOptions, SaddleState, make_pathset, solve_saddle
from .simulate import ControlField, mean_se

__all__ = [
    "WeightedMeasure", "FMResult", "fm_distance", "fm_distance_report", "phi_map", "EquilibriumOptions",
    "EquilibriumReport", "solve_equilibrium", "StabilityRecord", "stability_check", "calibrated_constant",
    "write_measure_csv", "read_measure_csv",
]


def phi_map(mu: WeightedMeasure, model: Model, ps: PathSet, opts: Optional[SaddleOptions] = None,
            start: Optional[ControlField] = None):
    """``mu -> (q_T^mu P) o (X_T^mu)^{-1}`` as the cloud ``{(X_T^i, q_T^i / n_paths)}``.

    Returns the image and the saddle state it came from.
    """
    s = solve_saddle(mu, model, ps, opts, start)
    img = WeightedMeasure(s.X.terminal, s.q.terminal / ps.n_paths)
    return img, s


@dataclass(frozen=True)
class EquilibriumOptions:
    damping: float = 0.5
    max_iters: int = 30
    tol: float = 5e-3
    particles: int = 20000
    init: Optional[WeightedMeasure] = None
    saddle: SaddleOptions = field(default_factory=SaddleOptions)
    damping_floor: float = 1.0 / 64

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")

    def to_json(self) -> dict:
        return {"damping": self.damping, "max_iters": self.max_iters, "tol": self.tol,
                "particles": self.particles, "saddle": self.saddle.to_json()}


@dataclass(frozen=True)
class EquilibriumReport:
    mu_star: WeightedMeasure
    saddle: SaddleState
    iterates: tuple  # FM distances between successive measures
    converged: bool
    damping_used: float
    consistency: float  # FM(mu*, Phi(mu*)) on the solving ensemble
    means: tuple = ()
    masses: tuple = ()
    cesaro: Optional[WeightedMeasure] = None
    saddle_converged: bool = True

    def summary(self) -> dict:
        return {
            "converged": self.converged, "damping_used": self.damping_used, "iterates": list(self.iterates),
            "consistency": self.consistency, "means": [list(m) for m in self.means], "masses": list(self.masses),
            "mu_star": {"mass": self.mu_star.total_mass, "mean": self.mu_star.mean().tolist(),
                        "second_moment": self.mu_star.moment(2.0), "size": self.mu_star.size},
            "saddle": self.saddle.summary(), "saddle_converged": self.saddle_converged,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


def _initial_measure(model: Model, ps: PathSet) -> WeightedMeasure:
    return WeightedMeasure.empirical(ps.x0)


def solve_equilibrium(model: Model, ps: PathSet, opts: Optional[EquilibriumOptions] = None) -> EquilibriumReport:
    """Damped fixed-point iteration ``mu <- (1 - theta) mu + theta Phi(mu)``.

    Mixtures are unions of clouds followed by systematic resampling. The
    damping halves whenever the successive distance grows. Saddle solves are
    warm-started from the previous control. Existence does not imply that
    this iteration converges; non-convergence is reported, with the Cesaro
    average of the iterates as a candidate.
    """
    opts = EquilibriumOptions() if opts is None else opts
    mu = opts.init if opts.init is not None else _initial_measure(model, ps)
    theta = opts.damping
    dists, means, masses = [], [], []
    cesaro_pts, cesaro_w = [], []
    start = None
    converged = False
    saddle_ok = True
    img, s = phi_map(mu, model, ps, opts.saddle, start)
    saddle_ok = saddle_ok and s.converged
    for it in range(opts.max_iters):
        start = s.psi
        nxt = mu.mix(img, theta)
        if nxt.size > opts.particles:
            nxt = nxt.resample(opts.particles)
        d = fm_distance(mu, nxt)
        if dists and d > dists[-1]:
            theta = max(opts.damping_floor, 0.5 * theta)
        dists.append(d)
        means.append(tuple(nxt.mean().tolist()))
        masses.append(nxt.total_mass)
        cesaro_pts.append(nxt.points)
        cesaro_w.append(nxt.weights)
        mu = nxt
        img, s = phi_map(mu, model, ps, opts.saddle, start)
        saddle_ok = saddle_ok and s.converged
        if d < opts.tol:
            converged = True
            break
    consistency = fm_distance(mu, img)
    cesaro = None
    if not converged and cesaro_pts:
        w = np.concatenate(cesaro_w) / len(cesaro_w)
        cesaro = WeightedMeasure(np.vstack(cesaro_pts), w).resample(opts.particles)
    return EquilibriumReport(mu, s, tuple(dists), converged, theta, consistency, tuple(means), tuple(masses),
                             cesaro, saddle_ok)


def out_of_sample_consistency(report: EquilibriumReport, model: Model, n_paths: int, n_steps: int, seed: int,
                              opts: Optional[SaddleOptions] = None) -> float:
    """``FM(mu*, Phi(mu*))`` with Phi evaluated on a fresh ensemble."""
    ps = make_pathset(model, n_paths, n_steps, seed)
    img, _ = phi_map(report.mu_star, model, ps, opts)
    return fm_distance(report.mu_star, img)


# ---------------------------------------------------------------------------
# stability


@dataclass(frozen=True)
class StabilityRecord:
    lhs1: float
    rhs1: float
    slack1: float
    slack1_se: float
    lhs2: float
    rhs2: float
    slack2: float
    slack2_se: float
    c: float
    adjoint_lhs: float
    adjoint_rhs: float
    adjoint_diff_se: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def calibrated_constant(model: Model, n_pairs: int = 64, seed: int = 0, box: float = 2.0) -> float:
    """``min(c_f, strong_convexity / 2)`` with c_f the sampled strict-convexity margin of f*."""
    rng = np.random.default_rng(seed)
    d = model.coeffs.d
    pairs = []
    for _ in range(n_pairs):
        a = np.concatenate([[0.0], rng.uniform(-box, box, d)])
        b = np.concatenate([[0.0], rng.uniform(-box, box, d)])
        if model.driver.alpha > 0:
            a[0], b[0] = rng.uniform(-0.4, 0.4, 2) * model.driver.alpha
        pairs.append((a, b))
    cf = strict_convexity_margin(model.driver, pairs, 0.5)
    return min(cf, 0.5 * model.ell.strong_convexity)


def stability_check(mu: WeightedMeasure, mu_tilde: WeightedMeasure, s: SaddleState, s_tilde: SaddleState,
                    model: Model, c: Optional[float] = None) -> StabilityRecord:
    """Both stability inequalities between two saddles on the same ensemble.

    slack1 = E[q~_T (g(X_T, mu~) - g(X_T, mu)) + q_T (g(X~_T, mu) - g(X~_T, mu~))] - c D
    slack2 = E[(q_T - q~_T)(g(X_T, mu) - g(X~_T, mu~))]
             - E[(q_T grad g(X_T, mu) - q~_T grad g(X~_T, mu~)) . (X_T - X~_T)] - c D
    with ``D = E int (q + q~)(|dpsi|^2 + |dY*|^2 + |dZ*|^2) dt``. Standard errors
    are per-path, so common random numbers cancel in the differences.
    """
    if c is None:
        c = calibrated_constant(model)
    K = s.psi.values.shape[1]
    dt = model.coeffs.T / K
    g = model.g
    X, Xt = s.X.terminal, s_tilde.X.terminal
    q, qt = s.q, s_tilde.q
    qT, qtT = q.terminal, qt.terminal
    qs = q.q_values[:, :-1] + qt.q_values[:, :-1]
    dpsi = np.sum((s_tilde.psi.values - s.psi.values) ** 2, axis=2)
    dys = (s_tilde.nc.y_star - s.nc.y_star) ** 2
    dzs = np.sum((s_tilde.nc.z_star - s.nc.z_star) ** 2, axis=2)
    D = c * (qs * (dpsi + dys + dzs)).sum(axis=1) * dt

    g_X_mu, g_X_mut = g.g(X, mu), g.g(X, mu_tilde)
    g_Xt_mu, g_Xt_mut = g.g(Xt, mu), g.g(Xt, mu_tilde)
    l1 = qtT * (g_X_mut - g_X_mu) + qT * (g_Xt_mu - g_Xt_mut)
    grad = g.grad_x(X, mu)
    gradt = g.grad_x(Xt, mu_tilde)
    l2 = (qT - qtT) * (g_X_mu - g_Xt_mut)
    r2 = np.sum((qT[:, None] * grad - qtT[:, None] * gradt) * (X - Xt), axis=1)
    s1, se1 = mean_se(l1 - D)
    s2, se2 = mean_se(l2 - r2 - D)

    # E[p_T . (X~_T - X_T)] = -E[int q grad ell . (psi~ - psi)]
    pT = s.adjoint.p[:, -1]
    adj_l = np.sum(pT * (Xt - X), axis=1)
    qk = q.q_values[:, :-1, None]
    adj_r = -np.sum(qk * model.ell.grad(0.0, s.psi.values) * (s_tilde.psi.values - s.psi.values), axis=(1, 2)) * dt
    _, adj_se = mean_se(adj_l - adj_r)
    return StabilityRecord(float(l1.mean()), float(D.mean()), s1, se1, float(l2.mean()), float((r2 + D).mean()),
                           s2, se2, c, float(adj_l.mean()), float(adj_r.mean()), adj_se)


# ---------------------------------------------------------------------------
# CSV


def write_measure_csv(mu: WeightedMeasure, path) -> None:
    cols = [f"x{i}" for i in range(mu.dim)] + ["weight"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# schema=1\n")
        fh.write(",".join(cols) + "\n")
        for p, w in zip(mu.points, mu.weights):
            fh.write(",".join(repr(float(v)) for v in p) + "," + repr(float(w)) + "\n")


def read_measure_csv(path) -> WeightedMeasure:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("x"):
                continue
            rows.append([float(v) for v in line.strip().split(",")])
    arr = np.asarray(rows, float)
    return WeightedMeasure(arr[:, :-1], arr[:, -1])
