"""Refutation battery for the uniqueness conditions on the terminal cost.

Every test returns a :class:`MonotonicityReport` whose ``worst_lhs`` is
oriented so that the condition holds when it is ``<= 0``. A pass means no
counterexample was found among the draws; it is not a proof.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .measure import WeightedMeasure
from .model import FeatureMap, TerminalCostSpec, _bump, feature_kernel_cost

__all__ = [
    "MonotonicityReport", "KernelCost", "JointSampler", "default_samplers", "joint_lhs_samples",
    "flat_displacement_test", "displacement_monotone_test", "flat_antimonotone_test", "negative_type_test",
    "build_kernel_cost", "potential_terminal_cost", "lambda_threshold", "reproduce_witness",
]

Z_FAIL = 3.0
FORM_TOL = 1e-10
_CHUNK = 2048


@dataclass(frozen=True)
class MonotonicityReport:
    worst_lhs: float
    worst_se: float
    witness: dict
    n_samples: int
    verdict: str  # "passed" (no counterexample found) or "failed"
    test: str = ""

    @property
    def passed(self) -> bool:
        return self.verdict == "passed"

    def to_json(self) -> dict:
        return {"test": self.test, "worst_lhs": self.worst_lhs, "worst_se": self.worst_se,
                "witness": self.witness, "n_samples": self.n_samples, "verdict": self.verdict}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


# ---------------------------------------------------------------------------
# samplers of joint laws (q, q', X, X')


@dataclass(frozen=True)
class JointSampler:
    """Random joint law of ``(q, q', X, X')`` on ``size`` atoms of equal probability.

    ``X ~ N(loc, spread^2)``; ``X' = rho X + sqrt(1 - rho^2) N' + shift``;
    ``q`` and ``q'`` are exponential tilts in ``X`` and ``X'`` rescaled to
    masses ``mass`` and ``mass_p``. ``same_points`` forces ``X' = X``.
    """

    size: int = 2000
    n: int = 1
    loc: float = 0.0
    spread: float = 1.0
    rho: float = 0.5
    shift: float = 0.5
    tilt: float = 0.5
    tilt_p: float = -0.5
    mass: float = 1.0
    mass_p: float = 1.0
    same_points: bool = False
    same_density: bool = False

    def __call__(self, rng: np.random.Generator):
        X = self.loc + self.spread * rng.standard_normal((self.size, self.n))
        if self.same_points:
            Xp = X.copy()
        else:
            Xp = self.rho * X + np.sqrt(max(0.0, 1.0 - self.rho ** 2)) * self.spread * \
                rng.standard_normal((self.size, self.n)) + self.shift
        q = np.exp(self.tilt * X[:, 0] - np.max(self.tilt * X[:, 0]))
        q *= self.mass / q.mean()
        if self.same_density:
            qp = q.copy()
        else:
            qp = np.exp(self.tilt_p * Xp[:, 0] - np.max(self.tilt_p * Xp[:, 0]))
            qp *= self.mass_p / qp.mean()
        return q, qp, X, Xp


def default_samplers(count: int = 10, size: int = 2000, n: int = 1, seed: int = 0) -> list:
    """A reproducible, deliberately varied family of joint laws with masses at most 1."""
    rng = np.random.default_rng([seed, 0xD15])
    out = []
    for i in range(count):
        out.append(JointSampler(
            size=size, n=n, loc=float(rng.uniform(-1, 1)), spread=float(rng.uniform(0.3, 2.0)),
            rho=float(rng.uniform(-0.9, 0.95)), shift=float(rng.uniform(-1.5, 1.5)),
            tilt=float(rng.uniform(-1.0, 1.0)), tilt_p=float(rng.uniform(-1.0, 1.0)),
            mass=float(rng.uniform(0.5, 1.0)), mass_p=float(rng.uniform(0.5, 1.0)),
            same_points=bool(i % 5 == 4),
        ))
    return out


def _laws(q, qp, X, Xp):
    M = X.shape[0]
    return WeightedMeasure(X, q / M), WeightedMeasure(Xp, qp / M)


def joint_lhs_samples(g: TerminalCostSpec, q, qp, X, Xp) -> np.ndarray:
    """Per-atom terms of ``E[(q - q')(g(X, m) - g(X', m'))] - E[(q grad g(X, m) - q' grad g(X', m')) . (X - X')]``.

    ``m = (qP)_X`` and ``m' = (q'P)_{X'}`` are built from the same atoms.
    """
    m, mp = _laws(q, qp, X, Xp)
    gX, gXp = g.g(X, m), g.g(Xp, mp)
    dX, dXp = g.grad_x(X, m), g.grad_x(Xp, mp)
    flat = (q - qp) * (gX - gXp)
    disp = np.sum((q[:, None] * dX - qp[:, None] * dXp) * (X - Xp), axis=1)
    return flat - disp


def _mean_se(v):
    v = np.asarray(v, float)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def _battery(name, term_fn, sampler, n_samples, seed) -> MonotonicityReport:
    worst, worst_se, witness = -np.inf, 0.0, {}
    failed = False
    for s in range(n_samples):
        rng = np.random.default_rng([seed, s])
        val, se = _mean_se(term_fn(sampler(rng)))
        fails_here = val > Z_FAIL * se + FORM_TOL
        # keep the failing draw with the largest z-score, else the largest value
        better = (fails_here and not failed) or (fails_here == failed and val > worst)
        if better:
            worst, worst_se = val, se
            witness = {"seed": int(seed), "sample": int(s), "lhs": val, "se": se}
        failed = failed or fails_here
    return MonotonicityReport(float(worst), float(worst_se), witness, int(n_samples),
                              "failed" if failed else "passed", name)


def flat_displacement_test(g: TerminalCostSpec, sampler: Callable, n_samples: int = 20,
                           seed: int = 0) -> MonotonicityReport:
    """Joint flat non-increasing / displacement non-decreasing condition; holds when LHS <= 0."""
    return _battery("flat_displacement", lambda d: joint_lhs_samples(g, *d), sampler, n_samples, seed)


def displacement_monotone_test(g: TerminalCostSpec, sampler: Callable, n_samples: int = 20,
                               seed: int = 0) -> MonotonicityReport:
    """``E[(grad g(X, law X) - grad g(X', law X')) . (X - X')] >= 0``, reported with LHS the negated value.

    Only ``(X, X')`` of the sampler output is used; the laws carry unit densities.
    """

    def terms(d):
        _, _, X, Xp = d
        M = X.shape[0]
        m, mp = WeightedMeasure(X, np.full(M, 1.0 / M)), WeightedMeasure(Xp, np.full(M, 1.0 / M))
        return -np.sum((g.grad_x(X, m) - g.grad_x(Xp, mp)) * (X - Xp), axis=1)

    return _battery("displacement_monotone", terms, sampler, n_samples, seed)


def flat_antimonotone_test(g: TerminalCostSpec, pairs: Sequence) -> MonotonicityReport:
    """``int (g(x, m) - g(x, m')) d(m - m') <= 0`` evaluated exactly on each cloud pair."""
    worst, witness = -np.inf, {}
    for i, (m, mp) in enumerate(pairs):
        val = m.integrate(g.g(m.points, m) - g.g(m.points, mp)) - mp.integrate(g.g(mp.points, m) - g.g(mp.points, mp))
        if val > worst:
            worst, witness = float(val), {"pair": i, "lhs": float(val)}
    scale = 1.0 + max(abs(worst), 0.0)
    verdict = "failed" if worst > FORM_TOL * scale else "passed"
    return MonotonicityReport(float(worst), 0.0, witness, len(pairs), verdict, "flat_antimonotone")


def reproduce_witness(report: MonotonicityReport, g: TerminalCostSpec, sampler: Callable) -> tuple:
    """Re-evaluate the stored witness draw; returns (lhs, se)."""
    w = report.witness
    rng = np.random.default_rng([w["seed"], w["sample"]])
    d = sampler(rng)
    if report.test == "displacement_monotone":
        _, _, X, Xp = d
        M = X.shape[0]
        m, mp = WeightedMeasure(X, np.full(M, 1.0 / M)), WeightedMeasure(Xp, np.full(M, 1.0 / M))
        return _mean_se(-np.sum((g.grad_x(X, m) - g.grad_x(Xp, mp)) * (X - Xp), axis=1))
    return _mean_se(joint_lhs_samples(g, *d))


# ---------------------------------------------------------------------------
# kernels


def _gram(K: Callable, points: np.ndarray) -> np.ndarray:
    return np.asarray(K(points, points), float)


def negative_type_test(K: Callable, points: np.ndarray, h: Optional[np.ndarray] = None) -> float:
    """Largest of ``h^T K h`` over the columns of ``h`` and the top eigenvalue of ``(K + K^T)/2``.

    A value at or below rounding level means no positive direction was seen
    on these points. The eigenvalue certifies the symmetric part only; for
    antisymmetric kernels the quadratic form itself is what vanishes.
    """
    pts = np.asarray(points, float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] < 2:
        raise ValueError("need at least two points")
    G = _gram(K, pts)
    S = 0.5 * (G + G.T)
    vals = [float(np.linalg.eigvalsh(S)[-1])]
    if h is not None:
        H = np.asarray(h, float)
        H = H[:, None] if H.ndim == 1 else H
        vals.extend(float(v) for v in np.einsum("ik,ij,jk->k", H, G, H))
    return max(vals)


@dataclass(frozen=True)
class KernelCost:
    """Interaction kernel plus a convex bump; the induced cost is ``bump(x) + int K(x, y) dmu(y)``.

    Give ``features`` and ``matrix`` for the low-rank ``K = phi(x)^T A phi(y)``
    (analytic gradient), or a callable ``K`` with optional ``grad_x`` for a general kernel.
    """

    bump: str = "quadratic"
    lam: float = 1.0
    r_flag: int = 0
    features: Optional[FeatureMap] = None
    matrix: Optional[np.ndarray] = None
    K: Optional[Callable] = None
    grad_x: Optional[Callable] = None

    def kernel(self) -> Callable:
        if self.features is not None:
            A = np.atleast_2d(np.asarray(self.matrix, float))
            phi = self.features
            return lambda x, y: phi(np.asarray(x, float)) @ A @ phi(np.asarray(y, float)).T
        if self.K is None:
            raise ValueError("kernel needs either features and matrix or a callable K")
        return self.K


def _probe_points(n: int, count: int = 64, box: float = 3.0) -> np.ndarray:
    from scipy.stats import qmc

    return qmc.scale(qmc.Sobol(n, scramble=True, seed=7).random(count), -box * np.ones(n), box * np.ones(n))


def _generic_kernel_cost(kc: KernelCost, n: int) -> TerminalCostSpec:
    K = kc.K
    b0, db0 = _bump(kc.bump, kc.lam)

    def integral(x, mu, fn):
        out = []
        for lo in range(0, x.shape[0], _CHUNK):
            out.append(np.tensordot(fn(x[lo:lo + _CHUNK], mu.points), mu.weights, axes=([1], [0])))
        return np.concatenate(out, axis=0)

    def kgrad(x, y):
        if kc.grad_x is not None:
            return kc.grad_x(x, y)
        eps = 1e-6
        cols = []
        for j in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[j] = eps
            cols.append((K(x + e, y) - K(x - e, y)) / (2 * eps))
        return np.stack(cols, axis=-1)  # [m, k, n]

    def g(x, mu):
        x = np.asarray(x, float)
        return b0(x) + integral(x, mu, K)

    def grad(x, mu):
        x = np.asarray(x, float)
        return db0(x) + integral(x, mu, kgrad)

    g0 = TerminalCostSpec(g=lambda x, mu: b0(np.asarray(x, float)), grad_x=lambda x, mu: db0(np.asarray(x, float)),
                          hess_bound=kc.lam, growth_const=kc.lam, measure_dependent=False)
    g1 = TerminalCostSpec(g=lambda x, mu: integral(np.asarray(x, float), mu, K),
                          grad_x=lambda x, mu: integral(np.asarray(x, float), mu, kgrad),
                          hess_bound=0.0, growth_const=1.0, flat_derivative=lambda x, mu, y: K(x, y))
    return TerminalCostSpec(g=g, grad_x=grad, hess_bound=kc.lam, growth_const=max(1.0, kc.lam),
                            decomposition=(g0, g1), flat_derivative=lambda x, mu, y: K(x, y),
                            growth_exponent=2.0 if kc.bump == "quadratic" else 1.0, name="custom")


def build_kernel_cost(kc: KernelCost, n: int = 1, probe: Optional[np.ndarray] = None,
                      require_negative_type: bool = True) -> TerminalCostSpec:
    """Terminal cost induced by a kernel and a convex bump.

    The quadratic bump belongs with ``r_flag = 0`` and the square-root bump
    with ``r_flag = 1``; other pairings are rejected because the growth
    bounds would not match. With ``require_negative_type`` the kernel must
    show no positive direction on a probe sample.
    """
    expected = {"quadratic": 0, "sqrt_quadratic": 1}
    if kc.bump not in expected:
        raise ValueError(f"unknown bump {kc.bump!r}")
    if expected[kc.bump] != kc.r_flag:
        raise ValueError(f"bump {kc.bump!r} is inconsistent with r_flag={kc.r_flag}")
    if not kc.lam > 0:
        raise ValueError("bump coefficient must be positive")
    if require_negative_type:
        pts = _probe_points(n) if probe is None else np.asarray(probe, float)
        val = negative_type_test(kc.kernel(), pts)
        if val > FORM_TOL * (1.0 + np.abs(_gram(kc.kernel(), pts)).max()):
            raise ValueError(f"kernel is not of negative type on the probe sample (form {val:.3g})")
    if kc.features is not None:
        return feature_kernel_cost(kc.features, kc.matrix, kc.bump, kc.lam, n)
    return _generic_kernel_cost(kc, n)


def potential_terminal_cost(features: FeatureMap, matrix, lam: float, n: int = 1) -> TerminalCostSpec:
    """``g = dG/dmu`` for ``G(mu) = 1/2 m^T A m + int lam/2 |x|^2 dmu`` with ``m = int phi dmu``.

    ``A`` must be symmetric negative semidefinite, which makes G flat
    concave. Displacement convexity depends on ``lam``; see
    :func:`lambda_threshold`.
    """
    A = np.atleast_2d(np.asarray(matrix, float))
    if not np.allclose(A, A.T):
        raise ValueError("potential matrix must be symmetric")
    if np.linalg.eigvalsh(A)[-1] > FORM_TOL * (1 + np.abs(A).max()):
        raise ValueError("potential matrix must be negative semidefinite")
    return feature_kernel_cost(features, A, "quadratic", lam, n)


def lambda_threshold(make_cost: Callable[[float], TerminalCostSpec], samplers: Sequence, n_samples: int = 5,
                     seed: int = 0, lo: float = 0.0, hi: float = 16.0, iters: int = 30) -> float:
    """Smallest bump coefficient for which :func:`flat_displacement_test` passes on all samplers, by bisection."""

    def ok(lam):
        return all(flat_displacement_test(make_cost(lam), s, n_samples, seed).passed for s in samplers)

    if not ok(hi):
        raise ValueError("condition fails at the upper bracket")
    if ok(lo):
        return lo
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi
