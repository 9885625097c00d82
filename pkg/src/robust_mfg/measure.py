"""Weighted particle clouds and the Fortet-Mourier (bounded-Lipschitz) distance."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels

EXACT_LP_MAX_POINTS = 400


@dataclass(frozen=True)
class WeightedMeasure:
    """Finite non-negative measure ``sum_i w_i delta_{x_i}`` on R^n."""

    points: np.ndarray
    weights: np.ndarray
    total_mass: float = field(init=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if pts.shape[0] != w.shape[0]:
            raise ValueError("points and weights disagree in length")
        if np.any(w < 0) or not np.all(np.isfinite(w)) or not np.all(np.isfinite(pts)):
            raise ValueError("weights must be finite and non-negative, points finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "total_mass", float(w.sum()))

    @classmethod
    def empirical(cls, points) -> "WeightedMeasure":
        pts = np.asarray(points, dtype=float)
        m = pts.shape[0]
        return cls(pts, np.full(m, 1.0 / m))

    @classmethod
    def dirac(cls, x, mass: float = 1.0) -> "WeightedMeasure":
        return cls(np.atleast_2d(np.asarray(x, dtype=float)), np.array([mass]))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def mean(self) -> np.ndarray:
        """Normalised barycentre ``int x dmu / mass``."""
        if self.total_mass <= 0:
            return np.zeros(self.dim)
        return self.weights @ self.points / self.total_mass

    def integrate(self, values: np.ndarray) -> float:
        return float(self.weights @ np.asarray(values, dtype=float))

    def moment(self, p: float) -> float:
        """``int |x|^p dmu``."""
        return float(self.weights @ (np.linalg.norm(self.points, axis=1) ** p))

    def scaled(self, factor: float) -> "WeightedMeasure":
        return WeightedMeasure(self.points, self.weights * factor)

    def mix(self, other: "WeightedMeasure", theta: float) -> "WeightedMeasure":
        """``(1 - theta) self + theta other`` as the union of the two clouds."""
        return WeightedMeasure(
            np.vstack([self.points, other.points]),
            np.concatenate([(1.0 - theta) * self.weights, theta * other.weights]),
        )

    def resample(self, m: int) -> "WeightedMeasure":
        """Systematic resampling to ``m`` equally weighted particles, mass preserved.

        In one dimension the particles are sorted first, which makes the
        resampled CDF within ``mass / m`` of the original everywhere.
        """
        if self.total_mass <= 0:
            raise ValueError("cannot resample a null measure")
        if self.dim == 1:
            order = np.argsort(self.points[:, 0], kind="stable")
        else:
            order = np.arange(self.size)
        cdf = np.cumsum(self.weights[order]) / self.total_mass
        cdf[-1] = 1.0
        u = (np.arange(m) + 0.5) / m
        idx = order[np.searchsorted(cdf, u, side="left")]
        return WeightedMeasure(self.points[idx], np.full(m, self.total_mass / m))


@dataclass(frozen=True)
class FMResult:
    value: float
    method: str  # "exact_1d", "exact_lp" or "sliced_lower_bound"
    lower: float
    upper: float | None = None


def _merged_1d(mu: WeightedMeasure, nu: WeightedMeasure):
    x = np.concatenate([mu.points[:, 0], nu.points[:, 0]])
    w = np.concatenate([mu.weights, -nu.weights])
    order = np.argsort(x, kind="stable")
    x = x[order]
    w = w[order]
    keep = np.concatenate([[True], np.diff(x) > 0])
    groups = np.cumsum(keep) - 1
    wm = np.zeros(int(groups[-1]) + 1)
    np.add.at(wm, groups, w)
    return np.ascontiguousarray(x[keep]), wm


def fm_exact_1d(x: np.ndarray, wa: np.ndarray, y: np.ndarray, wb: np.ndarray) -> float:
    """Exact FM distance between two weighted clouds on the real line."""
    a = WeightedMeasure(np.asarray(x, float).reshape(-1, 1), wa)
    b = WeightedMeasure(np.asarray(y, float).reshape(-1, 1), wb)
    xs, ws = _merged_1d(a, b)
    return max(0.0, float(kernels.fm_dual_1d(xs, ws)))


def fm_lp(mu: WeightedMeasure, nu: WeightedMeasure) -> float:
    """FM distance by the dual LP over the joint support (any dimension).

    Exact for finite clouds, because a bounded 1-Lipschitz function on the
    support extends to the whole space. Quadratic in the support size.
    """
    from scipy.optimize import linprog
    from scipy.sparse import coo_matrix

    pts = np.vstack([mu.points, nu.points])
    w = np.concatenate([mu.weights, -nu.weights])
    m = pts.shape[0]
    ii, jj = np.triu_indices(m, 1)
    dist = np.linalg.norm(pts[ii] - pts[jj], axis=1)
    rows = np.arange(ii.size)
    data = np.concatenate([np.ones(ii.size), -np.ones(ii.size)])
    a1 = coo_matrix((data, (np.concatenate([rows, rows]), np.concatenate([ii, jj]))), shape=(ii.size, m))
    a_ub = coo_matrix(
        (np.concatenate([a1.data, -a1.data]),
         (np.concatenate([a1.row, a1.row + ii.size]), np.concatenate([a1.col, a1.col]))),
        shape=(2 * ii.size, m),
    ).tocsr()
    b_ub = np.concatenate([dist, dist])
    res = linprog(-w, A_ub=a_ub, b_ub=b_ub, bounds=[(-1.0, 1.0)] * m, method="highs")
    if not res.success:
        raise RuntimeError(f"FM linear programme failed: {res.message}")
    return max(0.0, float(-res.fun))


def fm_distance_report(mu: WeightedMeasure, nu: WeightedMeasure, n_directions: int = 64,
                       seed: int = 0, max_lp_points: int = EXACT_LP_MAX_POINTS) -> FMResult:
    if mu.dim != nu.dim:
        raise ValueError("measures live in different dimensions")
    if mu.dim == 1:
        xs, ws = _merged_1d(mu, nu)
        v = max(0.0, float(kernels.fm_dual_1d(xs, ws)))
        return FMResult(v, "exact_1d", v, v)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_directions, mu.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    vals = []
    for u in dirs:
        a = WeightedMeasure((mu.points @ u)[:, None], mu.weights)
        b = WeightedMeasure((nu.points @ u)[:, None], nu.weights)
        xs, ws = _merged_1d(a, b)
        vals.append(max(0.0, float(kernels.fm_dual_1d(xs, ws))))
    lower = float(np.mean(vals))
    if mu.size + nu.size <= max_lp_points:
        v = fm_lp(mu, nu)
        return FMResult(v, "exact_lp", lower, v)
    # bracket on subsampled supports
    half = max_lp_points // 2
    sub_mu = mu.resample(min(half, mu.size)) if mu.size > half else mu
    sub_nu = nu.resample(min(half, nu.size)) if nu.size > half else nu
    return FMResult(lower, "sliced_lower_bound", lower, fm_lp(sub_mu, sub_nu))


def fm_distance(mu: WeightedMeasure, nu: WeightedMeasure, **kwargs) -> float:
    """Fortet-Mourier distance. Exact in 1-D; sliced lower bound otherwise (see the report)."""
    return fm_distance_report(mu, nu, **kwargs).value
