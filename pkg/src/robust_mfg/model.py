"""Game instances: coefficients, driver, costs, sampled assumption checks and derived constants."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .measure import WeightedMeasure
from .simulate import TAG_INITIAL, TimeGrid, path_generator

COND_LIMIT = 1e12


# ---------------------------------------------------------------------------
# time functions


@dataclass(frozen=True)
class TimeFunction:
    """``value0 + slope * t`` (``kind='affine'``) or a constant array, or a wrapped callable."""

    kind: str
    value0: np.ndarray
    slope: Optional[np.ndarray] = None
    fn: Optional[Callable[[float], np.ndarray]] = None

    def __call__(self, t: float) -> np.ndarray:
        if self.kind == "constant":
            return self.value0
        if self.kind == "affine":
            return self.value0 + self.slope * t
        return np.asarray(self.fn(t), dtype=float)

    def to_json(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value0.tolist()}
        if self.kind == "affine":
            return {"kind": "affine", "value0": self.value0.tolist(), "slope": self.slope.tolist()}
        raise ValueError("callable coefficients are not serialisable")


def constant(value) -> TimeFunction:
    return TimeFunction("constant", np.asarray(value, dtype=float))


def affine(value0, slope) -> TimeFunction:
    return TimeFunction("affine", np.asarray(value0, dtype=float), np.asarray(slope, dtype=float))


def from_callable(fn: Callable[[float], Any]) -> TimeFunction:
    return TimeFunction("callable", np.zeros(0), None, fn)


def _time_function_from_json(doc) -> TimeFunction:
    if not isinstance(doc, dict):
        return constant(doc)
    kind = doc.get("kind", "constant")
    if kind == "constant":
        return constant(doc["value"])
    if kind == "affine":
        return affine(doc["value0"], doc["slope"])
    raise ValueError(f"unknown time-function kind {kind!r}")


# ---------------------------------------------------------------------------
# initial law


@dataclass(frozen=True)
class InitialLaw:
    """Bounded-support law of the initial condition: ``dirac``, ``uniform`` box or ``points``."""

    kind: str
    params: dict

    def sample(self, n_paths: int, seed: int) -> np.ndarray:
        if self.kind == "dirac":
            x = np.asarray(self.params["x"], dtype=float).reshape(1, -1)
            return np.repeat(x, n_paths, axis=0)
        if self.kind == "uniform":
            lo = np.asarray(self.params["low"], dtype=float).reshape(-1)
            hi = np.asarray(self.params["high"], dtype=float).reshape(-1)
            u = np.empty((n_paths, lo.size))
            for p in range(n_paths):
                u[p] = path_generator(seed, p, TAG_INITIAL).random(lo.size)
            return lo + (hi - lo) * u
        if self.kind == "points":
            pts = np.asarray(self.params["points"], dtype=float)
            pts = pts.reshape(pts.shape[0], -1)
            idx = np.array([path_generator(seed, p, TAG_INITIAL).integers(pts.shape[0]) for p in range(n_paths)])
            return pts[idx]
        raise ValueError(f"unknown initial law {self.kind!r}")

    def support_radius(self) -> float:
        if self.kind == "dirac":
            return float(np.linalg.norm(self.params["x"]))
        if self.kind == "uniform":
            corner = np.maximum(np.abs(self.params["low"]), np.abs(self.params["high"]))
            return float(np.linalg.norm(corner))
        return float(np.max(np.linalg.norm(np.asarray(self.params["points"], dtype=float).reshape(len(self.params["points"]), -1), axis=1)))

    def is_degenerate(self) -> bool:
        return self.kind == "dirac"

    def to_json(self) -> dict:
        return {"kind": self.kind, **{k: np.asarray(v).tolist() for k, v in self.params.items()}}


def dirac(x) -> InitialLaw:
    return InitialLaw("dirac", {"x": np.atleast_1d(np.asarray(x, dtype=float))})


def uniform(low, high) -> InitialLaw:
    return InitialLaw("uniform", {"low": np.atleast_1d(np.asarray(low, float)), "high": np.atleast_1d(np.asarray(high, float))})


# ---------------------------------------------------------------------------
# coefficients


@dataclass(frozen=True)
class ModelCoefficients:
    n: int
    d: int
    T: float
    r_flag: int
    a: TimeFunction
    b: TimeFunction
    c: TimeFunction
    nu: TimeFunction
    sigma_tensor: TimeFunction
    initial_law: InitialLaw
    bound_L: float

    def __post_init__(self):
        if self.n < 1 or self.d < 1 or not self.T > 0 or self.r_flag not in (0, 1) or not self.bound_L > 0:
            raise ValueError("invalid coefficient header")

    def _eval(self, fn: TimeFunction, t: float, shape: tuple) -> np.ndarray:
        v = np.asarray(fn(t), dtype=float)
        if v.size == 1 and int(np.prod(shape)) != 1:
            if len(shape) == 2 and shape[0] == shape[1]:
                v = float(v) * np.eye(shape[0])
            else:
                v = np.full(shape, float(v))
        return v.reshape(shape)

    def at(self, t: float) -> dict:
        n, d = self.n, self.d
        return {
            "a": self._eval(self.a, t, (n,)),
            "b": self._eval(self.b, t, (n, n)),
            "c": self._eval(self.c, t, (n, n)),
            "nu": self._eval(self.nu, t, (n, d)),
            "sigma": self._eval(self.sigma_tensor, t, (n, d, n)),
        }

    def evaluate(self, grid: TimeGrid, nodes: Optional[np.ndarray] = None) -> dict:
        """Coefficient arrays stacked over time (left nodes by default)."""
        ts = grid.left_nodes if nodes is None else nodes
        rows = [self.at(float(t)) for t in ts]
        out = {k: np.ascontiguousarray(np.stack([r[k] for r in rows])) for k in rows[0]}
        for k, v in out.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite coefficient {k}")
        return out

    def to_json(self) -> dict:
        return {
            "n": self.n, "d": self.d, "T": self.T, "r_flag": self.r_flag, "bound_L": self.bound_L,
            "a": self.a.to_json(), "b": self.b.to_json(), "c": self.c.to_json(), "nu": self.nu.to_json(),
            "sigma_tensor": self.sigma_tensor.to_json(), "initial_law": self.initial_law.to_json(),
        }


def coefficients_from_json(doc: dict) -> ModelCoefficients:
    n, d = int(doc["n"]), int(doc["d"])
    law = doc.get("initial_law", {"kind": "dirac", "x": [0.0] * n})
    kind = law["kind"]
    if kind == "dirac":
        il = dirac(law["x"])
    elif kind == "uniform":
        il = uniform(law["low"], law["high"])
    elif kind == "points":
        il = InitialLaw("points", {"points": np.asarray(law["points"], float)})
    else:
        raise ValueError(f"unknown initial law {kind!r}")
    zeros_sigma = np.zeros((n, d, n)).tolist()
    return ModelCoefficients(
        n=n, d=d, T=float(doc["T"]), r_flag=int(doc.get("r_flag", 0)),
        a=_time_function_from_json(doc.get("a", [0.0] * n)),
        b=_time_function_from_json(doc.get("b", np.zeros((n, n)).tolist())),
        c=_time_function_from_json(doc.get("c", np.eye(n).tolist())),
        nu=_time_function_from_json(doc["nu"]),
        sigma_tensor=_time_function_from_json(doc.get("sigma_tensor", zeros_sigma)),
        initial_law=il, bound_L=float(doc.get("bound_L", 1.0)),
    )


# ---------------------------------------------------------------------------
# extended reals


@dataclass(frozen=True)
class ExtendedReal:
    """A real number or +infinity, kept as an explicit variant."""

    value: float = 0.0
    infinite: bool = False
    converged: bool = True
    lower_bound: Optional[float] = None

    @classmethod
    def inf(cls) -> "ExtendedReal":
        return cls(0.0, True)

    @property
    def is_finite(self) -> bool:
        return not self.infinite

    def __float__(self) -> float:
        return math.inf if self.infinite else self.value


# ---------------------------------------------------------------------------
# driver


@dataclass(frozen=True)
class DriverSpec:
    """Convex driver ``f(t, y, z)`` of Nature's value equation.

    Functions are vectorised: ``y`` has shape (m,), ``z`` shape (m, d).
    ``penalty`` only matters for the quadratic benchmark, where
    ``f = |z|^2 / (2 penalty)`` and ``f* = penalty |z*|^2 / 2``; the default
    ``penalty = 1`` is the benchmark itself.
    """

    kind: str
    f: Callable
    alpha: float
    beta: float
    f0_bound: float = 0.0
    second_deriv_bound: float = 1.0
    grad: Optional[Callable] = None
    fstar: Optional[Callable] = None
    penalty: float = 1.0
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def gradient(self, t, y, z):
        if self.grad is not None:
            return self.grad(t, y, z)
        h = 1e-6
        y = np.asarray(y, float)
        z = np.asarray(z, float)
        fy = (self.f(t, y + h, z) - self.f(t, y - h, z)) / (2 * h)
        fz = np.empty_like(z)
        for j in range(z.shape[-1]):
            e = np.zeros(z.shape[-1])
            e[j] = h
            fz[..., j] = (self.f(t, y, z + e) - self.f(t, y, z - e)) / (2 * h)
        return fy, fz

    def dual_values(self, t_nodes, y_star: np.ndarray, z_star: np.ndarray) -> np.ndarray:
        """``f*`` on a [path, step] table (``inf`` where ``|y*| > alpha``)."""
        y_star = np.asarray(y_star, float)
        z_star = np.asarray(z_star, float)
        if self.kind == "quadratic_benchmark":
            out = 0.5 * self.penalty * np.einsum("...d,...d->...", z_star, z_star)
            return np.where(np.abs(y_star) > self.alpha + 1e-12, np.inf, out)
        if self.fstar is not None:
            flat = self.fstar(None, y_star.reshape(-1), z_star.reshape(-1, z_star.shape[-1]))
            out = np.asarray(flat, float).reshape(y_star.shape)
            return np.where(np.abs(y_star) > self.alpha + 1e-12, np.inf, out)
        out = np.empty(y_star.shape)
        ts = np.broadcast_to(np.asarray(t_nodes, float), y_star.shape) if t_nodes is not None else np.zeros(y_star.shape)
        for idx in np.ndindex(y_star.shape):
            out[idx] = float(fenchel_dual(self, float(ts[idx]), float(y_star[idx]), z_star[idx]))
        return out

    def to_json(self) -> dict:
        if self.name == "custom":
            raise ValueError("custom callables are not serialisable")
        return {"name": self.name, **self.params}


def quadratic_benchmark(penalty: float = 1.0) -> DriverSpec:
    """``f = |z|^2 / (2 penalty)``; ``penalty = 1`` gives the unit-weight relative entropy."""
    p = float(penalty)

    def f(t, y, z):
        return 0.5 * np.einsum("...d,...d->...", z, z) / p

    def grad(t, y, z):
        return np.zeros(np.shape(y)), np.asarray(z) / p

    return DriverSpec("quadratic_benchmark", f, alpha=0.0, beta=1.0 / p, f0_bound=0.0, second_deriv_bound=1.0 / p,
                      grad=grad, penalty=p, name="quadratic", params={"penalty": p})


def quartic_driver(coef: float = 1.0, quadratic: float = 0.0, closed_form: bool = True) -> DriverSpec:
    """``f = quadratic |z|^2 / 2 + coef |z|^4 / 4`` (d = 1 closed-form dual when ``quadratic == 0``)."""
    c, q = float(coef), float(quadratic)

    def f(t, y, z):
        s = np.einsum("...d,...d->...", z, z)
        return 0.5 * q * s + 0.25 * c * s ** 2

    def grad(t, y, z):
        s = np.einsum("...d,...d->...", z, z)
        return np.zeros(np.shape(y)), (q + c * s)[..., None] * z

    fstar = None
    if q == 0.0 and closed_form:
        def fstar(t, ys, zs):
            nz = np.linalg.norm(zs, axis=-1)
            return 0.75 * c ** (-1.0 / 3.0) * nz ** (4.0 / 3.0)

    return DriverSpec("custom", f, alpha=0.0, beta=max(q, 1e-12), f0_bound=0.0, second_deriv_bound=q + 3 * c,
                      grad=grad, fstar=fstar, name="quartic", params={"coef": c, "quadratic": q})


def softabs_driver(alpha: float, eps: float = 0.1) -> DriverSpec:
    """``f = |z|^2/2 + (alpha/2) eps log cosh(y/eps)``; ``y*`` stays in ``(-alpha/2, alpha/2)``."""
    a, e = float(alpha), float(eps)

    def f(t, y, z):
        y = np.asarray(y, float)
        ay = np.abs(y / e)
        logcosh = ay + np.log1p(np.exp(-2 * ay)) - math.log(2.0)
        return 0.5 * np.einsum("...d,...d->...", z, z) + 0.5 * a * e * logcosh

    def grad(t, y, z):
        return 0.5 * a * np.tanh(np.asarray(y, float) / e), np.asarray(z, float)

    def fstar(t, ys, zs):
        u = 2.0 * np.asarray(ys, float) / a
        inside = np.abs(u) < 1
        uu = np.where(inside, u, 0.0)
        hy = 0.5 * a * e * (uu * np.arctanh(uu) + 0.5 * np.log1p(-uu * uu))
        return np.where(inside, hy + 0.5 * np.einsum("...d,...d->...", zs, zs), np.inf)

    return DriverSpec("custom", f, alpha=a, beta=1.0, f0_bound=0.0, second_deriv_bound=max(1.0, a / e),
                      grad=grad, fstar=fstar, name="softabs", params={"alpha": a, "eps": e})


DRIVER_CATALOGUE = {
    "quadratic": lambda p: quadratic_benchmark(p.get("penalty", 1.0)),
    "quartic": lambda p: quartic_driver(p.get("coef", 1.0), p.get("quadratic", 0.0)),
    "softabs": lambda p: softabs_driver(p["alpha"], p.get("eps", 0.1)),
}


def driver_from_json(doc: dict) -> DriverSpec:
    name = doc.get("name", "quadratic")
    if name not in DRIVER_CATALOGUE:
        raise ValueError(f"unknown driver {name!r}")
    return DRIVER_CATALOGUE[name]({k: v for k, v in doc.items() if k != "name"})


# ---------------------------------------------------------------------------
# running cost


@dataclass(frozen=True)
class RunningCostSpec:
    """``ell(t, psi)`` with ``psi`` of shape (..., n); ``grad`` returns the same shape as ``psi``."""

    ell: Callable
    grad: Callable
    strong_convexity: float
    hessian_bound: float
    ell0_bound: float
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"name": self.name, **self.params}


def quadratic_running_cost(weight: float = 1.0) -> RunningCostSpec:
    w = float(weight)
    return RunningCostSpec(
        ell=lambda t, psi: 0.5 * w * np.sum(np.asarray(psi) ** 2, axis=-1),
        grad=lambda t, psi: w * np.asarray(psi, float),
        strong_convexity=w, hessian_bound=w, ell0_bound=0.0, name="quadratic", params={"weight": w},
    )


def abs_running_cost() -> RunningCostSpec:
    """``|psi|``: convex but not strongly convex (used to exercise the checks)."""
    def grad(t, psi):
        psi = np.asarray(psi, float)
        nrm = np.linalg.norm(psi, axis=-1, keepdims=True)
        return np.where(nrm > 0, psi / np.where(nrm > 0, nrm, 1.0), 0.0)

    return RunningCostSpec(ell=lambda t, psi: np.linalg.norm(np.asarray(psi, float), axis=-1), grad=grad,
                           strong_convexity=1.0, hessian_bound=1.0, ell0_bound=0.0, name="abs", params={})


RUNNING_CATALOGUE = {
    "quadratic": lambda p: quadratic_running_cost(p.get("weight", 1.0)),
    "abs": lambda p: abs_running_cost(),
}


def running_cost_from_json(doc: dict) -> RunningCostSpec:
    name = doc.get("name", "quadratic")
    if name not in RUNNING_CATALOGUE:
        raise ValueError(f"unknown running cost {name!r}")
    return RUNNING_CATALOGUE[name]({k: v for k, v in doc.items() if k != "name"})


# ---------------------------------------------------------------------------
# terminal cost


@dataclass(frozen=True)
class FeatureMap:
    """Bounded smooth features ``phi_r(x) = h_r(s_r u_r . x + b_r)`` with ``h`` in {tanh, sin, cos, gauss}."""

    kinds: tuple
    directions: np.ndarray  # [r, n]
    scales: np.ndarray
    shifts: np.ndarray

    def _arg(self, x):
        return (x @ self.directions.T) * self.scales + self.shifts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        u = self._arg(np.asarray(x, float))
        cols = [_feature_h(k, u[..., i])[0] for i, k in enumerate(self.kinds)]
        return np.stack(cols, axis=-1)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """[..., r, n]"""
        u = self._arg(np.asarray(x, float))
        cols = [_feature_h(k, u[..., i])[1] for i, k in enumerate(self.kinds)]
        dh = np.stack(cols, axis=-1)  # [..., r]
        return dh[..., :, None] * (self.scales[:, None] * self.directions)

    @property
    def rank(self) -> int:
        return len(self.kinds)

    def to_json(self) -> dict:
        return {"kinds": list(self.kinds), "directions": self.directions.tolist(),
                "scales": self.scales.tolist(), "shifts": self.shifts.tolist()}


def _feature_h(kind, u):
    if kind == "tanh":
        th = np.tanh(u)
        return th, 1.0 - th * th
    if kind == "sin":
        return np.sin(u), np.cos(u)
    if kind == "cos":
        return np.cos(u), -np.sin(u)
    if kind == "gauss":
        e = np.exp(-0.5 * u * u)
        return e, -u * e
    raise ValueError(f"unknown feature {kind!r}")


def feature_map(kinds: Sequence[str], n: int = 1, directions=None, scales=None, shifts=None) -> FeatureMap:
    r = len(kinds)
    dirs = np.tile(np.eye(n)[0], (r, 1)) if directions is None else np.asarray(directions, float).reshape(r, n)
    sc = np.ones(r) if scales is None else np.asarray(scales, float).reshape(r)
    sh = np.zeros(r) if shifts is None else np.asarray(shifts, float).reshape(r)
    return FeatureMap(tuple(kinds), dirs, sc, sh)


def feature_map_from_json(doc: dict, n: int) -> FeatureMap:
    return feature_map(doc["kinds"], n, doc.get("directions"), doc.get("scales"), doc.get("shifts"))


@dataclass(frozen=True)
class TerminalCostSpec:
    """Terminal cost ``g(x, mu)`` with ``x`` of shape (m, n) and a :class:`WeightedMeasure`.

    ``decomposition`` is ``(g0, g1)`` with ``g1`` bounded and Lipschitz in
    (x, FM); ``flat_derivative(x, mu, y)`` is the flat derivative of
    ``x -> g(x, mu)`` at ``mu`` in direction y (shape (m, k) for m x
    and k y). ``batch`` evaluates many empirical measures at once:
    ``batch(x [S, N, n], w [S, N]) -> (g [S, N], grad [S, N, n])`` where
    the measure of world s is ``sum_j w[s, j] delta_{x[s, j]}``.
    """

    g: Callable
    grad_x: Callable
    hess_bound: float
    growth_const: float
    decomposition: Optional[tuple] = None
    flat_derivative: Optional[Callable] = None
    batch: Optional[Callable] = None
    potential: Optional[Callable] = None
    measure_dependent: bool = True
    flat_batch: Optional[Callable] = None  # (x [S, N, n], w [S, N], y [G, n]) -> [S, N, G]
    potential_batch: Optional[Callable] = None  # (x [S, N, n], w [S, N]) -> [S]
    growth_exponent: float = 2.0
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def evaluate_batch(self, x: np.ndarray, w: np.ndarray):
        if self.batch is not None:
            return self.batch(x, w)
        S, N = w.shape
        gv = np.empty((S, N))
        gr = np.empty(x.shape)
        for s in range(S):
            mu = WeightedMeasure(x[s], w[s])
            gv[s] = self.g(x[s], mu)
            gr[s] = self.grad_x(x[s], mu)
        return gv, gr

    def to_json(self) -> dict:
        if self.name == "custom":
            raise ValueError("custom callables are not serialisable")
        return {"name": self.name, **self.params}


def constant_terminal_cost(value: float = 0.0) -> TerminalCostSpec:
    v = float(value)
    return TerminalCostSpec(
        g=lambda x, mu: np.full(np.asarray(x).shape[0], v),
        grad_x=lambda x, mu: np.zeros(np.asarray(x).shape),
        hess_bound=0.0, growth_const=abs(v), measure_dependent=False, growth_exponent=0.0,
        decomposition=None, name="constant", params={"value": v},
        batch=lambda x, w: (np.full(w.shape, v), np.zeros(x.shape)),
    )


def affine_terminal_cost(slope, offset: float = 0.0) -> TerminalCostSpec:
    s = np.atleast_1d(np.asarray(slope, float))
    o = float(offset)
    return TerminalCostSpec(
        g=lambda x, mu: np.asarray(x, float) @ s + o,
        grad_x=lambda x, mu: np.broadcast_to(s, np.asarray(x).shape).copy(),
        hess_bound=0.0, growth_const=max(1.0, float(np.linalg.norm(s)) + abs(o)), measure_dependent=False,
        growth_exponent=1.0, name="affine", params={"slope": s.tolist(), "offset": o},
    )


def quadratic_form_cost(lam: float = 1.0, center=None, kappa: float = 0.0, n: int = 1,
                        sign: float = 1.0) -> TerminalCostSpec:
    """``sign * lam/2 |x - center - kappa * mean(mu)|^2`` with mean the normalised barycentre."""
    lam = float(lam)
    kap = float(kappa)
    sg = float(sign)
    ctr = np.zeros(n) if center is None else np.atleast_1d(np.asarray(center, float))

    def target(mu):
        return ctr + (kap * mu.mean() if (kap != 0.0 and mu is not None) else 0.0)

    def g(x, mu):
        dx = np.asarray(x, float) - target(mu)
        return 0.5 * sg * lam * np.sum(dx * dx, axis=-1)

    def grad(x, mu):
        return sg * lam * (np.asarray(x, float) - target(mu))

    def batch(x, w):
        mass = w.sum(axis=1, keepdims=True)
        mean = np.einsum("sj,sjn->sn", w, x) / np.where(mass > 0, mass, 1.0)
        dx = x - (ctr + kap * mean)[:, None, :]
        return 0.5 * sg * lam * np.sum(dx * dx, axis=-1), sg * lam * dx

    def flat(x, mu, y):
        # d mean / d mu (y) = (y - mean) / mass
        dx = np.asarray(x, float) - target(mu)
        dy = (np.asarray(y, float) - mu.mean()) / mu.total_mass
        return -sg * lam * kap * dx @ dy.T

    def flat_b(x, w, y):
        mass = w.sum(axis=1, keepdims=True)
        mean = np.einsum("sj,sjn->sn", w, x) / mass
        dx = x - (ctr + kap * mean)[:, None, :]
        dy = (y[None, :, :] - mean[:, None, :]) / mass[:, :, None]  # [S, G, n]
        return -sg * lam * kap * np.einsum("sjn,sgn->sjg", dx, dy)

    return TerminalCostSpec(g=g, grad_x=grad, hess_bound=lam, growth_const=max(1.0, lam * (1 + float(ctr @ ctr))),
                            measure_dependent=kap != 0.0, growth_exponent=2.0, batch=batch,
                            flat_derivative=flat if kap != 0.0 else None, flat_batch=flat_b if kap != 0.0 else None,
                            decomposition=None if kap != 0.0 else (None, None),
                            name="quadratic_form", params={"lam": lam, "center": ctr.tolist(), "kappa": kap, "sign": sg})


def _bump(kind: str, lam: float):
    if kind == "quadratic":
        return (lambda x: 0.5 * lam * np.sum(x * x, axis=-1)), (lambda x: lam * x)
    if kind == "sqrt_quadratic":
        return (lambda x: lam * np.sqrt(1.0 + np.sum(x * x, axis=-1))), \
               (lambda x: lam * x / np.sqrt(1.0 + np.sum(x * x, axis=-1, keepdims=True)))
    if kind == "none":
        return (lambda x: np.zeros(x.shape[:-1])), (lambda x: np.zeros(x.shape))
    raise ValueError(f"unknown bump {kind!r}")


def feature_kernel_cost(features: FeatureMap, matrix, bump: str = "quadratic", lam: float = 1.0,
                        n: int = 1) -> TerminalCostSpec:
    """``bump(x) + phi(x)^T A int phi dmu``: the kernel-integral cost with ``K(x, y) = phi(x)^T A phi(y)``."""
    A = np.atleast_2d(np.asarray(matrix, float))
    if A.shape != (features.rank, features.rank):
        raise ValueError("kernel matrix does not match the feature rank")
    b0, db0 = _bump(bump, float(lam))

    def m_phi(mu):
        return mu.weights @ features(mu.points)

    def g1(x, mu):
        return features(np.asarray(x, float)) @ (A @ m_phi(mu))

    def g1_grad(x, mu):
        J = features.jacobian(np.asarray(x, float))  # [m, r, n]
        return np.einsum("mrn,r->mn", J, A @ m_phi(mu))

    def g(x, mu):
        x = np.asarray(x, float)
        return b0(x) + g1(x, mu)

    def grad(x, mu):
        x = np.asarray(x, float)
        return db0(x) + g1_grad(x, mu)

    def flat(x, mu, y):
        return features(np.asarray(x, float)) @ A @ features(np.asarray(y, float)).T

    def batch(x, w):
        phi = features(x)  # [S, N, r]
        mp = np.einsum("sj,sjr->sr", w, phi)
        coef = mp @ A.T  # [S, r]
        gv = b0(x) + np.einsum("sjr,sr->sj", phi, coef)
        gr = db0(x) + np.einsum("sjrn,sr->sjn", features.jacobian(x), coef)
        return gv, gr

    def potential(mu):
        mp = m_phi(mu)
        return 0.5 * float(mp @ A @ mp)

    def potential_b(x, w):
        mp = np.einsum("sj,sjr->sr", w, features(x))
        return 0.5 * np.einsum("sr,rk,sk->s", mp, A, mp)

    def flat_b(x, w, y):
        return np.einsum("sjr,rk,gk->sjg", features(x), A, features(np.asarray(y, float)))

    g0 = TerminalCostSpec(g=lambda x, mu: b0(np.asarray(x, float)), grad_x=lambda x, mu: db0(np.asarray(x, float)),
                          hess_bound=float(lam), growth_const=float(lam), measure_dependent=False)
    g1s = TerminalCostSpec(g=g1, grad_x=g1_grad, hess_bound=0.0, growth_const=float(np.abs(A).sum()),
                           flat_derivative=flat)
    sym = np.allclose(A, A.T)
    return TerminalCostSpec(
        g=g, grad_x=grad, hess_bound=float(lam) + float(np.abs(A).sum()) * 2.0,
        growth_const=max(1.0, float(lam) + float(np.abs(A).sum())), decomposition=(g0, g1s),
        flat_derivative=flat, batch=batch, potential=potential if sym else None,
        potential_batch=potential_b if sym else None, flat_batch=flat_b, measure_dependent=bool(np.any(A != 0)),
        growth_exponent=2.0 if bump == "quadratic" else 1.0, name="kernel_integral",
        params={"features": features.to_json(), "matrix": A.tolist(), "bump": bump, "lam": float(lam)},
    )


def terminal_cost_from_json(doc: dict, n: int = 1) -> TerminalCostSpec:
    name = doc.get("name", "quadratic_form")
    if name == "constant":
        return constant_terminal_cost(doc.get("value", 0.0))
    if name == "affine":
        return affine_terminal_cost(doc["slope"], doc.get("offset", 0.0))
    if name == "quadratic_form":
        return quadratic_form_cost(doc.get("lam", 1.0), doc.get("center"), doc.get("kappa", 0.0), n, doc.get("sign", 1.0))
    if name == "sqrt_quadratic":
        return feature_kernel_cost(feature_map(["tanh"], n), [[0.0]], "sqrt_quadratic", doc.get("lam", 1.0), n)
    if name == "kernel_integral":
        return feature_kernel_cost(feature_map_from_json(doc["features"], n), doc["matrix"],
                                   doc.get("bump", "quadratic"), doc.get("lam", 1.0), n)
    raise ValueError(f"unknown terminal cost {name!r}")


# ---------------------------------------------------------------------------
# model bundle and serialisation


@dataclass(frozen=True)
class Model:
    coeffs: ModelCoefficients
    driver: DriverSpec
    ell: RunningCostSpec
    g: TerminalCostSpec

    def to_json(self) -> dict:
        return {"coefficients": self.coeffs.to_json(), "driver": self.driver.to_json(),
                "running_cost": self.ell.to_json(), "terminal_cost": self.g.to_json()}


def model_from_json(doc: dict) -> Model:
    for key in ("coefficients", "driver", "running_cost", "terminal_cost"):
        if key not in doc:
            raise ValueError(f"model document lacks {key!r}")
    coeffs = coefficients_from_json(doc["coefficients"])
    return Model(coeffs, driver_from_json(doc["driver"]), running_cost_from_json(doc["running_cost"]),
                 terminal_cost_from_json(doc["terminal_cost"], coeffs.n))


def load_model(path) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_json(json.load(fh))


def benchmark_model(x0: float = 0.0, nu: float = 0.5, T: float = 0.25, penalty: float = 1.0,
                    terminal: Optional[TerminalCostSpec] = None, initial_law: Optional[InitialLaw] = None) -> Model:
    """The 1-D linear-quadratic benchmark (a = b = 0, c = 1, sigma = 0, r = 0, L = 1)."""
    coeffs = ModelCoefficients(
        n=1, d=1, T=T, r_flag=0, a=constant([0.0]), b=constant([[0.0]]), c=constant([[1.0]]),
        nu=constant([[nu]]), sigma_tensor=constant(np.zeros((1, 1, 1))),
        initial_law=initial_law if initial_law is not None else dirac([x0]), bound_L=1.0,
    )
    return Model(coeffs, quadratic_benchmark(penalty), quadratic_running_cost(1.0),
                 terminal if terminal is not None else quadratic_form_cost(1.0))


# ---------------------------------------------------------------------------
# fundamental matrix


@dataclass(frozen=True)
class GammaMatrix:
    values: np.ndarray  # [K+1, n, n]
    inverse: np.ndarray

    def norms(self) -> tuple[float, float]:
        return (float(max(np.linalg.norm(g, 2) for g in self.values)),
                float(max(np.linalg.norm(g, 2) for g in self.inverse)))


def fundamental_matrix(coeffs: ModelCoefficients, grid: TimeGrid) -> GammaMatrix:
    """Classical RK4 for ``dGamma/dt = b(t) Gamma`` with ``Gamma(0) = I``."""
    n = coeffs.n
    h = grid.dt
    G = np.empty((grid.n_steps + 1, n, n))
    G[0] = np.eye(n)
    for k in range(grid.n_steps):
        t = grid.nodes[k]
        b1 = coeffs.at(t)["b"]
        b2 = coeffs.at(t + 0.5 * h)["b"]
        b3 = coeffs.at(t + h)["b"]
        g = G[k]
        k1 = b1 @ g
        k2 = b2 @ (g + 0.5 * h * k1)
        k3 = b2 @ (g + 0.5 * h * k2)
        k4 = b3 @ (g + h * k3)
        G[k + 1] = g + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    inv = np.empty_like(G)
    for k in range(G.shape[0]):
        if np.linalg.cond(G[k]) > COND_LIMIT:
            raise np.linalg.LinAlgError(f"fundamental matrix ill-conditioned at node {k}")
        inv[k] = np.linalg.solve(G[k], np.eye(n))
    return GammaMatrix(G, inv)


# ---------------------------------------------------------------------------
# Fenchel transform


def _inner_concave_max(driver: DriverSpec, t: float, vstar: np.ndarray, start: np.ndarray, max_iter: int = 200):
    """Damped Newton for ``max_v <vstar, v> - f(t, v)`` with v = (y, z)."""
    d = vstar.size - 1

    def obj(v):
        return float(vstar @ v - driver.f(t, v[:1], v[None, 1:])[0])

    def grad(v):
        fy, fz = driver.gradient(t, v[:1], v[None, 1:])
        return vstar - np.concatenate([np.atleast_1d(fy), np.asarray(fz).reshape(-1)])

    v = start.astype(float).copy()
    val = obj(v)
    lam = 1e-8
    for _ in range(max_iter):
        gv = grad(v)
        if np.linalg.norm(gv) < 1e-10 * (1.0 + np.linalg.norm(vstar)):
            return v, val, True
        h = 1e-5 * (1.0 + np.linalg.norm(v))
        H = np.empty((d + 1, d + 1))
        for j in range(d + 1):
            e = np.zeros(d + 1)
            e[j] = h
            H[:, j] = (grad(v + e) - grad(v - e)) / (2 * h)
        H = 0.5 * (H + H.T)
        improved = False
        for _ in range(40):
            try:
                step = np.linalg.solve(H - lam * np.eye(d + 1), -gv)
            except np.linalg.LinAlgError:
                lam = max(lam * 10, 1e-6)
                continue
            cand = v + step
            cv = obj(cand)
            if np.isfinite(cv) and cv >= val - 1e-14 * (1 + abs(val)):
                v, val = cand, cv
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam = max(lam * 10, 1e-6)
        if not improved or np.linalg.norm(v) > 1e8:
            break
    gv = grad(v)
    return v, val, bool(np.linalg.norm(gv) < 1e-7 * (1.0 + np.linalg.norm(vstar)))


def fenchel_dual(driver: DriverSpec, t: float, y_star: float, z_star) -> ExtendedReal:
    """``sup_{y,z} y* y + z* . z - f(t, y, z)``; infinite when ``|y*| > alpha``."""
    z_star = np.atleast_1d(np.asarray(z_star, float))
    if abs(y_star) > driver.alpha + 1e-12:
        return ExtendedReal.inf()
    if driver.kind == "quadratic_benchmark":
        return ExtendedReal(0.5 * driver.penalty * float(z_star @ z_star))
    vstar = np.concatenate([[float(y_star)], z_star])
    starts = [np.zeros_like(vstar), vstar.copy(), -0.5 * vstar + 0.1]
    best_v, best_val, ok_any = None, -math.inf, False
    for s in starts:
        v, val, ok = _inner_concave_max(driver, t, vstar, s)
        if val > best_val:
            best_v, best_val = v, val
        ok_any = ok_any or ok
        if ok:
            break
    if ok_any:
        return ExtendedReal(best_val)
    if vstar.size <= 2:
        # grid scan fallback around the best Newton iterate
        span = 10.0 * (1.0 + np.abs(best_v if best_v is not None else vstar))
        axes = [np.linspace(c - s, c + s, 2001 if vstar.size == 1 else 401) for c, s in zip(best_v, span)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, vstar.size)
        vals = mesh @ vstar - driver.f(t, mesh[:, 0], mesh[:, 1:])
        best_val = max(best_val, float(np.max(vals)))
    return ExtendedReal(best_val, converged=False, lower_bound=best_val)


def strict_convexity_margin(driver: DriverSpec, sample_pairs, theta: float, t: float = 0.0) -> float:
    """Largest c with ``f*(mix) <= theta f*(a) + (1-theta) f*(b) - c theta (1-theta)|a - b|^2`` on the pairs."""
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    best = math.inf
    used = 0
    for a, b in sample_pairs:
        a = np.atleast_1d(np.asarray(a, float))
        b = np.atleast_1d(np.asarray(b, float))
        dist2 = float((a - b) @ (a - b))
        if dist2 == 0.0:
            continue
        fa = fenchel_dual(driver, t, a[0], a[1:])
        fb = fenchel_dual(driver, t, b[0], b[1:])
        mix = theta * a + (1 - theta) * b
        fm = fenchel_dual(driver, t, mix[0], mix[1:])
        if not (fa.is_finite and fb.is_finite and fm.is_finite):
            continue
        c = (theta * fa.value + (1 - theta) * fb.value - fm.value) / (theta * (1 - theta) * dist2)
        best = min(best, c)
        used += 1
    if used == 0:
        warnings.warn("strict_convexity_margin: no usable pairs", RuntimeWarning, stacklevel=2)
        return 0.0
    return max(0.0, best)


# ---------------------------------------------------------------------------
# assumption checks


@dataclass(frozen=True)
class AssumptionReport:
    gamma: float
    gamma_matrix_norms: tuple
    small_time_ok: bool
    small_time_value: float
    violations: tuple  # of (assumption id, witness dict)

    @property
    def ok(self) -> bool:
        return len(self.violations) == 0

    def to_json(self) -> dict:
        return {"gamma": self.gamma, "gamma_matrix_norms": list(self.gamma_matrix_norms),
                "small_time_ok": self.small_time_ok, "small_time_value": self.small_time_value,
                "violations": [{"assumption": a, "witness": w} for a, w in self.violations]}

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True).encode()


class AssumptionError(ValueError):
    pass


def gamma_constant(beta: float, L: float, alpha: float, T: float, norm_G: float, norm_Ginv: float,
                   norm_nu: float, norm_sigma: float) -> float:
    m = max(1.0, L)
    e = math.exp(alpha * T)
    return 8.0 * beta * m * e * norm_G * norm_Ginv * (norm_nu + 12.0 * m * e * norm_sigma)


def small_time_value(beta, L, alpha, T, norm_G, norm_Ginv, norm_nu) -> float:
    return 4.0 * beta * math.exp(alpha * T) * L * norm_G ** 2 * norm_Ginv ** 2 * norm_nu ** 2 * T


def _witness(**kw) -> dict:
    return {k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else float(v) if isinstance(v, (np.floating, float)) else v)
            for k, v in kw.items()}


def validate_model(coeffs: ModelCoefficients, driver: DriverSpec, ell: RunningCostSpec, g: TerminalCostSpec,
                   n_samples: int = 256, seed: int = 0, box: float = 4.0, grid_steps: int = 64,
                   require_decomposition: bool = False) -> AssumptionReport:
    """Sampled checks of the standing assumptions and the derived constants.

    A failed sample is reported as a violation with its witness; a clean
    sweep is evidence, not proof.
    """
    from scipy.stats import qmc

    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    grid = TimeGrid(grid_steps, coeffs.T)
    ev = coeffs.evaluate(grid, grid.nodes)  # raises on non-finite values
    L = coeffs.bound_L
    violations: list = []
    n, d = coeffs.n, coeffs.d

    sup = {k: float(max(np.linalg.norm(v.reshape(v.shape[0], -1), axis=1))) for k, v in ev.items()}
    for key, aid in (("a", "A1"), ("b", "A1"), ("c", "A1"), ("nu", "A2"), ("sigma", "A2")):
        if sup[key] > L + 1e-12:
            violations.append((aid, _witness(coefficient=key, sup_norm=sup[key], bound=L)))
    if coeffs.r_flag == 0 and sup["sigma"] > 0:
        violations.append(("A2", _witness(reason="sigma must vanish when r = 0", sup_norm=sup["sigma"])))

    sob = qmc.Sobol(d=max(1, n) + max(1, n) + 1, scramble=True, seed=seed)
    raw = sob.random(n_samples)
    X = (2 * raw[:, :n] - 1) * box
    Xp = (2 * raw[:, n:2 * n] - 1) * box
    theta = raw[:, -1]

    # driver: growth and midpoint convexity on (y, z)
    sob_f = qmc.Sobol(d=2 * (1 + d), scramble=True, seed=seed + 1)
    rf = (2 * sob_f.random(n_samples) - 1) * box
    y1, z1, y2, z2 = rf[:, 0], rf[:, 1:1 + d], rf[:, 1 + d], rf[:, 2 + d:]
    fv = driver.f(0.0, y1, z1)
    bound = driver.f0_bound + driver.alpha * np.abs(y1) + 0.5 * driver.beta * np.sum(z1 * z1, axis=1)
    bad = np.where(fv > bound + 1e-9)[0]
    if bad.size:
        i = int(bad[0])
        violations.append(("A3", _witness(reason="growth", y=y1[i], z=z1[i], f=fv[i], bound=bound[i])))
    mid = driver.f(0.0, 0.5 * (y1 + y2), 0.5 * (z1 + z2))
    avg = 0.5 * (fv + driver.f(0.0, y2, z2))
    bad = np.where(mid > avg + 1e-9 * (1 + np.abs(avg)))[0]
    if bad.size:
        i = int(bad[0])
        violations.append(("A3", _witness(reason="convexity", y1=y1[i], z1=z1[i], y2=y2[i], z2=z2[i])))

    # running cost: strong monotonicity of the gradient
    P1 = X.copy()
    P2 = Xp.copy()
    dg = ell.grad(0.0, P1) - ell.grad(0.0, P2)
    lhs = np.sum(dg * (P1 - P2), axis=1)
    rhs = ell.strong_convexity * np.sum((P1 - P2) ** 2, axis=1)
    bad = np.where(lhs < rhs - 1e-9 * (1 + rhs))[0]
    if bad.size:
        i = int(bad[0])
        violations.append(("A5", _witness(reason="gradient monotonicity", psi=P1[i], psi_prime=P2[i],
                                          lhs=lhs[i], rhs=rhs[i])))
    l0 = float(np.abs(ell.ell(0.0, np.zeros((1, n)))[0]))
    if l0 > L:
        violations.append(("A5", _witness(reason="|ell(t,0)| > L", value=l0)))

    # terminal cost against the empirical initial law
    mu = WeightedMeasure.empirical(coeffs.initial_law.sample(min(n_samples, 512), seed))
    gx = g.g(X, mu)
    nx = np.linalg.norm(X, axis=1)
    Lg = max(L, g.growth_const)
    r = coeffs.r_flag
    g_mid = g.g(theta[:, None] * X + (1 - theta[:, None]) * Xp, mu)
    g_avg = theta * gx + (1 - theta) * g.g(Xp, mu)
    bad = np.where(g_mid > g_avg + 1e-9 * (1 + np.abs(g_avg)))[0]
    if bad.size:
        i = int(bad[0])
        violations.append(("A7", _witness(reason="convexity in x", x=X[i], x_prime=Xp[i], theta=theta[i])))
    upper = Lg * (1 + nx ** (2 - r))
    lower = -Lg * (1 + nx)
    over_up = np.where(gx > upper + 1e-9)[0]
    if r == 1 and np.any(gx > 2.0 * upper + 1e-9):
        i = int(np.argmax(gx - upper))
        raise AssumptionError(f"terminal cost grows faster than linearly with r = 1 (x = {X[i].tolist()})")
    if over_up.size:
        i = int(over_up[0])
        violations.append(("A7", _witness(reason="upper growth", x=X[i], g=gx[i], bound=upper[i])))
    under = np.where(gx < lower - 1e-9)[0]
    if under.size:
        i = int(under[0])
        violations.append(("A7", _witness(reason="lower growth", x=X[i], g=gx[i], bound=lower[i])))
    gr = np.linalg.norm(g.grad_x(X, mu), axis=1)
    gbound = Lg * (1 + nx ** (1 - r))
    bad = np.where(gr > gbound + 1e-9)[0]
    if bad.size:
        i = int(bad[0])
        violations.append(("A7", _witness(reason="gradient growth", x=X[i], grad_norm=gr[i], bound=gbound[i])))
    if require_decomposition and g.decomposition is None:
        violations.append(("A9", _witness(reason="no bounded/Lipschitz split g = g0 + g1 available")))

    G = fundamental_matrix(coeffs, grid)
    nG, nGi = G.norms()
    norm_nu = sup["nu"]
    norm_sigma = sup["sigma"]
    gam = gamma_constant(driver.beta, L, driver.alpha, coeffs.T, nG, nGi, norm_nu, norm_sigma)
    stv = small_time_value(driver.beta, L, driver.alpha, coeffs.T, nG, nGi, norm_nu)
    return AssumptionReport(gam, (nG, nGi), bool(stv < 1.0), stv, tuple(violations))
