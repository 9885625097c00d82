"""Seeded path ensembles, Euler state simulation, density processes and entropies."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from ._backend import kernels

if TYPE_CHECKING:  # pragma: no cover
    from .model import DriverSpec, ModelCoefficients

LOG_Q_BOUND = 50.0
_MASK64 = (1 << 64) - 1

# stream tags keep the Brownian, initial-law and auxiliary draws apart
TAG_BROWNIAN = 1
TAG_INITIAL = 2
TAG_AUX = 3


class SimulationError(RuntimeError):
    """Raised with a (path, step) witness when a recursion leaves the finite range."""

    def __init__(self, message: str, path: int, step: int):
        super().__init__(f"{message} at path {path}, step {step}")
        self.path = path
        self.step = step


def thread_count() -> int:
    raw = os.environ.get("THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)


def path_generator(seed: int, path: int, tag: int = TAG_BROWNIAN) -> np.random.Generator:
    """Counter-based stream keyed by (seed, tag, path) alone."""
    key = ((int(seed) & _MASK64) << 64) | ((int(tag) & 0xFFFF) << 48) | (int(path) & ((1 << 48) - 1))
    return np.random.Generator(np.random.Philox(key=key))


def per_path_normals(seed: int, n_paths: int, shape: tuple, tag: int, threads: Optional[int] = None) -> np.ndarray:
    """Standard normals of ``shape`` per path, filled chunk-wise on a thread pool.

    Every path owns its stream, so the result does not depend on the number of threads.
    """
    out = np.empty((n_paths,) + tuple(shape))
    size = int(np.prod(shape)) if shape else 1

    def fill(lo_hi):
        lo, hi = lo_hi
        for p in range(lo, hi):
            out[p] = path_generator(seed, p, tag).standard_normal(size).reshape(shape)

    threads = thread_count() if threads is None else threads
    chunk = max(1, -(-n_paths // threads))
    spans = [(lo, min(n_paths, lo + chunk)) for lo in range(0, n_paths, chunk)]
    if threads == 1 or len(spans) == 1:
        for s in spans:
            fill(s)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, spans))
    return out


@dataclass(frozen=True)
class TimeGrid:
    n_steps: int
    T: float
    nodes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_steps < 1 or not self.T > 0:
            raise ValueError("need n_steps >= 1 and T > 0")
        object.__setattr__(self, "nodes", np.linspace(0.0, self.T, self.n_steps + 1))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def left_nodes(self) -> np.ndarray:
        return self.nodes[:-1]


@dataclass(frozen=True)
class BrownianEnsemble:
    grid: TimeGrid
    increments: np.ndarray  # [path, step, d]
    seed: int

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    @property
    def stream_ids(self) -> np.ndarray:
        return np.arange(self.n_paths)

    def paths(self) -> np.ndarray:
        """W at the grid nodes, [path, step+1, d]."""
        w = np.zeros((self.n_paths, self.grid.n_steps + 1, self.d))
        np.cumsum(self.increments, axis=1, out=w[:, 1:])
        return w

    def subset(self, index) -> "BrownianEnsemble":
        return BrownianEnsemble(self.grid, self.increments[index], self.seed)


def sample_brownian(grid: TimeGrid, n_paths: int, d: int, seed: int, threads: Optional[int] = None) -> BrownianEnsemble:
    if n_paths < 1 or d < 1:
        raise ValueError("need n_paths >= 1 and d >= 1")
    z = per_path_normals(seed, n_paths, (grid.n_steps, d), TAG_BROWNIAN, threads)
    z *= math.sqrt(grid.dt)
    z.setflags(write=False)
    return BrownianEnsemble(grid, z, int(seed))


@dataclass(frozen=True)
class ControlField:
    """Control values per (path, step). ``parameterization`` records how they were produced."""

    values: np.ndarray  # [path, step, n]
    parameterization: str = "open_loop_table"
    coefficients: Optional[dict] = None
    label: str = "control"

    @classmethod
    def zeros(cls, n_paths: int, n_steps: int, n: int, label: str = "zero") -> "ControlField":
        return cls(np.zeros((n_paths, n_steps, n)), label=label)

    @classmethod
    def constant(cls, value, n_paths: int, n_steps: int, n: int = 1) -> "ControlField":
        v = np.broadcast_to(np.asarray(value, dtype=float), (n,))
        return cls(np.tile(v, (n_paths, n_steps, 1)), label="constant")

    def scaled(self, factor: float) -> "ControlField":
        return ControlField(self.values * factor, self.parameterization, self.coefficients, f"{factor:g}*{self.label}")


@dataclass(frozen=True)
class StatePaths:
    values: np.ndarray  # [path, step+1, n]
    control_ref: str = ""

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]


@dataclass(frozen=True)
class NatureControl:
    y_star: np.ndarray  # [path, step]
    z_star: np.ndarray  # [path, step, d]
    alpha: float = 0.0
    clip_count: int = 0

    def __post_init__(self):
        if np.any(np.abs(self.y_star) > self.alpha + 1e-12):
            raise ValueError("|y*| exceeds alpha")

    @classmethod
    def zeros(cls, n_paths: int, n_steps: int, d: int) -> "NatureControl":
        return cls(np.zeros((n_paths, n_steps)), np.zeros((n_paths, n_steps, d)))

    @classmethod
    def constant_tilt(cls, zeta, n_paths: int, n_steps: int, d: int = 1) -> "NatureControl":
        z = np.broadcast_to(np.asarray(zeta, dtype=float), (d,))
        return cls(np.zeros((n_paths, n_steps)), np.tile(z, (n_paths, n_steps, 1)))

    @property
    def uses_ystar(self) -> bool:
        return bool(np.any(self.y_star != 0))


@dataclass(frozen=True)
class DensityProcess:
    log_q: np.ndarray  # [path, step+1]
    nature_control: Optional[NatureControl] = None

    @property
    def q_values(self) -> np.ndarray:
        return np.exp(self.log_q)

    @property
    def terminal(self) -> np.ndarray:
        return np.exp(self.log_q[:, -1])

    @property
    def uses_ystar(self) -> bool:
        return self.nature_control is not None and self.nature_control.uses_ystar

    @classmethod
    def unit(cls, n_paths: int, n_steps: int, d: int = 1) -> "DensityProcess":
        return cls(np.zeros((n_paths, n_steps + 1)), NatureControl.zeros(n_paths, n_steps, d))


def _check_finite(arr: np.ndarray, what: str):
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise SimulationError(f"non-finite {what}", int(idx[0]), int(idx[1]) if idx.size > 1 else 0)


def simulate_state(coeffs: "ModelCoefficients", control: ControlField, W: BrownianEnsemble,
                   init_seed: int = 0, x0: Optional[np.ndarray] = None) -> StatePaths:
    """Euler-Maruyama path of the controlled state.

    ``x0`` overrides the draw from the initial law when given.
    """
    grid = W.grid
    ev = coeffs.evaluate(grid)
    P, K = W.n_paths, grid.n_steps
    psi = np.ascontiguousarray(control.values, dtype=float)
    if psi.shape != (P, K, coeffs.n):
        raise ValueError(f"control shape {psi.shape} does not match {(P, K, coeffs.n)}")
    if W.d != coeffs.d:
        raise ValueError("noise dimension mismatch")
    if x0 is None:
        x0 = coeffs.initial_law.sample(P, init_seed)
    x0 = np.ascontiguousarray(np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1, coeffs.n), (P, coeffs.n)))
    with np.errstate(over="ignore", invalid="ignore"):
        out = kernels.euler_paths(x0, ev["a"], ev["b"], ev["c"], ev["nu"], ev["sigma"], psi,
                                  np.ascontiguousarray(W.increments), grid.dt, int(coeffs.r_flag))
    out = np.asarray(out)
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out).all(axis=2))[0]
        raise SimulationError("non-finite state", int(bad[0]), int(bad[1]))
    return StatePaths(out, control.label)


def simulate_density(nc: NatureControl, W: BrownianEnsemble, log_bound: float = LOG_Q_BOUND) -> DensityProcess:
    """Log-Euler scheme for ``dq = q y* dt + q z* . dW`` started at 1."""
    if np.any(np.abs(nc.y_star) > nc.alpha + 1e-12):
        raise ValueError("|y*| exceeds alpha")
    lq = np.asarray(kernels.log_density(np.ascontiguousarray(nc.y_star, dtype=float),
                                        np.ascontiguousarray(nc.z_star, dtype=float),
                                        np.ascontiguousarray(W.increments), W.grid.dt))
    _check_finite(lq, "log density")
    over = np.abs(lq) > log_bound
    if over.any():
        idx = np.argwhere(over)[0]
        raise SimulationError(f"|ln q| above {log_bound}", int(idx[0]), int(idx[1]))
    return DensityProcess(lq, nc)


def mean_se(samples: np.ndarray) -> tuple[float, float]:
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    if n < 2:
        return float(samples.mean()), 0.0
    return float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(n))


def time_integral(q_values: np.ndarray, step_values: np.ndarray, dt: float) -> np.ndarray:
    """Per-path ``int q_s h_s ds`` with q on nodes and h piecewise constant on steps.

    The node average (q_k + q_{k+1}) / 2 is the trapezoid rule in q.
    """
    qbar = 0.5 * (q_values[:, :-1] + q_values[:, 1:])
    return (qbar * step_values).sum(axis=1) * dt


def generalized_entropy(q: DensityProcess, driver: "DriverSpec", grid: Optional[TimeGrid] = None) -> tuple[float, float]:
    """Monte Carlo estimate and standard error of ``E int q f*(s, Y*, Z*) ds``."""
    nc = q.nature_control
    if nc is None:
        raise ValueError("density carries no Nature control")
    K = nc.y_star.shape[1]
    if grid is None:
        raise ValueError("a time grid is needed for the quadrature")
    fstar = driver.dual_values(grid.left_nodes, nc.y_star, nc.z_star)
    if not np.all(np.isfinite(fstar)):
        bad = np.argwhere(~np.isfinite(fstar))[0]
        raise SimulationError("infinite f*", int(bad[0]), int(bad[1]))
    assert fstar.shape[1] == K
    return mean_se(time_integral(q.q_values, fstar, grid.dt))


def relative_entropy(q_terminal: np.ndarray) -> tuple[float, float]:
    """``E[q ln q]`` with standard error."""
    qt = np.asarray(q_terminal, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(qt > 0, qt * np.log(np.where(qt > 0, qt, 1.0)), 0.0)
    return mean_se(term)


def ent(x):
    """``x (ln x - 1)`` for positive x."""
    arr = np.asarray(x, dtype=float)
    if np.any(arr <= 0):
        raise ValueError("Ent is defined for positive arguments only")
    out = arr * (np.log(arr) - 1.0)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class DualEntropyEstimate:
    value: float
    se: float
    overflow: bool = False
    max_exponent: float = 0.0


def log_mean_exp(a: np.ndarray) -> float:
    m = float(np.max(a))
    return m + math.log(float(np.mean(np.exp(a - m))))


def dual_entropy_from_integrals(energy: np.ndarray, gamma: float, bound: float = 700.0) -> DualEntropyEstimate:
    """``gamma ln E exp(energy / gamma)`` with a delta-method standard error."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    a = np.asarray(energy, dtype=float) / gamma
    mx = float(np.max(a))
    if not np.isfinite(mx) or mx > bound:
        return DualEntropyEstimate(math.inf, math.inf, True, mx)
    w = np.exp(a - mx)
    mw = float(w.mean())
    n = a.shape[0]
    se = gamma * float(w.std(ddof=1)) / (mw * math.sqrt(n)) if n > 1 else 0.0
    return DualEntropyEstimate(gamma * (mx + math.log(mw)), se, False, mx)


def control_energy(psi: ControlField, dt: float) -> np.ndarray:
    """Per-path ``int |psi|^2 ds`` (left Riemann sum on the control table)."""
    return np.einsum("pkn,pkn->p", psi.values, psi.values) * dt


def dual_entropy_quadratic(psi: ControlField, gamma: float, W: BrownianEnsemble, X_driver_paths=None) -> DualEntropyEstimate:
    """Donsker-Varadhan form ``gamma ln E exp((1/gamma) int |psi|^2)`` of the dual entropy.

    ``X_driver_paths`` is accepted for interface symmetry; the estimate only
    needs the control table, sampled on the ensemble that produced it.
    """
    if psi.values.shape[0] != W.n_paths:
        raise ValueError("control and ensemble disagree in path count")
    return dual_entropy_from_integrals(control_energy(psi, W.grid.dt), gamma)


@dataclass(frozen=True)
class DualityGap:
    gap: float
    se: float
    S_q: float
    S_star: float
    rhs: float


def duality_gap(q: DensityProcess, zeta: ControlField, gamma: float, driver: "DriverSpec", grid: TimeGrid) -> DualityGap:
    """``S(q) + S*(zeta)/gamma - (1/gamma) E int q |zeta|^2`` and its standard error.

    With ``S*`` the Donsker-Varadhan value this is ``H(q | Gibbs)``, which is
    non-negative and vanishes at the Gibbs maximiser (see the decisions ledger
    for the scaling of the ``S*`` term).
    """
    if driver.kind != "quadratic_benchmark":
        raise ValueError("dual entropy is only evaluable for the quadratic benchmark")
    nc = q.nature_control
    fstar = driver.dual_values(grid.left_nodes, nc.y_star, nc.z_star)
    s_path = time_integral(q.q_values, fstar, grid.dt)
    sq2 = np.einsum("pkn,pkn->pk", zeta.values, zeta.values)
    r_path = time_integral(q.q_values, sq2, grid.dt)
    energy = sq2.sum(axis=1) * grid.dt
    dual = dual_entropy_from_integrals(energy, gamma)
    if dual.overflow:
        return DualityGap(math.inf, math.inf, float(s_path.mean()), math.inf, float(r_path.mean()) / gamma)
    combined = s_path - r_path / gamma
    c_mean, c_se = mean_se(combined)
    gap = c_mean + dual.value / gamma
    se = math.sqrt(c_se ** 2 + (dual.se / gamma) ** 2)
    return DualityGap(gap, se, float(s_path.mean()), dual.value, float(r_path.mean()) / gamma)


@dataclass(frozen=True)
class EntropyMassDiagnostics:
    E_ent_qT: float
    S_q: float
    bound_slack: float
    anomaly: bool


def entropy_mass_diagnostics(q: DensityProcess, driver: "DriverSpec", grid: TimeGrid, C: float = 2.0) -> EntropyMassDiagnostics:
    """Check ``E[Ent(q_T)] <= C (1 + S(q))`` as a run-time monitor."""
    e_ent = float(ent(q.terminal).mean())
    s_q, _ = generalized_entropy(q, driver, grid)
    slack = C * (1.0 + s_q) - e_ent
    return EntropyMassDiagnostics(e_ent, s_q, slack, slack < 0)
