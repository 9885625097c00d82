"""Frozen-measure min-max problem: best responses of both sides, damped alternation, first-order residuals."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bsde import (AdjointSolution, RegressionBasis, ValueSolution, nature_control_from_value, project,
                   solve_adjoint_bsde, solve_value_bsde)
from .measure import WeightedMeasure
from .model import DriverSpec, Model, fundamental_matrix, quadratic_benchmark, quadratic_running_cost
from .simulate import (LOG_Q_BOUND, BrownianEnsemble, ControlField, DensityProcess, NatureControl,
                       SimulationError, StatePaths, TimeGrid, dual_entropy_from_integrals, mean_se,
                       sample_brownian, simulate_density, simulate_state, time_integral)


class DensityOverflowError(SimulationError):
    def __init__(self, max_exponent: float, path: int, step: int):
        super().__init__(f"density exponent {max_exponent:.3g} beyond {LOG_Q_BOUND}", path, step)
        self.max_exponent = max_exponent


@dataclass(frozen=True)
class PathSet:
    """A Brownian ensemble with the initial states drawn once, shared by every evaluation (common randomness)."""

    W: BrownianEnsemble
    x0: np.ndarray  # [path, n]

    @property
    def grid(self) -> TimeGrid:
        return self.W.grid

    @property
    def n_paths(self) -> int:
        return self.W.n_paths


def make_pathset(model: Model, n_paths: int, n_steps: int, seed: int, threads: Optional[int] = None) -> PathSet:
    grid = TimeGrid(n_steps, model.coeffs.T)
    W = sample_brownian(grid, n_paths, model.coeffs.d, seed, threads)
    x0 = model.coeffs.initial_law.sample(n_paths, seed)
    x0.setflags(write=False)
    return PathSet(W, x0)


def nature_driver(model: Model, gamma: Optional[float] = None) -> DriverSpec:
    """Driver used on Nature's side; ``gamma`` replaces the benchmark penalty."""
    if gamma is None:
        return model.driver
    if model.driver.kind != "quadratic_benchmark":
        raise ValueError("gamma override only applies to the quadratic benchmark")
    return quadratic_benchmark(gamma)


def _running(model: Model, psi: ControlField, grid: TimeGrid) -> np.ndarray:
    return np.asarray(model.ell.ell(0.0, psi.values), float)


# ---------------------------------------------------------------------------
# cost functional


@dataclass(frozen=True)
class CostEstimate:
    J: float
    se: float
    terminal: float
    running: float
    entropy: float

    def to_json(self) -> dict:
        return {"J": self.J, "se": self.se, "terminal": self.terminal, "running": self.running, "entropy": self.entropy}


def cost_samples(mu: WeightedMeasure, psi: ControlField, q: DensityProcess, model: Model, X: StatePaths,
                 driver: Optional[DriverSpec] = None):
    """Per-path (terminal, running, entropy) contributions.

    For the quadratic benchmark q is a martingale, so both E[int q ell] and
    S(q) are taken in terminal form, ``E[q_T sum ell dt]`` and
    ``penalty E[q_T ln q_T]``: the same expectations, with the discrete Gibbs
    tilt an exact in-sample maximiser. Other drivers use the trapezoid in q.
    """
    driver = model.driver if driver is None else driver
    grid = TimeGrid(psi.values.shape[1], model.coeffs.T)
    ellv = _running(model, psi, grid)
    gT = model.g.g(X.terminal, mu)
    qT = q.terminal
    term = qT * gT
    if driver.kind == "quadratic_benchmark":
        run = qT * ellv.sum(axis=1) * grid.dt
        ent = driver.penalty * qT * q.log_q[:, -1]
    else:
        run = time_integral(q.q_values, ellv, grid.dt)
        nc = q.nature_control
        ent = time_integral(q.q_values, driver.dual_values(grid.left_nodes, nc.y_star, nc.z_star), grid.dt)
    return term, run, ent


def cost_functional(mu: WeightedMeasure, psi: ControlField, q: DensityProcess, model: Model, ps: PathSet,
                    X: Optional[StatePaths] = None, driver: Optional[DriverSpec] = None) -> CostEstimate:
    """``E[q_T g(X_T, mu) + int q ell] - S(q)`` with a paired standard error."""
    if X is None:
        X = simulate_state(model.coeffs, psi, ps.W, x0=ps.x0)
    term, run, ent = cost_samples(mu, psi, q, model, X, driver)
    J, se = mean_se(term + run - ent)
    if not np.isfinite(J):
        raise SimulationError("non-finite cost", 0, 0)
    return CostEstimate(J, se, float(term.mean()), float(run.mean()), float(ent.mean()))


# ---------------------------------------------------------------------------
# Nature


@dataclass(frozen=True)
class NatureResponse:
    q: DensityProcess
    nc: NatureControl
    value_gibbs: float
    value_gibbs_se: float
    value_bsde: float
    value_bsde_se: float
    paired_diff_se: float
    y0: float
    value: ValueSolution
    driver: DriverSpec


def _normaliser(a: np.ndarray, x0: np.ndarray, basis: RegressionBasis) -> np.ndarray:
    """Per-path ``ln E[exp(a) | eta]``, shifted so that ``mean(exp(a - norm)) = 1``."""
    m = float(np.max(a))
    e = np.exp(a - m)
    F = basis.features(x0)
    if F.shape[1] == 1:
        norm = np.full(a.shape, m + math.log(float(e.mean())))
    else:
        fit, _ = project(F, e)
        fit = np.maximum(fit, 1e-300)
        norm = m + np.log(fit)
    shift = math.log(float(np.mean(np.exp(a - norm))))
    return norm + shift


def nature_best_response(mu: WeightedMeasure, psi: ControlField, X: StatePaths, gamma: Optional[float],
                         model: Model, ps: PathSet, basis: Optional[RegressionBasis] = None) -> NatureResponse:
    """Nature's best response to ``psi`` with the measure frozen.

    Quadratic benchmark: the terminal density is the Gibbs tilt
    ``exp((C_T - norm) / gamma)`` with ``C_T = g + int ell``, normalised
    given eta. Intermediate nodes use ``exp((Y_t + int_0^t ell - Y_0) / gamma)``
    from the value BSDE, whose Z also gives ``z* = Z / gamma``. The BSDE route
    (log-Euler from that z*) is evaluated too and reported alongside.
    Other drivers: value BSDE, then the gradient map.
    """
    basis = RegressionBasis() if basis is None else basis
    W = ps.W
    grid = W.grid
    drv = nature_driver(model, gamma)
    ellv = _running(model, psi, grid)
    gT = model.g.g(X.terminal, mu)
    v = solve_value_bsde(X, psi, gT, drv, model.ell, basis, W, running=ellv)
    nc = nature_control_from_value(drv, v, grid)
    if drv.kind != "quadratic_benchmark":
        q = simulate_density(nc, W)
        term, run, ent = cost_samples(mu, psi, q, model, X, drv)
        val, se = mean_se(term + run - ent)
        return NatureResponse(q, nc, val, se, val, se, 0.0, v.Y0, v, drv)

    gam = drv.penalty
    L = np.zeros((W.n_paths, grid.n_steps + 1))
    np.cumsum(ellv * grid.dt, axis=1, out=L[:, 1:])
    C = gT + L[:, -1]
    a = C / gam
    norm = _normaliser(a, ps.x0, basis)
    log_q = (v.Y + L - v.Y[:, :1]) / gam
    log_q[:, 0] = 0.0
    log_q[:, -1] = a - norm
    big = np.abs(log_q) > LOG_Q_BOUND
    if big.any() or not np.all(np.isfinite(log_q)):
        i, k = np.argwhere(big | ~np.isfinite(log_q))[0]
        raise DensityOverflowError(float(np.nanmax(np.abs(log_q))), int(i), int(k))
    q = DensityProcess(log_q, nc)
    qT = q.terminal
    gibbs_samples = qT * C - gam * qT * log_q[:, -1]
    val_g = float(gibbs_samples.mean())
    se_g = dual_entropy_from_integrals(C, gam).se

    try:
        qb = simulate_density(nc, W)
    except SimulationError:
        return NatureResponse(q, nc, val_g, se_g, math.nan, math.inf, math.inf, v.Y0, v, drv)
    qbT = qb.terminal
    fstar = drv.dual_values(grid.left_nodes, nc.y_star, nc.z_star)
    bsde_samples = qbT * C - time_integral(qb.q_values, fstar, grid.dt)
    val_b, se_b = mean_se(bsde_samples)
    _, diff_se = mean_se(bsde_samples - gibbs_samples)
    return NatureResponse(q, nc, val_g, se_g, val_b, se_b, diff_se, v.Y0, v, drv)


# ---------------------------------------------------------------------------
# player


@dataclass(frozen=True)
class PlayerResponse:
    psi: ControlField
    X: StatePaths
    adjoint: AdjointSolution
    gradient: np.ndarray
    residual: float
    cost: float
    iterations: int
    converged: bool
    reason: str = ""


def foc_gradient(model: Model, psi: ControlField, q: DensityProcess, adj: AdjointSolution, grid: TimeGrid) -> np.ndarray:
    """``q grad ell + c^T p + r Tr(sigma^T k)`` per (path, step)."""
    ev = model.coeffs.evaluate(grid)
    qk = q.q_values[:, :-1, None]
    G = qk * model.ell.grad(0.0, psi.values)
    G = G + np.einsum("kij,pki->pkj", ev["c"], adj.p[:, :-1])
    if model.coeffs.r_flag:
        if adj.k is None:
            raise ValueError("r = 1 needs the adjoint martingale integrand k")
        G = G + np.einsum("kijl,pkij->pkl", ev["sigma"], adj.k)
    return G


def residual_norm(G: np.ndarray, dt: float) -> float:
    return float(math.sqrt(np.einsum("pkn,pkn->p", G, G).mean() * dt))


def _player_cost(mu, psi, q, model, X, drv):
    term, run, _ = cost_samples(mu, psi, q, model, X, drv)
    return float((term + run).mean())


def _adjoint_for(mu, psi, q, model, ps, basis, gamma_matrix):
    X = simulate_state(model.coeffs, psi, ps.W, x0=ps.x0)
    tg = q.terminal[:, None] * model.g.grad_x(X.terminal, mu)
    adj = solve_adjoint_bsde(X, q, model.coeffs, tg, basis, ps.W, gamma_matrix=gamma_matrix)
    return X, adj


def player_best_response(mu: WeightedMeasure, q: DensityProcess, model: Model, ps: PathSet,
                         start: Optional[ControlField] = None, opts: Optional["SaddleOptions"] = None,
                         driver: Optional[DriverSpec] = None, tol: Optional[float] = None) -> PlayerResponse:
    """Preconditioned projected gradient descent on the open-loop control table.

    The step divides the adjoint gradient by ``q * hessian_bound``; for a
    quadratic running cost and unit step this is the fixed-point update
    ``psi = -c^T p / q``. Armijo halving guards the player cost.
    """
    opts = SaddleOptions() if opts is None else opts
    tol = opts.inner_tol if tol is None else tol
    basis = opts.basis
    grid = ps.grid
    dt = grid.dt
    P, K, n = ps.n_paths, grid.n_steps, model.coeffs.n
    drv = model.driver if driver is None else driver
    psi = ControlField.zeros(P, K, n) if start is None else start
    Gm = fundamental_matrix(model.coeffs, grid)
    X, adj = _adjoint_for(mu, psi, q, model, ps, basis, Gm)
    cost = _player_cost(mu, psi, q, model, X, drv)
    qk = q.q_values[:, :-1, None]
    precond = 1.0 / (qk * model.ell.hessian_bound)
    reason = "iteration cap"
    it = 0
    G = foc_gradient(model, psi, q, adj, grid)
    res = residual_norm(G, dt)
    while it < opts.inner_iters:
        if res < tol:
            reason = "tolerance"
            break
        step = opts.inner_step
        direction = G * precond
        predicted = float(np.einsum("pkn,pkn->p", G, direction).mean() * dt)
        accepted = False
        for _ in range(opts.max_halvings):
            cand = ControlField(np.clip(psi.values - step * direction, -opts.psi_max, opts.psi_max),
                                "open_loop_table", None, "player_best_response")
            Xc, adjc = _adjoint_for(mu, cand, q, model, ps, basis, Gm)
            cc = _player_cost(mu, cand, q, model, Xc, drv)
            if not np.isfinite(cc):
                step *= 0.5
                continue
            Gc = foc_gradient(model, cand, q, adjc, grid)
            rc = residual_norm(Gc, dt)
            # the projected gradient is not the exact sample gradient, so a step
            # that shrinks the first-order residual is accepted as well
            if cc <= cost - opts.armijo * step * predicted or rc < res:
                psi, X, adj, cost, G, res = cand, Xc, adjc, cc, Gc, rc
                accepted = True
                break
            step *= 0.5
        it += 1
        if not accepted:
            reason = "line search"
            break
        if float(np.max(np.abs(psi.values))) >= opts.psi_max:
            reason = "divergence guard"
            break
    return PlayerResponse(psi, X, adj, G, res, cost, it, res < tol, reason)


# ---------------------------------------------------------------------------
# saddle


@dataclass(frozen=True)
class SaddleOptions:
    damping: float = 0.5
    max_outer: int = 60
    tol: float = 1e-3
    inner_step: float = 1.0
    inner_iters: int = 40
    inner_tol: float = 1e-4
    max_halvings: int = 20
    armijo: float = 1e-4
    psi_max: float = 1e3
    damping_decay: float = 0.7
    damping_floor: float = 0.1
    gamma: Optional[float] = None
    basis: RegressionBasis = field(default_factory=RegressionBasis)

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_outer < 1 or self.inner_iters < 1:
            raise ValueError("iteration caps must be positive")

    def to_json(self) -> dict:
        return {"damping": self.damping, "max_outer": self.max_outer, "tol": self.tol, "inner_step": self.inner_step,
                "inner_iters": self.inner_iters, "inner_tol": self.inner_tol, "gamma": self.gamma,
                "basis": {"kind": self.basis.kind, "degree": self.basis.degree, "bins": self.basis.bins}}


@dataclass(frozen=True)
class SaddleState:
    mu: WeightedMeasure
    psi: ControlField
    q: DensityProcess
    value: ValueSolution
    adjoint: AdjointSolution
    nc: NatureControl
    J_value: float
    J_se: float
    iterations: int
    converged: bool
    X: StatePaths
    cost: CostEstimate
    nature: NatureResponse
    driver: DriverSpec
    history: tuple = ()
    minimax_gap: float = math.nan
    minimax_gap_se: float = math.nan
    damping_used: float = math.nan
    foc: Optional[np.ndarray] = field(default=None, repr=False)
    T: float = 1.0
    g_T: Optional[np.ndarray] = field(default=None, repr=False)
    grad_T: Optional[np.ndarray] = field(default=None, repr=False)

    def summary(self) -> dict:
        res = pontryagin_residual(self)
        return {
            "J": self.J_value, "J_se": self.J_se, "decomposition": self.cost.to_json(),
            "iterations": self.iterations, "converged": self.converged,
            "residuals": res.to_json(), "minimax_gap": self.minimax_gap, "minimax_gap_se": self.minimax_gap_se,
            "damping_used": self.damping_used, "gibbs_value": self.nature.value_gibbs,
            "bsde_value": self.nature.value_bsde, "y0": self.nature.y0,
            "log": [dict(h) for h in self.history],
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


def solve_saddle(mu: WeightedMeasure, model: Model, ps: PathSet, opts: Optional[SaddleOptions] = None,
                 start: Optional[ControlField] = None) -> SaddleState:
    """Damped alternation: Nature re-tilts against psi, then ``psi <- (1 - theta) psi + theta BR(q)``.

    Converges when the player's first-order residual at (psi, BR_nature(psi))
    is below ``opts.tol``; Nature's conditions hold by construction. The
    damping shrinks whenever the change of J flips sign.
    """
    opts = SaddleOptions() if opts is None else opts
    grid = ps.grid
    P, K, n = ps.n_paths, grid.n_steps, model.coeffs.n
    psi = ControlField.zeros(P, K, n) if start is None else start
    theta = opts.damping
    hist = []
    last_dJ = 0.0
    last_J = None
    converged = False
    drv = nature_driver(model, opts.gamma)
    Gm = fundamental_matrix(model.coeffs, grid)
    it = 0
    while True:
        X = simulate_state(model.coeffs, psi, ps.W, x0=ps.x0)
        nat = nature_best_response(mu, psi, X, opts.gamma, model, ps, opts.basis)
        tg = nat.q.terminal[:, None] * model.g.grad_x(X.terminal, mu)
        adj = solve_adjoint_bsde(X, nat.q, model.coeffs, tg, opts.basis, ps.W, gamma_matrix=Gm)
        G = foc_gradient(model, psi, nat.q, adj, grid)
        res = residual_norm(G, grid.dt)
        Jc = cost_functional(mu, psi, nat.q, model, ps, X, drv)
        hist.append({"iteration": it, "J": Jc.J, "residual": res, "damping": theta})
        if last_J is not None:
            dJ = Jc.J - last_J
            if dJ * last_dJ < 0:
                theta = max(opts.damping_floor, theta * opts.damping_decay)
            last_dJ = dJ
        last_J = Jc.J
        if res < opts.tol:
            converged = True
            break
        if it >= opts.max_outer:
            break
        # the inner solve only needs to beat the current outer residual
        br = player_best_response(mu, nat.q, model, ps, psi, opts, drv, tol=max(opts.inner_tol, 0.1 * res))
        psi = ControlField(np.clip((1.0 - theta) * psi.values + theta * br.psi.values, -opts.psi_max, opts.psi_max),
                           "open_loop_table", None, "saddle")
        it += 1

    # minimax gap: one more best response on each side
    br = player_best_response(mu, nat.q, model, ps, psi, opts, drv)
    low = cost_samples(mu, br.psi, nat.q, model, br.X, drv)
    up = cost_samples(mu, psi, nat.q, model, X, drv)
    diff = (up[0] + up[1] - up[2]) - (low[0] + low[1] - low[2])
    gap, gap_se = mean_se(diff)
    return SaddleState(mu, psi, nat.q, nat.value, adj, nat.nc, Jc.J, Jc.se, it, converged, X, Jc, nat, drv,
                       tuple(hist), gap, gap_se, theta, G, model.coeffs.T, model.g.g(X.terminal, mu),
                       model.g.grad_x(X.terminal, mu))


@dataclass(frozen=True)
class PontryaginResidual:
    player_foc: float
    nature_foc: float
    terminal_p: float
    terminal_Y: float

    def to_json(self) -> dict:
        return {"player_foc": self.player_foc, "nature_foc": self.nature_foc,
                "terminal_p": self.terminal_p, "terminal_Y": self.terminal_Y}

    def max(self) -> float:
        return max(self.player_foc, self.nature_foc, self.terminal_p, self.terminal_Y)


def pontryagin_residual(s: SaddleState, model: Optional[Model] = None) -> PontryaginResidual:
    """Weighted L2 norms of both optimality systems, from the stored fields only.

    With ``model`` the player gradient is recomputed from (psi, q, p, k);
    otherwise the gradient stored at the last iterate is used.
    """
    K = s.psi.values.shape[1]
    grid = TimeGrid(K, s.T)
    dt = grid.dt
    qk = s.q.q_values[:, :-1]
    if model is not None:
        G = foc_gradient(model, s.psi, s.q, s.adjoint, grid)
    else:
        G = s.foc if s.foc is not None else np.zeros_like(s.psi.values)
    player = residual_norm(G, dt)
    ys = np.empty_like(s.nc.y_star)
    zs = np.empty_like(s.nc.z_star)
    for k in range(K):
        fy, fz = s.driver.gradient(grid.nodes[k], s.value.Y[:, k], s.value.Z[:, k])
        ys[:, k] = np.clip(fy, -s.driver.alpha, s.driver.alpha)
        zs[:, k] = fz
    mis = (s.nc.y_star - ys) ** 2 + np.einsum("pkd->pk", (s.nc.z_star - zs) ** 2)
    nature = float(math.sqrt((qk * mis).sum(axis=1).mean() * dt))
    target = s.q.terminal[:, None] * s.grad_T
    term_p = float(math.sqrt(np.mean(np.sum((s.adjoint.p[:, -1] - target) ** 2, axis=1))))
    term_y = float(math.sqrt(np.mean((s.value.Y[:, -1] - s.g_T) ** 2)))
    return PontryaginResidual(player, nature, term_p, term_y)


# ---------------------------------------------------------------------------
# constructions used by the verification experiments


def gibbs_maximizer(zeta: ControlField, W: BrownianEnsemble, gamma: float,
                    basis: Optional[RegressionBasis] = None) -> DensityProcess:
    """Density maximising ``E int q |zeta|^2 - gamma S(q)``, as a stochastic exponential.

    Solves ``-dY = (|Z|^2 / (2 gamma) + |zeta|^2) dt - Z dW`` with ``Y_T = 0``
    regressed on the Brownian path itself, and tilts by ``z* = Z / gamma``.
    When zeta is affine in W the value is a quadratic polynomial of W, which
    the default basis represents exactly.
    """
    basis = RegressionBasis() if basis is None else basis
    drv = quadratic_benchmark(gamma)
    Xw = StatePaths(W.paths())
    running = np.einsum("pkn,pkn->pk", zeta.values, zeta.values)
    v = solve_value_bsde(Xw, None, np.zeros(W.n_paths), drv, quadratic_running_cost(), basis, W, running=running)
    nc = nature_control_from_value(drv, v, W.grid)
    return simulate_density(nc, W)


def perturb_nature(q: DensityProcess, direction: np.ndarray, size: float) -> DensityProcess:
    """Multiply the terminal density by ``1 + size * direction`` and rescale to the original mean.

    ``direction`` is a bounded per-path functional. Only the terminal node
    moves, which is all the terminal-form cost of the quadratic driver reads.
    """
    fac = 1.0 + size * np.asarray(direction, float)
    if np.any(fac <= 0):
        raise ValueError("perturbation would make the density non-positive")
    qT = q.terminal
    fac = fac * (qT.mean() / (qT * fac).mean())
    log_q = q.log_q.copy()
    log_q[:, -1] += np.log(fac)
    return DensityProcess(log_q, q.nature_control)


def perturb_player(psi: ControlField, X: StatePaths, coefs: np.ndarray, size: float) -> ControlField:
    """``psi + size * sum_j c_j X_t^j`` step by step: a perturbation in the span of low-order state features."""
    Xl = X.values[:, :-1, :1]
    feats = np.concatenate([np.ones_like(Xl), Xl, Xl ** 2], axis=2)[..., : len(coefs)]
    add = size * np.tensordot(feats, np.asarray(coefs, float), axes=([2], [0]))
    return ControlField(psi.values + add[..., None], "open_loop_table", None, "perturbed")
