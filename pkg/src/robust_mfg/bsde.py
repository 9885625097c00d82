"""Least-squares Monte Carlo solvers for the value BSDE and the linear adjoint BSDE."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import DriverSpec, ModelCoefficients, RunningCostSpec, fundamental_matrix
from .simulate import BrownianEnsemble, ControlField, DensityProcess, NatureControl, StatePaths

RIDGE = 1e-8
PICARD_TOL = 1e-6
PICARD_CAP = 50
_DEGENERATE = 1e-12


class RegressionError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class RegressionBasis:
    """Global polynomial (total degree) or piecewise-constant bins on the first state coordinate.

    With ``include_q`` the adjoint regressions also use ``q_t * poly(X_t)``.
    """

    kind: str = "polynomial"
    degree: int = 3
    bins: int = 32
    include_q: bool = True

    def __post_init__(self):
        if self.kind not in ("polynomial", "local_bins"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0 or self.bins < 1:
            raise ValueError("degree >= 0 and bins >= 1 required")

    def features(self, x: np.ndarray, q: Optional[np.ndarray] = None) -> np.ndarray:
        x = np.asarray(x, float)
        if x.ndim == 1:
            x = x[:, None]
        P = x.shape[0]
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        live = std > _DEGENERATE * (1.0 + np.abs(mean))
        z = (x[:, live] - mean[live]) / std[live]
        if self.kind == "polynomial":
            cols = [np.ones(P)]
            m = z.shape[1]
            for deg in range(1, self.degree + 1):
                for combo in itertools.combinations_with_replacement(range(m), deg):
                    c = np.ones(P)
                    for j in combo:
                        c = c * z[:, j]
                    cols.append(c)
            F = np.stack(cols, axis=1)
        else:
            if z.shape[1] == 0:
                F = np.ones((P, 1))
            else:
                edges = np.quantile(z[:, 0], np.linspace(0, 1, self.bins + 1)[1:-1])
                idx = np.searchsorted(edges, z[:, 0], side="right")
                F = np.zeros((P, self.bins))
                F[np.arange(P), idx] = 1.0
                F = F[:, F.any(axis=0)]
        if q is not None and self.include_q:
            q = np.asarray(q, float)
            qs = q.std()
            if qs > _DEGENERATE * (1.0 + abs(q.mean())):
                F = np.concatenate([F, F * (q / q.mean())[:, None]], axis=1)
        return F


class Projector:
    """Ridge least squares on a fixed design ``F``; the Gram matrix is factored once.

    Constant columns stay unpenalised, so constants are reproduced exactly.
    """

    def __init__(self, F: np.ndarray, ridge: float = RIDGE):
        from scipy.linalg import cho_factor

        self.F = F
        P, m = F.shape
        G = (F.T @ F) / P
        if not np.all(np.isfinite(G)):
            raise RegressionError("non-finite design matrix")
        self.scale = np.sqrt(np.maximum(np.diag(G), _DEGENERATE))
        first = F[0]
        constant = np.array([F[0, j] == F[-1, j] and np.all(F[:, j] == first[j]) for j in range(m)])
        Gs = G / np.outer(self.scale, self.scale) + ridge * np.diag((~constant).astype(float))
        try:
            self._cho = cho_factor(Gs)
        except np.linalg.LinAlgError as exc:
            raise RegressionError(f"regression Gram matrix not positive definite: {exc}") from exc

    def fit(self, target: np.ndarray):
        """Fitted values and coefficients for ``target`` of shape (P,) or (P, ...)."""
        from scipy.linalg import cho_solve

        P = self.F.shape[0]
        t2 = target.reshape(P, -1)
        rhs = (self.F.T @ t2) / P / self.scale[:, None]
        coef = cho_solve(self._cho, rhs) / self.scale[:, None]
        fitted = self.F @ coef
        return fitted.reshape(target.shape), coef.reshape((self.F.shape[1],) + target.shape[1:])


def project(F: np.ndarray, target: np.ndarray, ridge: float = RIDGE):
    """One-off ridge regression of ``target`` on ``F``; returns (fitted, coef)."""
    return Projector(F, ridge).fit(target)


@dataclass(frozen=True)
class ValueSolution:
    Y: np.ndarray  # [path, step+1]
    Z: np.ndarray  # [path, step, d]
    residual_history: tuple
    converged: bool = True
    coefficients: Optional[list] = field(default=None, repr=False)

    @property
    def Y0(self) -> float:
        return float(self.Y[:, 0].mean())

    def dump_coefficients(self, path) -> None:
        if self.coefficients is None:
            raise ValueError("solve with keep_coefficients=True to dump regression coefficients")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"steps": self.coefficients}, fh, sort_keys=True)


@dataclass(frozen=True)
class AdjointSolution:
    p: np.ndarray  # [path, step+1, n]
    k: Optional[np.ndarray]  # [path, step, n, d], None when not needed (r = 0)


def solve_value_bsde(X: StatePaths, psi: ControlField, terminal: np.ndarray, driver: DriverSpec,
                     ell: RunningCostSpec, basis: RegressionBasis, W: BrownianEnsemble,
                     picard_iters: int = PICARD_CAP, tol: float = PICARD_TOL,
                     running: Optional[np.ndarray] = None, keep_coefficients: bool = False) -> ValueSolution:
    """Backward LSMC for ``-dY = (f(t, Y, Z) + ell(t, psi)) dt - Z dW``.

    Multi-step form: with ``R_{k+1} = Y_T + sum_{j>k} ((f_j + ell_j) dt - Z_j dW_j)``
    the step regresses ``R_{k+1} dW_k / dt`` and ``R_{k+1} - Z_k dW_k`` on
    time-k features, then solves ``Y_k = E_k[R_{k+1}] + (f(Y_k, Z_k) + ell_k) dt``
    by Picard iteration. Regressing the path-wise remainder instead of the
    fitted ``Y_{k+1}`` stops the per-step regression noise from piling up.
    ``running`` overrides the per-(path, step) ``ell`` values.
    """
    if picard_iters < 1:
        raise ValueError("picard_iters must be >= 1")
    terminal = np.asarray(terminal, float)
    if not np.all(np.isfinite(terminal)):
        raise ValueError("terminal values must be finite")
    grid = W.grid
    P, K, d = W.n_paths, grid.n_steps, W.d
    dt = grid.dt
    if running is None:
        running = ell.ell(0.0, psi.values) if psi is not None else np.zeros((P, K))
    running = np.broadcast_to(np.asarray(running, float), (P, K))
    Y = np.empty((P, K + 1))
    Z = np.empty((P, K, d))
    Y[:, K] = terminal
    R = terminal.copy()
    hist = np.zeros(picard_iters)
    used = 0
    ok = True
    coefs = [] if keep_coefficients else None
    dW = W.increments
    for k in range(K - 1, -1, -1):
        F = basis.features(X.values[:, k])
        proj = Projector(F)
        ey, coef_y = proj.fit(R)
        # centring the Z target removes the in-sample correlation with dW_k
        zfit, coef_z = proj.fit((R - ey)[:, None] * dW[:, k] / dt)
        Z[:, k] = zfit
        # Z_k dW_k has conditional mean zero; subtracting it is a control variate
        ey, coef_y = proj.fit(R - np.einsum("pd,pd->p", zfit, dW[:, k]))
        t = grid.nodes[k]
        y = ey.copy()
        converged_k = False
        for it in range(picard_iters):
            fy = driver.f(t, y, Z[:, k])
            y_new = ey + (fy + running[:, k]) * dt
            delta = float(np.max(np.abs(y_new - y)))
            hist[it] = max(hist[it], delta)
            used = max(used, it + 1)
            y = y_new
            if delta < tol:
                converged_k = True
                break
        ok = ok and converged_k
        Y[:, k] = y
        R = R + (driver.f(t, y, Z[:, k]) + running[:, k]) * dt - np.einsum("pd,pd->p", Z[:, k], dW[:, k])
        if coefs is not None:
            coefs.append({"step": k, "y": coef_y.tolist(), "z": coef_z.tolist()})
    if coefs is not None:
        coefs.reverse()
    return ValueSolution(Y, Z, tuple(float(h) for h in hist[:used]), ok, coefs)


def solve_adjoint_bsde(X: StatePaths, q: DensityProcess, coeffs: ModelCoefficients, terminal_grad: np.ndarray,
                       basis: RegressionBasis, W: BrownianEnsemble, need_k: Optional[bool] = None,
                       gamma_matrix=None) -> AdjointSolution:
    """Linear adjoint ``-dp = b^T p dt - k dW`` with ``p_T = terminal_grad``.

    ``Gamma_t^T p_t`` is a martingale, so every node is one regression of
    ``Gamma_T^T p_T`` on time-t features followed by ``Gamma_t^{-T}``; no
    error accumulates across steps.
    """
    grid = W.grid
    P, K, d, n = W.n_paths, grid.n_steps, W.d, coeffs.n
    tg = np.asarray(terminal_grad, float).reshape(P, n)
    G = fundamental_matrix(coeffs, grid) if gamma_matrix is None else gamma_matrix
    M = np.einsum("ji,pj->pi", G.values[K], tg)  # Gamma_T^T p_T
    if need_k is None:
        need_k = bool(coeffs.r_flag)
    p = np.empty((P, K + 1, n))
    p[:, K] = tg
    kk = np.empty((P, K, n, d)) if need_k else None
    qv = q.q_values
    dW = W.increments
    for k in range(K - 1, -1, -1):
        F = basis.features(X.values[:, k], qv[:, k])
        proj = Projector(F)
        fit, _ = proj.fit(M)
        inv_t = G.inverse[k].T
        p[:, k] = np.einsum("ij,pj->pi", inv_t, fit)
        if need_k:
            # centring removes the part of the target uncorrelated with dW_k
            kfit, _ = proj.fit(((M - fit)[:, :, None] * dW[:, k, None, :]).reshape(P, n * d) / grid.dt)
            kk[:, k] = np.einsum("ij,pjd->pid", inv_t, kfit.reshape(P, n, d))
    return AdjointSolution(p, kk)


def nature_control_from_value(driver: DriverSpec, v: ValueSolution, grid=None) -> NatureControl:
    """``(y*, z*) = (d_y f, grad_z f)(Y, Z)`` on the left nodes; ``|y*| <= alpha`` by clipping."""
    P, K1 = v.Y.shape
    K = K1 - 1
    d = v.Z.shape[2]
    ys = np.empty((P, K))
    zs = np.empty((P, K, d))
    for k in range(K):
        t = 0.0 if grid is None else float(grid.nodes[k])
        fy, fz = driver.gradient(t, v.Y[:, k], v.Z[:, k])
        ys[:, k] = fy
        zs[:, k] = fz
    over = np.abs(ys) > driver.alpha
    clipped = int(over.sum())
    if clipped:
        ys = np.clip(ys, -driver.alpha, driver.alpha)
    return NatureControl(ys, zs, alpha=driver.alpha, clip_count=clipped)
