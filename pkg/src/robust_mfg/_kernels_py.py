"""Pure numpy implementations of the hot loops.

These are the reference versions; ``_kernels.pyx`` mirrors them one for one.
"""
from __future__ import annotations

import heapq
import math

import numpy as np

INF = math.inf


def fm_dual_1d(x: np.ndarray, w: np.ndarray) -> float:
    """Maximise ``sum(w * phi)`` over ``|phi| <= 1`` with ``|phi_{i+1} - phi_i| <= x_{i+1} - x_i``.

    ``x`` must be sorted ascending. The value function of the left-to-right
    dynamic programme is concave and piecewise linear, so it is carried as
    two heaps of slope breakpoints (left of the argmax and right of it).
    Each breakpoint stores the amount by which the slope drops there.
    Walls at -1 and +1 carry an infinite drop.

    Returns the optimal value, which is exact up to rounding.
    """
    m = x.shape[0]
    if m == 0:
        return 0.0
    # left heap: max-heap on position (stored negated); right heap: min-heap
    left: list = [(1.0, INF)]   # (-pos, drop) for pos=-1
    right: list = [(1.0, INF)]  # (pos, drop) for pos=+1
    off_l = 0.0
    off_r = 0.0
    vmax = 0.0
    for i in range(m):
        if i > 0:
            d = float(x[i] - x[i - 1])
            if d > 0.0:
                off_l -= d
                off_r += d
                heapq.heappush(left, (1.0 + off_l, INF))     # wall at -1
                heapq.heappush(right, (1.0 - off_r, INF))    # wall at +1
        wi = float(w[i])
        if wi > 0.0:
            # argmax moves right
            pos = right[0][0] + off_r
            vmax += wi * pos
            slope = wi
            while True:
                b, s = heapq.heappop(right)
                b += off_r
                if s >= slope:
                    heapq.heappush(left, (-(b - off_l), slope))
                    if s > slope:
                        heapq.heappush(right, (b - off_r, s - slope))
                    break
                heapq.heappush(left, (-(b - off_l), s))
                slope -= s
                nb = right[0][0] + off_r
                vmax += slope * (nb - b)
        elif wi < 0.0:
            pos = -left[0][0] + off_l
            vmax += wi * pos
            slope = -wi
            while True:
                nb_neg, s = heapq.heappop(left)
                b = -nb_neg + off_l
                if s >= slope:
                    heapq.heappush(right, (b - off_r, slope))
                    if s > slope:
                        heapq.heappush(left, (-(b - off_l), s - slope))
                    break
                heapq.heappush(right, (b - off_r, s))
                slope -= s
                nb = -left[0][0] + off_l
                vmax += slope * (b - nb)
    return vmax


def euler_paths(x0, drift_const, b, c, nu, sigma, psi, dw, dt, r_flag):
    """Euler-Maruyama for ``dX = (a + bX + c psi)dt + (nu + r sigma[psi])dW``.

    Shapes: x0 (P, n); drift_const (K, n); b, c (K, n, n); nu (K, n, d);
    sigma (K, n, d, n); psi (P, K, n); dw (P, K, d). Returns (P, K+1, n).
    """
    P, n = x0.shape
    K = dw.shape[1]
    out = np.empty((P, K + 1, n))
    out[:, 0] = x0
    xk = x0.copy()
    for k in range(K):
        pk = psi[:, k]
        drift = drift_const[k] + np.einsum("ij,pj->pi", b[k], xk) + np.einsum("ij,pj->pi", c[k], pk)
        vol = np.broadcast_to(nu[k], (P,) + nu[k].shape)
        if r_flag:
            vol = vol + np.einsum("ijl,pl->pij", sigma[k], pk)
        xk = xk + (drift * dt + np.einsum("pij,pj->pi", vol, dw[:, k]))
        out[:, k + 1] = xk
    return out


def log_density(y_star, z_star, dw, dt):
    """Log-Euler recursion for ln q. Shapes: y_star (P, K); z_star, dw (P, K, d)."""
    P, K = y_star.shape
    out = np.zeros((P, K + 1))
    inc = y_star * dt + np.einsum("pkd,pkd->pk", z_star, dw) - 0.5 * np.einsum("pkd,pkd->pk", z_star, z_star) * dt
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return out
