"""nu-one-class SVM with an RBF kernel, solved by SMO.

Dual problem (Schoelkopf et al.)::

    min_a  0.5 * a^T K a    s.t.  0 <= a_i <= 1 / (nu * n),  sum(a) = 1

Decision function ``f(x) = sum_i a_i k(x_i, x) - rho``; ``f < 0`` is an outlier.
Working-set selection follows the second-order rule of Fan, Chen & Lin (2005).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TrainingError, UsageError

TAU = 1e-12


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def default_gamma(x: np.ndarray, factor: float = 1.0) -> float:
    """``1 / (factor * mean pairwise squared distance)`` over distinct pairs."""
    n = len(x)
    sq = (x * x).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    mean = d2.sum() / (n * (n - 1))
    return 1.0 / (factor * mean) if mean > 0 else 1.0


@dataclass
class OcSvmModel:
    support_vectors: np.ndarray
    alpha: np.ndarray
    rho: float
    gamma: float
    nu: float
    kkt_residual: float = 0.0
    iterations: int = 0

    def decision(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.support_vectors.shape[1]:
            raise UsageError(f"expected {self.support_vectors.shape[1]}-dim inputs, got {x.shape[1]}")
        return rbf_kernel(x, self.support_vectors, self.gamma) @ self.alpha - self.rho

    def score(self, x) -> np.ndarray:
        """Anomaly score, higher means more anomalous."""
        return -self.decision(x)

    def predict_anomalous(self, x) -> np.ndarray:
        return self.decision(x) < 0


def solve_dual(K: np.ndarray, nu: float, tol: float = 1e-6, max_iter: int = 1_000_000):
    """SMO on the dual; returns ``(alpha, rho, kkt_residual, iterations)``."""
    n = len(K)
    C = 1.0 / (nu * n)
    alpha = np.zeros(n)
    # feasible start: fill the first floor(nu * n) coordinates to the bound
    full = min(int(np.floor(nu * n)), n)
    alpha[:full] = C
    if full < n:
        alpha[full] = 1.0 - full * C
    G = K @ alpha
    diag = np.diag(K).copy()

    it = 0
    gap = np.inf
    while it < max_iter:
        up = alpha < C   # can grow
        low = alpha > 0  # can shrink
        neg_g = -G
        grow = np.where(up, neg_g, -np.inf)
        i = int(np.argmax(grow))
        m = grow[i]
        M = np.min(np.where(low, neg_g, np.inf))
        # no movable pair (e.g. nu = 1 pins every alpha at the bound) means optimal
        gap = m - M if np.isfinite(m) and np.isfinite(M) else 0.0
        if gap < tol:
            break
        # second-order choice of j among shrinkable coordinates that violate with i
        b = m - neg_g
        a = diag[i] + diag - 2.0 * K[i]
        a = np.where(a > 0, a, TAU)
        cand = low & (b > 0)
        obj = np.where(cand, -(b * b) / a, np.inf)
        j = int(np.argmin(obj))
        if not np.isfinite(obj[j]):
            break
        step = b[j] / a[j]
        step = min(step, C - alpha[i], alpha[j])
        alpha[i] += step
        alpha[j] -= step
        G += step * (K[:, i] - K[:, j])
        it += 1
    else:
        raise TrainingError(f"SMO did not converge in {max_iter} iterations (KKT residual {gap:.3g})")

    np.clip(alpha, 0.0, C, out=alpha)
    free = (alpha > 1e-12) & (alpha < C - 1e-12)
    if free.any():
        rho = float(G[free].mean())
    else:
        # rho in [max G over bounded, min G over zero]: take the midpoint
        at_c = alpha >= C - 1e-12
        lo = G[at_c].max() if at_c.any() else -np.inf
        hi = G[~at_c].min() if (~at_c).any() else np.inf
        rho = float((lo + hi) / 2) if np.isfinite(lo) and np.isfinite(hi) else float(lo if np.isfinite(lo) else hi)
    return alpha, rho, float(max(gap, 0.0)), it


def train_ocsvm(x: np.ndarray, nu: float = 0.05, gamma: float | None = None,
                tol: float = 1e-6, max_iter: int = 1_000_000) -> OcSvmModel:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < 10:
        raise UsageError(f"need at least 10 training vectors, got shape {x.shape}")
    if not 0 < nu <= 1:
        raise UsageError(f"nu must lie in (0, 1], got {nu}")
    gamma = default_gamma(x) if gamma is None else float(gamma)
    if not gamma > 0:
        raise UsageError(f"gamma must be > 0, got {gamma}")
    K = rbf_kernel(x, x, gamma)
    alpha, rho, resid, it = solve_dual(K, nu, tol, max_iter)
    keep = alpha > 0
    return OcSvmModel(x[keep].copy(), alpha[keep].copy(), rho, gamma, nu, resid, it)
