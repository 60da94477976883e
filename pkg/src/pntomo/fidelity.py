"""Poisson transmission fidelity oracle and limited-memory BFGS curvature.

The fidelity is the I-divergence between measured counts d and the
transmission model g(x) = I0 * exp(-Ax):

    l(x) = sum_j d_j ln(d_j / g_j(x)) - d_j + g_j(x)

evaluated in the rearranged form sum_j d_j (Ax)_j + sum_j g_j(x) + C(d)
whose only x dependence is through Ax, so an overshooting trial point
overflows cleanly to +inf instead of producing NaNs.  Gradient and exact
Hessian action share a single-slot transmission cache keyed on the iterate,
so repeated oracle calls at one point cost one forward projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import SystemMatrix

_CURVATURE_EPS = 1e-10


@dataclass
class OracleCounters:
    """Cumulative oracle work, exposed for convergence traces."""

    value_calls: int = 0
    gradient_calls: int = 0
    hessian_applies: int = 0
    forward_projections: int = 0


class FidelityOracle:
    """Value, gradient, and matrix-free Hessian action of the fidelity.

    The Hessian at x_k is A^T diag(s_k) A with scaling vector
    s_k = g(x_k) (or exp(-A x_k) when hessian_includes_i0 is False);
    s_k is computed once per iterate and reused across all Hessian
    products at that iterate.
    """

    def __init__(self, A: SystemMatrix, d: np.ndarray, i0: float,
                 hessian_includes_i0: bool = True):
        if not i0 > 0:
            raise ValueError(f"i0 must be positive, got {i0}")
        d = np.asarray(d, dtype=np.float64).ravel()
        if d.size != A.geometry.n_rows:
            raise ValueError(
                f"data has {d.size} entries, expected {A.geometry.n_rows}")
        if (d < 0).any():
            raise ValueError("counts must be nonnegative")
        self.A = A
        self.d = d
        self.i0 = float(i0)
        self.hessian_includes_i0 = bool(hessian_includes_i0)
        self.counters = OracleCounters()
        pos = d > 0
        # Iterate-independent part of the I-divergence.
        self._const = float(np.sum(d[pos] * (np.log(d[pos] / i0) - 1.0)))
        self._cache_x: np.ndarray | None = None
        self._cache_ax: np.ndarray | None = None
        self._cache_g: np.ndarray | None = None
        self._scale_x: np.ndarray | None = None
        self._scale: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.A.geometry.n_cols

    def _transmission(self, x: np.ndarray):
        """(Ax, g(x)) through the single-slot cache."""
        flat = np.asarray(x, dtype=np.float64).ravel()
        if self._cache_x is None or not np.array_equal(self._cache_x, flat):
            ax = self.A.forward(flat)
            self.counters.forward_projections += 1
            with np.errstate(over="ignore"):
                g = self.i0 * np.exp(-ax)
            self._cache_x = flat.copy()
            self._cache_ax = ax
            self._cache_g = g
        return self._cache_ax, self._cache_g

    def value(self, x: np.ndarray) -> float:
        self.counters.value_calls += 1
        ax, g = self._transmission(x)
        return float(self.d @ ax + g.sum() + self._const)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        self.counters.gradient_calls += 1
        _, g = self._transmission(x)
        return self.A.adjoint(self.d - g)

    def refresh_scaling(self, x_k: np.ndarray) -> None:
        """Recompute and pin the Hessian scaling vector at iterate x_k."""
        flat = np.asarray(x_k, dtype=np.float64).ravel()
        _, g = self._transmission(flat)
        self._scale = g if self.hessian_includes_i0 else g / self.i0
        self._scale_x = flat.copy()

    def hessian_apply(self, x_k: np.ndarray, v: np.ndarray) -> np.ndarray:
        """A^T diag(s_k) A v; refreshes the scaling if x_k is stale."""
        flat_k = np.asarray(x_k, dtype=np.float64).ravel()
        if self._scale_x is None or not np.array_equal(self._scale_x, flat_k):
            self.refresh_scaling(flat_k)
        self.counters.hessian_applies += 1
        t = self.A.forward(v)
        self.counters.forward_projections += 1
        t *= self._scale
        return self.A.adjoint(t)


def idiv_value(oracle: FidelityOracle, x: np.ndarray) -> float:
    return oracle.value(x)


def idiv_gradient(oracle: FidelityOracle, x: np.ndarray) -> np.ndarray:
    return oracle.gradient(x)


def hessian_apply(oracle: FidelityOracle, x_k: np.ndarray,
                  v: np.ndarray) -> np.ndarray:
    return oracle.hessian_apply(x_k, v)


@dataclass
class LbfgsState:
    """Curvature pairs in compact form for direct Hessian-approximation
    products B v (not inverse products).

    B = theta*I - W M^{-1} W^T with W = [theta*S, Y] and
    M = [[theta*S^T S, L], [L^T, -D]], where L is the strictly lower
    triangle of S^T Y and D its diagonal.  Pair matrices and Gram blocks
    (including Y^T Y, which makes the exact spectral range of B a small
    dense computation) are maintained incrementally so one product costs
    O(n*m).
    """

    capacity: int = 50
    theta0: float = 1.0
    S: np.ndarray | None = None  # columns are steps s_i, oldest first
    Y: np.ndarray | None = None  # columns are gradient changes y_i
    sty: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    sts: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    yty: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    rejected: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {self.capacity}")
        if not self.theta0 > 0:
            raise ValueError(f"theta0 must be positive, got {self.theta0}")

    @property
    def n_pairs(self) -> int:
        return 0 if self.S is None else self.S.shape[1]

    @property
    def theta(self) -> float:
        """Base scaling y'y/s'y of the newest pair, theta0 when empty."""
        if self.n_pairs == 0:
            return self.theta0
        s, y = self.S[:, -1], self.Y[:, -1]
        return float((y @ y) / (s @ y))


def lbfgs_update(state: LbfgsState, s: np.ndarray,
                 y: np.ndarray) -> LbfgsState:
    """Return a state with (s, y) appended if it passes the curvature
    guard s'y > eps*|s||y|; otherwise return the input state unchanged.
    The oldest pair is evicted beyond capacity."""
    s = np.asarray(s, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if s.shape != y.shape:
        raise ValueError("s and y must have the same dimension")
    sy = float(s @ y)
    if not sy > _CURVATURE_EPS * np.linalg.norm(s) * np.linalg.norm(y):
        state.rejected += 1
        return state

    m = state.n_pairs
    sty = np.zeros((m + 1, m + 1))
    sts = np.zeros((m + 1, m + 1))
    yty = np.zeros((m + 1, m + 1))
    if m:
        sty[:m, :m] = state.sty
        sts[:m, :m] = state.sts
        yty[:m, :m] = state.yty
        sty[:m, m] = state.S.T @ y
        sty[m, :m] = state.Y.T @ s
        sts[:m, m] = sts[m, :m] = state.S.T @ s
        yty[:m, m] = yty[m, :m] = state.Y.T @ y
        S = np.column_stack([state.S, s])
        Y = np.column_stack([state.Y, y])
    else:
        S = s[:, None].copy()
        Y = y[:, None].copy()
    sty[m, m] = sy
    sts[m, m] = s @ s
    yty[m, m] = y @ y
    if S.shape[1] > state.capacity:
        S = S[:, 1:]
        Y = Y[:, 1:]
        sty = sty[1:, 1:]
        sts = sts[1:, 1:]
        yty = yty[1:, 1:]
    return LbfgsState(capacity=state.capacity, theta0=state.theta0,
                      S=S, Y=Y, sty=sty, sts=sts, yty=yty,
                      rejected=state.rejected)


def lbfgs_apply(state: LbfgsState, v: np.ndarray) -> np.ndarray:
    """Product of the compact-form approximation B with v."""
    v = np.asarray(v, dtype=np.float64).ravel()
    m = state.n_pairs
    if m == 0:
        return state.theta0 * v
    theta = state.theta
    low = np.tril(state.sty, -1)
    diag = np.diag(np.diag(state.sty))
    M = np.block([[theta * state.sts, low], [low.T, -diag]])
    w = np.concatenate([theta * (state.S.T @ v), state.Y.T @ v])
    z = np.linalg.solve(M, w)
    return theta * v - (theta * (state.S @ z[:m]) + state.Y @ z[m:])


def lbfgs_max_eigenvalue(state: LbfgsState) -> float:
    """Exact largest eigenvalue of the compact-form approximation B.

    B = theta*I - W M^{-1} W^T acts as theta*I off range(W), so its
    spectrum is theta together with theta - mu over the eigenvalues mu
    of W M^{-1} W^T restricted to range(W).  Those mu are recovered from
    the 2m-by-2m Gram matrix G = W^T W: factoring G = R^T R makes them
    the eigenvalues of the small symmetric matrix R M^{-1} R^T, so the
    whole computation stays O(m^3) and never touches an n-vector.  An
    iterative estimate can sit below the true value when the top of the
    spectrum clusters, and the inner solver's fixed step 1/L must not
    overshoot, so exactness matters here.
    """
    m = state.n_pairs
    if m == 0:
        return state.theta0
    theta = state.theta
    low = np.tril(state.sty, -1)
    diag = np.diag(np.diag(state.sty))
    M = np.block([[theta * state.sts, low], [low.T, -diag]])
    G = np.block([[theta * theta * state.sts, theta * state.sty],
                  [theta * state.sty.T, state.yty]])
    G = 0.5 * (G + G.T)
    w, V = np.linalg.eigh(G)
    keep = w > max(float(w[-1]), 0.0) * 1e-12
    if not np.any(keep):
        return theta
    R = (V[:, keep] * np.sqrt(w[keep])).T
    T = R @ np.linalg.solve(M, R.T)
    T = 0.5 * (T + T.T)
    mu = np.linalg.eigvalsh(T)
    return theta - min(float(mu[0]), 0.0)
