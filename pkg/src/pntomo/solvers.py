"""Composite-objective solvers: FISTA and an inexact proximal Newton method.

The proximal Newton outer loop builds a quadratic model of the smooth term
around each iterate, minimizes model + h inexactly with an inner FISTA
whose step comes from a power-method bound on the curvature, backtracks a
line search on the true objective, and optionally stops the inner solve
early with an adaptive forcing-term rule tied to the outer prox-gradient
residual.  No smooth-oracle (data fidelity) calls happen inside the inner
loop; each inner iteration costs exactly one curvature product because the
product at the momentum point is a linear combination of stored products.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .fidelity import (FidelityOracle, LbfgsState, lbfgs_apply,
                       lbfgs_max_eigenvalue, lbfgs_update)

CSV_HEADER = ("iter,f,l,h,step,inner_iters,eta,residual,"
              "grad_evals,hess_applies,seconds")

_TINY = 1e-30


@dataclass(frozen=True)
class SolverConfig:
    """Outer/inner tolerances and line-search parameters.

    fista_l0 is the initial smoothness estimate for the FISTA baseline's
    backtracking; fista_shrink < 1 relaxes it between iterations so the
    step length can track local curvature (1.0 disables the relaxation).
    """

    tol_f: float = 1e-4
    tol_x: float = 1e-5
    max_outer: int = 500
    inner_rel_tol: float = 1e-8
    max_inner: int = 500
    adaptive_stop: bool = True
    ls_a: float = 0.5
    ls_shrink: float = 0.7
    ls_min_step: float = 1e-8
    fista_l0: float = 1.0
    fista_shrink: float = 0.9
    residual_prox_scale: float = 1.0
    record_inner: bool = False

    def __post_init__(self):
        if not (self.tol_f > 0 and self.tol_x > 0 and self.inner_rel_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration caps must be >= 1")
        if not 0.0 < self.ls_a <= 0.5:
            raise ValueError(f"ls_a must be in (0, 0.5], got {self.ls_a}")
        if not 0.0 < self.ls_shrink < 1.0:
            raise ValueError(f"ls_shrink must be in (0,1), got {self.ls_shrink}")
        if not self.ls_min_step > 0:
            raise ValueError("ls_min_step must be positive")
        if not self.fista_l0 > 0:
            raise ValueError("fista_l0 must be positive")
        if not 0.0 < self.fista_shrink <= 1.0:
            raise ValueError("fista_shrink must be in (0, 1]")
        if not self.residual_prox_scale > 0:
            raise ValueError("residual_prox_scale must be positive")


class CompositeProblem:
    """f = l + h with counted smooth oracles and a pluggable prox.

    smooth_value/smooth_gradient evaluate the smooth term l; h_value and
    prox define the non-smooth term, where prox(z, scale) solves
    argmin_u 0.5*||u-z||^2 + scale*h(u).  curvature supplies quadratic-
    model products for the proximal Newton solver (unused by FISTA).
    """

    def __init__(self, smooth_value, smooth_gradient, h_value, prox, n,
                 curvature=None, prox_unit_gap=None):
        self._smooth_value = smooth_value
        self._smooth_gradient = smooth_gradient
        self._h_value = h_value
        self._prox = prox
        self.n = int(n)
        self.curvature = curvature
        # Upper bound on ||z - prox(z, 1.0)|| over all z, when one is
        # known for the regularizer.  Lets solvers rule a residual test
        # in or out from the gradient norm alone.
        self.prox_unit_gap = (None if prox_unit_gap is None
                              else float(prox_unit_gap))
        self.value_calls = 0
        self.gradient_calls = 0

    def smooth(self, x: np.ndarray) -> float:
        self.value_calls += 1
        return float(self._smooth_value(x))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        self.gradient_calls += 1
        return np.asarray(self._smooth_gradient(x), dtype=np.float64)

    def h(self, x: np.ndarray) -> float:
        return float(self._h_value(x))

    def prox(self, z: np.ndarray, scale: float) -> np.ndarray:
        return np.asarray(self._prox(z, scale), dtype=np.float64)

    def objective(self, x: np.ndarray) -> float:
        return self.smooth(x) + self.h(x)


def _power_estimate(apply_fn, n, warm=None, n_iter=20, rtol=1e-2):
    """Largest-eigenvalue estimate of a symmetric PSD operator.

    Returns (estimate, final vector) so callers can warm-start the next
    call; the estimate is 0.0 for the zero operator.
    """
    if warm is not None and warm.shape == (n,) and np.linalg.norm(warm) > 0:
        v = warm / np.linalg.norm(warm)
    else:
        v = np.ones(n) / np.sqrt(n)
    lam = 0.0
    for _ in range(n_iter):
        w = apply_fn(v)
        lam_new = float(v @ w)
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0:
            return 0.0, v
        v = w / norm_w
        if lam > 0 and abs(lam_new - lam) <= rtol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    return max(lam, 0.0), v


class ExactCurvature:
    """Exact fidelity Hessian action at the pinned outer iterate."""

    name = "exact"

    def __init__(self, oracle: FidelityOracle):
        self.oracle = oracle
        self._x = None
        self._warm = None

    @property
    def applies(self) -> int:
        return self.oracle.counters.hessian_applies

    def refresh(self, x: np.ndarray) -> None:
        self._x = np.asarray(x, dtype=np.float64).ravel().copy()
        self.oracle.refresh_scaling(self._x)

    def update(self, s: np.ndarray, y: np.ndarray) -> None:
        pass  # exact curvature needs no pair history

    def apply(self, v: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("refresh() must run before apply()")
        return self.oracle.hessian_apply(self._x, v)

    def spectral_bound(self) -> float:
        lam, self._warm = _power_estimate(self.apply, self._x.size,
                                          warm=self._warm)
        return 1.05 * lam if lam > 0 else 1.0


class LbfgsCurvature:
    """Limited-memory BFGS approximation fed by accepted outer steps."""

    name = "lbfgs"

    def __init__(self, capacity: int = 50, theta0: float = 1.0):
        self.state = LbfgsState(capacity=capacity, theta0=theta0)
        self.applies = 0
        self._warm = None

    def refresh(self, x: np.ndarray) -> None:
        pass  # the approximation is iterate-independent between updates

    def update(self, s: np.ndarray, y: np.ndarray) -> None:
        self.state = lbfgs_update(self.state, s, y)

    def apply(self, v: np.ndarray) -> np.ndarray:
        self.applies += 1
        return lbfgs_apply(self.state, v)

    def spectral_bound(self) -> float:
        if self.state.n_pairs == 0:
            return self.state.theta0
        try:
            lam = lbfgs_max_eigenvalue(self.state)
        except np.linalg.LinAlgError:
            n = self.state.S.shape[0]
            lam, self._warm = _power_estimate(self.apply, n, warm=self._warm)
        return 1.05 * lam if lam > 0 else 1.0


@dataclass
class ConvergenceTrace:
    """Per-outer-iteration history of a solve.

    Row 0 records the initial point.  ``residual`` is the unit-scale
    prox-gradient norm ||x - P^h(x - grad l(x))|| for the proximal Newton
    solver; for FISTA it is the gradient-mapping norm L*||y - x_next|| at
    the momentum point, which vanishes at the same fixed points.  The
    ``seconds`` column is wall-clock time since the solve started.
    """

    solver: str
    status: str = "running"
    f: list = field(default_factory=list)
    l: list = field(default_factory=list)
    h: list = field(default_factory=list)
    step: list = field(default_factory=list)
    inner_iters: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    grad_evals: list = field(default_factory=list)
    hess_applies: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    inner_objectives: list = field(default_factory=list)

    def add_row(self, f, l, h, step, inner_iters, eta, residual,
                grad_evals, hess_applies, seconds) -> None:
        self.f.append(float(f))
        self.l.append(float(l))
        self.h.append(float(h))
        self.step.append(float(step))
        self.inner_iters.append(int(inner_iters))
        self.eta.append(float(eta))
        self.residual.append(float(residual))
        self.grad_evals.append(int(grad_evals))
        self.hess_applies.append(int(hess_applies))
        self.seconds.append(float(seconds))

    @property
    def n_rows(self) -> int:
        return len(self.f)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(CSV_HEADER + "\n")
            for i in range(self.n_rows):
                fh.write(f"{i},{self.f[i]:.17g},{self.l[i]:.17g},"
                         f"{self.h[i]:.17g},{self.step[i]:.17g},"
                         f"{self.inner_iters[i]},{self.eta[i]:.17g},"
                         f"{self.residual[i]:.17g},{self.grad_evals[i]},"
                         f"{self.hess_applies[i]},{self.seconds[i]:.6f}\n")


def prox_gradient_residual(x: np.ndarray, grad: np.ndarray, prox) -> float:
    """||x - prox(x - grad)|| with the prox taken at unit scale."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(np.linalg.norm(x - np.asarray(prox(x - grad)).ravel()))


def forcing_term(prox_true: np.ndarray, prox_model: np.ndarray,
                 prev_residual: float | None) -> float:
    """Adaptive inner tolerance in (0, 0.1].

    min{0.1, ||P(x - grad l(x)) - P(x - model grad)|| / previous residual};
    a missing previous residual (first iteration), a vanishing denominator,
    or an exactly-zero numerator all fall back to the 0.1 cap.
    """
    if prev_residual is None or prev_residual < 1e-15:
        return 0.1
    num = float(np.linalg.norm(np.asarray(prox_true) - np.asarray(prox_model)))
    if num == 0.0:
        return 0.1
    return min(0.1, num / prev_residual)


def line_search(smooth, h_value, x, d, f_x, delta, cfg: SolverConfig):
    """Backtrack t over {1, shrink, shrink^2, ...} >= ls_min_step until

        f(x + t d) <= f(x) + ls_a * t * delta.

    Returns (t, l_new, h_new, status, trials); status is 'ok',
    'nondescent' (delta >= 0, no trials), or 'exhausted'.
    """
    if not delta < 0:
        return 0.0, np.nan, np.nan, "nondescent", 0
    t = 1.0
    trials = 0
    while t >= cfg.ls_min_step:
        trials += 1
        xt = x + t * d
        l_t = smooth(xt)
        h_t = h_value(xt)
        if l_t + h_t <= f_x + cfg.ls_a * t * delta:
            return t, l_t, h_t, "ok", trials
        t *= cfg.ls_shrink
    return 0.0, np.nan, np.nan, "exhausted", trials


@dataclass
class InnerTrace:
    """Result of one subproblem solve.

    model_residual is the model prox-gradient residual at the stopping
    iterate, or a certified upper bound on it when the adaptive test was
    settled from the gradient norm alone.
    """

    iterations: int
    stop: str  # 'adaptive', 'fixed', or 'max_inner'
    hd_final: np.ndarray
    model_residual: float
    objectives: list | None = None


def solve_subproblem(gradient: np.ndarray, curvature, x_k: np.ndarray,
                     problem: CompositeProblem, cfg: SolverConfig,
                     target: float | None = None,
                     smooth_at_xk: float = 0.0) -> tuple[np.ndarray, InnerTrace]:
    """Minimize the local model  g'd + 0.5 d'Hd + h(x_k + d)  over d.

    FISTA in the variable y = x_k + d with fixed step 1/L from the
    curvature's spectral bound.  Stops when the model prox-gradient
    residual drops to ``target`` (adaptive rule; skipped when None), when
    the iterate's relative change falls below cfg.inner_rel_tol, or at
    cfg.max_inner.  Makes no smooth-oracle calls; one curvature product
    per iteration (momentum-point products are linear combinations).
    """
    L = curvature.spectral_bound()
    gap = problem.prox_unit_gap
    if gap is not None:
        gap *= cfg.residual_prox_scale
    if not L > 0:
        L = 1.0
    step = 1.0 / L
    n = x_k.size
    d_prev = np.zeros(n)
    hd_prev = np.zeros(n)
    d_cur = np.zeros(n)
    hd_cur = np.zeros(n)
    t_m = 1.0
    stop = "max_inner"
    iters = 0
    model_res = np.inf
    objectives = [] if cfg.record_inner else None
    for i in range(cfg.max_inner):
        if i == 0:
            beta = 0.0
        else:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_m * t_m))
            beta = (t_m - 1.0) / t_next
            t_m = t_next
        w_minus_x = (1.0 + beta) * d_cur - beta * d_prev
        hw = (1.0 + beta) * hd_cur - beta * hd_prev
        grad_w = gradient + hw
        y_next = problem.prox(x_k + w_minus_x - step * grad_w, step)
        d_next = y_next - x_k
        hd_next = curvature.apply(d_next)
        iters = i + 1
        if objectives is not None:
            objectives.append(smooth_at_xk + float(gradient @ d_next)
                              + 0.5 * float(d_next @ hd_next)
                              + problem.h(y_next))
        dy = float(np.linalg.norm(d_next - d_cur))
        base = float(np.linalg.norm(x_k + d_cur))
        d_prev, hd_prev = d_cur, hd_cur
        d_cur, hd_cur = d_next, hd_next
        if target is not None:
            model_grad = gradient + hd_next
            # The prox moves no point farther than ``gap``, so the
            # residual sits in [||model_grad|| - gap, ||model_grad|| + gap]
            # and either bracket side can settle the test without the
            # (comparatively expensive) prox evaluation.
            grad_floor = float(np.linalg.norm(model_grad))
            if gap is not None and grad_floor + gap <= target:
                model_res = grad_floor + gap
                stop = "adaptive"
                break
            if gap is None or grad_floor - gap <= target:
                model_res = prox_gradient_residual(
                    y_next, model_grad,
                    lambda z: problem.prox(z, cfg.residual_prox_scale))
                if model_res <= target:
                    stop = "adaptive"
                    break
        if dy <= cfg.inner_rel_tol * max(base, _TINY):
            stop = "fixed"
            break
    return d_cur, InnerTrace(iterations=iters, stop=stop, hd_final=hd_cur,
                             model_residual=model_res, objectives=objectives)


def pn_solve(problem: CompositeProblem, x0: np.ndarray,
             cfg: SolverConfig | None = None):
    """Inexact proximal Newton method; returns (solution, trace).

    Per outer iteration: refresh curvature at x_k, pick the forcing term
    from the previous model's gradient discrepancy, solve the subproblem
    inexactly, backtrack the composite objective along the direction, and
    accept.  The objective sequence is non-increasing by the line-search
    condition.  Statuses: converged_f, converged_x, stationary, max_outer,
    linesearch_failed, diverged.
    """
    cfg = cfg or SolverConfig()
    curvature = problem.curvature
    if curvature is None:
        raise ValueError("pn_solve needs a curvature oracle on the problem")
    x = np.asarray(x0, dtype=np.float64).ravel().copy()
    trace = ConvergenceTrace(solver=f"pn-{curvature.name}")
    t0 = time.perf_counter()
    unit_prox = lambda z: problem.prox(z, cfg.residual_prox_scale)

    l_x = problem.smooth(x)
    h_x = problem.h(x)
    f_x = l_x + h_x
    if not np.isfinite(f_x):
        trace.status = "diverged"
        trace.add_row(f_x, l_x, h_x, 0.0, 0, 0.0, np.inf,
                      problem.gradient_calls, curvature.applies,
                      time.perf_counter() - t0)
        return x, trace
    g = problem.gradient(x)
    prox_pt = unit_prox(x - g)
    r = float(np.linalg.norm(x - prox_pt))
    trace.add_row(f_x, l_x, h_x, 0.0, 0, 0.0, r, problem.gradient_calls,
                  curvature.applies, time.perf_counter() - t0)

    model_grad_at_x = None  # previous model's gradient at the current x
    r_prev = None
    gap_res = problem.prox_unit_gap
    if gap_res is not None:
        gap_res *= cfg.residual_prox_scale
    status = "max_outer"
    for _ in range(cfg.max_outer):
        curvature.refresh(x)
        if model_grad_at_x is None or r_prev < 1e-15:
            eta = 0.1
        elif (gap_res is not None
              and float(np.linalg.norm(g - model_grad_at_x)) - 2.0 * gap_res
              >= 0.1 * r_prev):
            # The two prox points differ from their arguments by at most
            # gap_res each, so the forcing ratio provably reaches the 0.1
            # cap and neither prox needs to be evaluated.
            eta = 0.1
        else:
            eta = forcing_term(prox_pt, unit_prox(x - model_grad_at_x), r_prev)
        target = eta * r if cfg.adaptive_stop else None
        d, inner = solve_subproblem(g, curvature, x, problem, cfg,
                                    target=target, smooth_at_xk=l_x)
        if cfg.record_inner:
            trace.inner_objectives.append(inner.objectives)
        if np.linalg.norm(d) <= 1e-15 * (1.0 + np.linalg.norm(x)):
            status = "stationary"
            break
        delta = float(g @ d) + problem.h(x + d) - h_x
        if delta >= 0.0:
            status = "stationary"
            break
        t, l_new, h_new, ls_status, _ = line_search(
            problem.smooth, problem.h, x, d, f_x, delta, cfg)
        if ls_status != "ok":
            status = "linesearch_failed"
            break
        x_new = x + t * d
        s = x_new - x
        g_new = problem.gradient(x_new)
        curvature.update(s, g_new - g)
        model_grad_at_x = g + t * inner.hd_final
        r_prev = r
        prox_pt = unit_prox(x_new - g_new)
        r = float(np.linalg.norm(x_new - prox_pt))
        f_new = l_new + h_new
        trace.add_row(f_new, l_new, h_new, t, inner.iterations, eta, r,
                      problem.gradient_calls, curvature.applies,
                      time.perf_counter() - t0)
        rel_f = abs(f_new - f_x) / max(abs(f_x), _TINY)
        rel_x = np.linalg.norm(s) / max(np.linalg.norm(x), _TINY)
        x, f_x, l_x, h_x, g = x_new, f_new, l_new, h_new, g_new
        if rel_f <= cfg.tol_f:
            status = "converged_f"
            break
        if rel_x <= cfg.tol_x:
            status = "converged_x"
            break
    trace.status = status
    return x, trace


def fista(problem: CompositeProblem, x0: np.ndarray,
          cfg: SolverConfig | None = None):
    """Accelerated proximal gradient baseline; returns (solution, trace).

    Backtracks the smoothness constant L (doubling until the quadratic
    upper bound holds at the prox point, never decreasing within an
    iteration) and optionally relaxes L by cfg.fista_shrink between
    iterations.  Terminates on relative iterate change <= cfg.tol_x or
    cfg.max_outer iterations; aborts with status 'diverged' on a
    non-finite objective.
    """
    cfg = cfg or SolverConfig()
    x = np.asarray(x0, dtype=np.float64).ravel().copy()
    trace = ConvergenceTrace(solver="fista")
    t0 = time.perf_counter()

    l_x = problem.smooth(x)
    h_x = problem.h(x)
    f_x = l_x + h_x
    if not np.isfinite(f_x):
        trace.status = "diverged"
        trace.add_row(f_x, l_x, h_x, 0.0, 0, 0.0, np.inf,
                      problem.gradient_calls, 0, time.perf_counter() - t0)
        return x, trace
    g_y = problem.gradient(x)
    r0 = prox_gradient_residual(x, g_y, lambda z: problem.prox(z, 1.0))
    trace.add_row(f_x, l_x, h_x, 0.0, 0, 0.0, r0, problem.gradient_calls,
                  0, time.perf_counter() - t0)

    y = x.copy()
    l_y = l_x
    t_m = 1.0
    L = cfg.fista_l0
    status = "max_outer"
    for _ in range(cfg.max_outer):
        if g_y is None:
            g_y = problem.gradient(y)
            l_y = problem.smooth(y)
        x_new = None
        for _ in range(200):
            cand = problem.prox(y - g_y / L, 1.0 / L)
            diff = cand - y
            l_cand = problem.smooth(cand)
            bound = l_y + float(g_y @ diff) + 0.5 * L * float(diff @ diff)
            # The smooth value is a small difference of large sums, so the
            # comparison carries rounding noise far above eps*|bound|; a
            # slack below that noise makes L double forever near the
            # solution.
            if l_cand <= bound + 1e-8 * max(abs(l_y), 1.0):
                x_new = cand
                break
            L *= 2.0
        if x_new is None:
            status = "diverged"
            break
        l_new = l_cand
        h_new = problem.h(x_new)
        f_new = l_new + h_new
        if not np.isfinite(f_new):
            status = "diverged"
            break
        residual = L * float(np.linalg.norm(diff))
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_m * t_m))
        step_norm = float(np.linalg.norm(x_new - x))
        y = x_new + ((t_m - 1.0) / t_next) * (x_new - x)
        trace.add_row(f_new, l_new, h_new, 1.0 / L, 0, 0.0, residual,
                      problem.gradient_calls, 0, time.perf_counter() - t0)
        converged = step_norm <= cfg.tol_x * max(np.linalg.norm(x), _TINY)
        x, t_m = x_new, t_next
        g_y = None
        if converged:
            status = "converged_x"
            break
        if cfg.fista_shrink < 1.0:
            L *= cfg.fista_shrink
    trace.status = status
    return x, trace
