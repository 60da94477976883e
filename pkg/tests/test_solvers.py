"""Solver tests: FISTA baseline, proximal Newton loop, subproblem solver,
line search, residuals, and the forcing term.

Oracles: closed-form fixed points (quadratics, soft thresholding), the
classical FISTA objective bound, a three-stage refined grid search for a
TV-regularized subproblem, and hand-computed line-search acceptances.
"""

import numpy as np
import pytest

from pntomo.fidelity import FidelityOracle
from pntomo.geometry import build_geometry, build_system_matrix
from pntomo.phantom import shepp_logan, simulate_noiseless, simulate_noisy
from pntomo.regularizer import ProxConfig, prox_h, tv_value
from pntomo.solvers import (
    CSV_HEADER,
    CompositeProblem,
    ConvergenceTrace,
    ExactCurvature,
    LbfgsCurvature,
    SolverConfig,
    fista,
    forcing_term,
    line_search,
    pn_solve,
    prox_gradient_residual,
    solve_subproblem,
)

I0 = 1e5


class MatrixCurvature:
    """Test curvature: a fixed SPD matrix with an exact spectral bound."""

    name = "matrix"

    def __init__(self, Q):
        self.Q = np.asarray(Q, dtype=np.float64)
        self.applies = 0

    def refresh(self, x):
        pass

    def update(self, s, y):
        pass

    def apply(self, v):
        self.applies += 1
        return self.Q @ v

    def spectral_bound(self):
        return float(np.linalg.eigvalsh(self.Q)[-1])


def quadratic_problem(c, curvature=None):
    c = np.asarray(c, dtype=np.float64)
    return CompositeProblem(
        smooth_value=lambda x: 0.5 * float(np.sum((x - c) ** 2)),
        smooth_gradient=lambda x: x - c,
        h_value=lambda x: 0.0,
        prox=lambda z, s: z,
        n=c.size,
        curvature=curvature,
    )


def ct_problem(n=8, lam=1e-4, seed=0, curvature="exact", theta0=None,
               prox_cfg=None):
    g = build_geometry(n_pixels=n, fov_mm=512.0, n_angles=10, span_deg=180.0,
                       n_rays=12)
    A = build_system_matrix(g)
    x_true = shepp_logan(n).ravel()
    x_true *= 4.0 / A.forward(x_true).max()
    d = simulate_noisy(simulate_noiseless(A, x_true, I0), seed=seed)
    oracle = FidelityOracle(A, d, I0)
    if curvature == "exact":
        curv = ExactCurvature(oracle)
    else:
        if theta0 is None:
            theta0 = I0 * A.spectral_norm() ** 2
        curv = LbfgsCurvature(capacity=50, theta0=theta0)
    cfg = prox_cfg or ProxConfig()
    problem = CompositeProblem(
        smooth_value=oracle.value,
        smooth_gradient=oracle.gradient,
        h_value=lambda x: tv_value(x.reshape(n, n), lam),
        prox=lambda z, s: prox_h(z.reshape(n, n), lam, s, cfg).ravel(),
        n=n * n,
        curvature=curv,
    )
    return problem, oracle, x_true


def test_fista_quadratic_fixed_point():
    rng = np.random.default_rng(0)
    c = rng.standard_normal(20)
    problem = quadratic_problem(c)
    x, trace = fista(problem, np.zeros(20),
                     SolverConfig(tol_x=1e-12, max_outer=200, fista_l0=1.0))
    assert np.linalg.norm(x - c) <= 1e-8
    assert trace.n_rows <= 201
    assert trace.solver == "fista"


def test_fista_lasso_soft_threshold():
    for c, lam in ((2.0, 0.5), (-1.2, 0.3), (0.2, 0.5)):
        problem = CompositeProblem(
            smooth_value=lambda x, c=c: 0.5 * float((x[0] - c) ** 2),
            smooth_gradient=lambda x, c=c: x - c,
            h_value=lambda x, lam=lam: lam * abs(float(x[0])),
            prox=lambda z, s, lam=lam: np.sign(z) * np.maximum(
                np.abs(z) - s * lam, 0.0),
            n=1,
        )
        x, _ = fista(problem, np.zeros(1),
                     SolverConfig(tol_x=1e-13, max_outer=500, fista_l0=1.0))
        expect = np.sign(c) * max(abs(c) - lam, 0.0)
        assert abs(x[0] - expect) <= 1e-8


def test_fista_objective_bound():
    # f(x_k) - f* <= 2L|x0 - x*|^2 / (k+1)^2 on a quadratic with exact L.
    rng = np.random.default_rng(1)
    diag = np.linspace(0.1, 4.0, 15)
    x0 = rng.standard_normal(15)
    problem = CompositeProblem(
        smooth_value=lambda x: 0.5 * float(x @ (diag * x)),
        smooth_gradient=lambda x: diag * x,
        h_value=lambda x: 0.0,
        prox=lambda z, s: z,
        n=15,
    )
    _, trace = fista(problem, x0,
                     SolverConfig(tol_x=1e-14, max_outer=300, fista_l0=4.0,
                                  fista_shrink=1.0))
    bound = 2.0 * 4.0 * float(x0 @ x0)
    for k in range(1, trace.n_rows):
        assert trace.f[k] <= bound / (k + 1) ** 2 + 1e-12


def test_fista_aborts_on_nonfinite():
    problem = CompositeProblem(
        smooth_value=lambda x: float("nan"),
        smooth_gradient=lambda x: x,
        h_value=lambda x: 0.0,
        prox=lambda z, s: z,
        n=3,
    )
    _, trace = fista(problem, np.ones(3))
    assert trace.status == "diverged"


def test_subproblem_zero_gradient_gives_zero_direction():
    problem = quadratic_problem(np.zeros(6), MatrixCurvature(np.eye(6)))
    d, inner = solve_subproblem(np.zeros(6), problem.curvature, np.ones(6),
                                problem, SolverConfig())
    assert np.linalg.norm(d) <= 1e-10
    assert inner.stop in ("fixed", "adaptive")


def test_subproblem_identity_hessian_is_negative_gradient():
    rng = np.random.default_rng(2)
    g = rng.standard_normal(10)
    problem = quadratic_problem(np.zeros(10), MatrixCurvature(np.eye(10)))
    d, inner = solve_subproblem(g, problem.curvature, rng.standard_normal(10),
                                problem, SolverConfig(inner_rel_tol=1e-12))
    assert np.linalg.norm(d + g) <= 1e-8 * np.linalg.norm(g)
    assert inner.hd_final == pytest.approx(d, rel=1e-12)


def test_subproblem_tv_matches_grid_search():
    # Three-pixel 1-D TV model: g'd + 0.5|d|^2 + lam*(|u1-u2| + |u2-u3|)
    # with u = x + d, minimized by staged exhaustive search.
    lam = 0.4
    g = np.array([0.7, -0.3, -0.2])
    x_k = np.array([0.1, 0.0, -0.1])
    tight = ProxConfig(max_iter=500, rel_tol=1e-13)
    problem = CompositeProblem(
        smooth_value=lambda x: 0.0,
        smooth_gradient=lambda x: np.zeros(3),
        h_value=lambda x: tv_value(x.reshape(1, 3), lam),
        prox=lambda z, s: prox_h(z.reshape(1, 3), lam, s, tight).ravel(),
        n=3,
        curvature=MatrixCurvature(np.eye(3)),
    )
    d, _ = solve_subproblem(g, problem.curvature, x_k, problem,
                            SolverConfig(inner_rel_tol=1e-12, max_inner=2000))

    def model(u1, u2, u3):
        du = np.stack([u1 - x_k[0], u2 - x_k[1], u3 - x_k[2]])
        return (g[0] * du[0] + g[1] * du[1] + g[2] * du[2]
                + 0.5 * (du[0] ** 2 + du[1] ** 2 + du[2] ** 2)
                + lam * (np.abs(u1 - u2) + np.abs(u2 - u3)))

    center = x_k.copy()
    width = 2.0
    for _ in range(3):
        axes = [np.linspace(center[i] - width, center[i] + width, 101)
                for i in range(3)]
        u1, u2, u3 = np.meshgrid(*axes, indexing="ij")
        vals = model(u1, u2, u3)
        best = np.unravel_index(np.argmin(vals), vals.shape)
        center = np.array([axes[i][best[i]] for i in range(3)])
        width = 4.0 * width / 100.0
    assert np.allclose(x_k + d, center, atol=1e-4)


def test_line_search_full_step_for_newton_direction():
    smooth = lambda x: 0.5 * float(x @ x)
    h = lambda x: 0.0
    x = np.array([1.0])
    d = np.array([-1.0])
    delta = -1.0  # grad'd with grad = x
    t, l_new, h_new, status, trials = line_search(smooth, h, x, d,
                                                  smooth(x), delta,
                                                  SolverConfig())
    assert status == "ok" and t == 1.0 and trials == 1
    assert l_new == 0.0


def test_line_search_overshoot_backtracks_twice():
    # f(x) = x^2 at x = 1 with d = -2: the descent condition
    # (1-2t)^2 <= 1 - 2t holds only for t <= 0.5, so the first accepted
    # step in {1, 0.7, 0.49, ...} is 0.49.
    smooth = lambda x: float(x[0] ** 2)
    h = lambda x: 0.0
    x = np.array([1.0])
    d = np.array([-2.0])
    delta = 2.0 * 1.0 * (-2.0)  # f' = 2x
    t, l_new, _, status, trials = line_search(smooth, h, x, d, 1.0, delta,
                                              SolverConfig())
    assert status == "ok"
    assert t == pytest.approx(0.49, rel=1e-12)
    assert trials == 3
    assert l_new == pytest.approx((1.0 - 2.0 * 0.49) ** 2, rel=1e-12)


def test_line_search_rejects_nondescent():
    t, _, _, status, trials = line_search(lambda x: 0.0, lambda x: 0.0,
                                          np.zeros(2), np.ones(2), 0.0, 0.0,
                                          SolverConfig())
    assert status == "nondescent" and t == 0.0 and trials == 0


def test_line_search_exhausts_on_unsatisfiable_condition():
    # Constant objective with a claimed negative delta never satisfies
    # the strict-decrease requirement, so backtracking runs out.
    t, _, _, status, trials = line_search(lambda x: 1.0, lambda x: 0.0,
                                          np.zeros(2), np.ones(2), 1.0, -1.0,
                                          SolverConfig())
    assert status == "exhausted" and t == 0.0
    assert trials >= 50  # 0.7^52 < 1e-8


def test_prox_gradient_residual_closed_forms():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(7)
    grad = rng.standard_normal(7)
    # h = 0: identity prox gives the gradient norm exactly.
    assert prox_gradient_residual(x, grad, lambda z: z) == pytest.approx(
        float(np.linalg.norm(grad)), rel=1e-15)
    # 1-D quadratic + l1: compare against scalar soft thresholding.
    lam = 0.3
    soft = lambda z: np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)
    x1 = np.array([0.25])
    g1 = np.array([0.6])
    expect = abs(x1[0] - float(soft(x1 - g1)[0]))
    assert prox_gradient_residual(x1, g1, soft) == pytest.approx(expect,
                                                                 abs=1e-10)


def test_forcing_term_guards_and_range():
    rng = np.random.default_rng(4)
    a = rng.standard_normal(5)
    b = rng.standard_normal(5)
    assert forcing_term(a, b, None) == 0.1
    assert forcing_term(a, b, 0.0) == 0.1
    assert forcing_term(a, a, 2.0) == 0.1  # zero numerator
    num = float(np.linalg.norm(a - b))
    assert forcing_term(a, b, num / 0.05) == pytest.approx(0.05, rel=1e-12)
    for _ in range(20):
        u = rng.standard_normal(5)
        v = rng.standard_normal(5)
        den = abs(float(rng.standard_normal())) + 1e-3
        eta = forcing_term(u, v, den)
        assert 0.0 < eta <= 0.1


def test_pn_newton_step_on_quadratic():
    rng = np.random.default_rng(5)
    c = rng.standard_normal(12)
    problem = quadratic_problem(c, MatrixCurvature(np.eye(12)))
    x, trace = pn_solve(problem, np.zeros(12),
                        SolverConfig(inner_rel_tol=1e-12))
    assert np.linalg.norm(x - c) <= 1e-8 * np.linalg.norm(c)
    assert trace.step[1] == 1.0
    assert trace.status in ("stationary", "converged_f", "converged_x")
    assert trace.n_rows <= 3


def test_pn_stationary_start():
    problem, oracle, x_true = ct_problem(lam=0.0, curvature="exact")
    # Noiseless data: x_true is a global minimizer of the smooth term.
    g = build_geometry(8, 512.0, 10, 180.0, 12)
    A = build_system_matrix(g)
    d = simulate_noiseless(A, x_true, I0)
    oracle2 = FidelityOracle(A, d, I0)
    problem2 = CompositeProblem(
        smooth_value=oracle2.value,
        smooth_gradient=oracle2.gradient,
        h_value=lambda x: 0.0,
        prox=lambda z, s: z,
        n=64,
        curvature=ExactCurvature(oracle2),
    )
    x, trace = pn_solve(problem2, x_true, SolverConfig())
    assert trace.n_rows <= 3
    assert trace.residual[0] <= 1e-8 * np.linalg.norm(A.adjoint(d))


def test_pn_monotone_and_converges_on_ct():
    problem, oracle, _ = ct_problem(curvature="exact")
    x, trace = pn_solve(problem, np.zeros(64), SolverConfig())
    assert trace.status in ("converged_f", "converged_x")
    f = np.array(trace.f)
    assert (np.diff(f) <= 1e-12 * np.abs(f[:-1])).all()
    # Steps stay on the backtracking grid {0.7^j} down to the floor.
    for t in trace.step[1:]:
        j = round(np.log(t) / np.log(0.7))
        assert t == pytest.approx(0.7 ** j, rel=1e-9)
        assert t >= 1e-8
    # Final residual shrank substantially from the start.
    assert trace.residual[-1] < 0.1 * trace.residual[0]


def test_pn_gradient_counter_flat_in_subproblems():
    problem, oracle, _ = ct_problem(curvature="exact")
    _, trace = pn_solve(problem, np.zeros(64), SolverConfig())
    evals = trace.grad_evals
    assert evals[0] == 1
    assert all(b - a == 1 for a, b in zip(evals, evals[1:]))
    # Hessian work did happen inside the subproblems.
    assert trace.hess_applies[-1] > trace.n_rows


def test_pn_lbfgs_runs_and_descends():
    problem, oracle, _ = ct_problem(curvature="lbfgs")
    x, trace = pn_solve(problem, np.zeros(64), SolverConfig())
    assert trace.status in ("converged_f", "converged_x")
    f = np.array(trace.f)
    assert (np.diff(f) <= 1e-12 * np.abs(f[:-1])).all()
    assert problem.curvature.state.n_pairs >= 1


def test_pn_adaptive_uses_fewer_inner_iterations():
    p1, _, _ = ct_problem(curvature="exact")
    _, adaptive = pn_solve(p1, np.zeros(64),
                           SolverConfig(adaptive_stop=True))
    p2, _, _ = ct_problem(curvature="exact")
    _, fixed = pn_solve(p2, np.zeros(64),
                        SolverConfig(adaptive_stop=False))
    assert sum(adaptive.inner_iters) <= sum(fixed.inner_iters)
    for eta in adaptive.eta[1:]:
        assert 0.0 < eta <= 0.1
    # Matched terminal objectives: both stopped on the same rule.
    assert adaptive.f[-1] == pytest.approx(fixed.f[-1], rel=1e-3)


def test_pn_deterministic_traces():
    p1, _, _ = ct_problem(curvature="exact")
    x1, t1 = pn_solve(p1, np.zeros(64), SolverConfig())
    p2, _, _ = ct_problem(curvature="exact")
    x2, t2 = pn_solve(p2, np.zeros(64), SolverConfig())
    assert np.array_equal(x1, x2)
    assert t1.f == t2.f and t1.step == t2.step
    assert t1.inner_iters == t2.inner_iters and t1.eta == t2.eta


def test_trace_csv_round_trip(tmp_path):
    trace = ConvergenceTrace(solver="pn-exact")
    trace.add_row(10.0, 9.0, 1.0, 1.0, 5, 0.1, 2.5, 1, 7, 0.01)
    trace.add_row(8.0, 7.5, 0.5, 0.7, 3, 0.05, 1.25, 2, 12, 0.02)
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == CSV_HEADER
    assert lines[0] == ("iter,f,l,h,step,inner_iters,eta,residual,"
                        "grad_evals,hess_applies,seconds")
    assert len(lines) == 3
    first = lines[1].split(",")
    assert first[0] == "0" and float(first[1]) == 10.0
    assert int(first[5]) == 5 and float(first[6]) == 0.1


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(ls_a=0.6)
    with pytest.raises(ValueError):
        SolverConfig(ls_a=0.0)
    with pytest.raises(ValueError):
        SolverConfig(ls_shrink=1.0)
    with pytest.raises(ValueError):
        SolverConfig(tol_f=0.0)
    with pytest.raises(ValueError):
        SolverConfig(fista_shrink=0.0)
    with pytest.raises(ValueError):
        SolverConfig(max_inner=0)


def test_pn_requires_curvature():
    problem = quadratic_problem(np.ones(4))
    with pytest.raises(ValueError):
        pn_solve(problem, np.zeros(4))
