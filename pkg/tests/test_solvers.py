import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icl_newton.errors import Breakdown, DimensionMismatch, IndexOutOfRange, Overflow, ZeroExample
from icl_newton.linalg import pinv_psd, spectral_norm
from icl_newton.solvers import (FixedAlpha, FixedEta, PaperBoundary, Safe, SolverConfig, bfgs_run, cg_run, gd_run,
                                gram, lbfgs_run, moment_expansion, moment_recursion, newton_alpha, newton_matrices,
                                newton_run, ogd_run, ols_fit, ols_run, predict, relative_errors, ridge_fit,
                                run_solver)
from icl_newton.taskgen import CovSpec, sample_task


def full(task):
    return task.xs[:task.n_examples], task.ys[:task.n_examples]


def steps_to(errors, tol):
    hits = np.nonzero(errors <= tol)[0]
    return int(hits[0]) if hits.size else None


@pytest.fixture(scope="module")
def iso_task():
    return sample_task(20, 40, seed=3)


@pytest.fixture(scope="module")
def ill_task():
    return sample_task(20, 40, CovSpec.ill_conditioned(100), seed=3)


# --- configuration ---------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig("newton", 0)
    with pytest.raises(ValueError):
        SolverConfig("lbfgs", memory=0)
    with pytest.raises(ValueError):
        SolverConfig("nope")
    with pytest.raises(ValueError):
        Safe(1.0)
    assert SolverConfig("lbfgs", memory=5).label == "lbfgs(m=5)"


# --- OLS / ridge -----------------------------------------------------------

def test_ols_examples(iso_task):
    assert np.allclose(ols_fit(np.eye(2), [3.0, 4.0]), [3, 4])
    assert np.allclose(ols_fit([[1.0, 0.0]], [2.0]), [2, 0])
    w = ols_fit(*full(iso_task))
    assert np.linalg.norm(w - iso_task.w_star) <= 1e-8 * np.linalg.norm(iso_task.w_star)
    assert len(ols_run(*full(iso_task))) == 1


def test_ols_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        ols_fit(np.ones((3, 2)), np.ones(2))


def test_ridge_newton_consistency(iso_task):
    xs, ys = full(iso_task)
    lam = 0.5
    target = np.linalg.solve(xs.T @ xs + lam * np.eye(20), xs.T @ ys)
    assert np.allclose(ridge_fit(xs, ys, lam), target, rtol=1e-10)
    trace = newton_run(xs, ys, SolverConfig("newton", 40, lam=lam))
    assert np.linalg.norm(trace.final - target) <= 1e-8 * np.linalg.norm(target)


# --- GD --------------------------------------------------------------------

def test_gd_single_step_example():
    trace = gd_run(np.eye(2), np.array([1.0, 0.0]), SolverConfig("gd", 1, eta_mode=FixedEta(1.0)))
    assert np.allclose(trace.steps[0], 0)
    assert np.allclose(trace.steps[1], [0.5, 0.0])


def test_gd_rates(iso_task, ill_task):
    xs, ys = full(iso_task)
    errs = relative_errors(gd_run(xs, ys, SolverConfig("gd", 200)), ols_fit(xs, ys))
    assert errs[200] <= 1e-4
    ratios = errs[1:] / errs[:-1]
    assert np.all(ratios >= 0.5)
    xs, ys = full(ill_task)
    errs = relative_errors(gd_run(xs, ys, SolverConfig("gd", 500)), ols_fit(xs, ys))
    assert errs[500] > 1e-2


def test_gd_objective_decreases(iso_task):
    trace = gd_run(*full(iso_task), SolverConfig("gd", 50))
    assert np.all(np.diff(trace.objective) <= 1e-15)


# --- OGD -------------------------------------------------------------------

def test_ogd_examples():
    trace = ogd_run(np.array([[1.0, 0.0]]), np.array([5.0]))
    assert np.allclose(trace.steps[1], [5, 0])
    w = np.array([2.0, -1.0, 0.5])
    xs = np.diag([1.0, 3.0, 0.5])
    assert np.allclose(ogd_run(xs, xs @ w).final, w, atol=1e-15)


def test_ogd_exactness_and_worse_than_newton(iso_task):
    xs, ys = full(iso_task)
    trace = ogd_run(xs, ys)
    assert len(trace) == 41
    for k in range(1, 41):
        assert abs(trace.steps[k] @ xs[k - 1] - ys[k - 1]) <= 1e-12 * max(1.0, abs(ys[k - 1]))
    ref = ols_fit(xs, ys)
    newton_err = relative_errors(newton_run(xs, ys, SolverConfig("newton", 20)), ref)[20]
    assert relative_errors(trace, ref)[-1] > newton_err


def test_ogd_zero_example():
    with pytest.raises(ZeroExample):
        ogd_run(np.zeros((1, 2)), np.array([1.0]))


# --- Newton ----------------------------------------------------------------

def test_newton_diagonal_step():
    s = np.diag([4.0, 1.0])
    ms = newton_matrices(s, 0.1 / 1.0, 1)  # M0 = 0.1 S is not the example; build it directly below
    m0 = np.diag([0.1, 0.1])
    m1 = 2 * m0 - m0 @ s @ m0
    assert np.allclose(m1, np.diag([0.16, 0.19]))
    assert np.allclose(ms[0], 0.1 * s)


def test_newton_alpha_modes():
    s = np.diag([4.0, 1.0])
    assert newton_alpha(s, PaperBoundary()) == pytest.approx(2 / 16)
    assert newton_alpha(s, Safe(0.95)) == pytest.approx(0.95 * 2 / 16)
    assert newton_alpha(s, FixedAlpha(0.3)) == 0.3


def test_newton_step_zero_is_m0_b(iso_task):
    xs, ys = full(iso_task)
    s, b = gram(xs, ys)
    alpha = newton_alpha(s)
    trace = newton_run(xs, ys)
    assert np.allclose(trace.steps[0], alpha * s @ b, rtol=1e-12)


def test_newton_converges_and_is_monotone(iso_task):
    xs, ys = full(iso_task)
    errs = relative_errors(newton_run(xs, ys, SolverConfig("newton", 40)), ols_fit(xs, ys))
    assert steps_to(errs, 1e-8) <= 25
    assert errs[40] <= 1e-10
    tail = errs[5:steps_to(errs, 1e-12)]
    assert np.all(np.diff(tail) < 0)


def test_newton_log_kappa_dependence():
    # batch-mean error curve, the same convention as the convergence report
    from icl_newton.experiments import AlgoSpec, convergence_curves
    from icl_newton.taskgen import TaskTemplate, sample_batch
    spec = AlgoSpec("newton", SolverConfig("newton", 60))
    counts = []
    for cov in (CovSpec.identity(), CovSpec.ill_conditioned(100)):
        errs = convergence_curves(spec, sample_batch(64, TaskTemplate(20, 40, cov), 0)).mean(axis=1)
        counts.append(steps_to(errs, 1e-8))
    assert counts[1] - counts[0] <= 10


def test_newton_matrix_residual_is_quadratic(iso_task):
    xs, _ = full(iso_task)
    s = xs.T @ xs
    ms = newton_matrices(s, newton_alpha(s), 12)
    res = [spectral_norm(np.eye(20) - m @ s) for m in ms]
    for a, b in zip(res, res[1:]):
        assert b <= a * a * (1 + 1e-6) + 1e-14


def test_paper_boundary_alpha_sits_on_the_boundary(iso_task):
    xs, _ = full(iso_task)
    s = xs.T @ xs
    ms = newton_matrices(s, newton_alpha(s, PaperBoundary()), 1)
    top0 = np.max(np.linalg.eigvals(ms[0] @ s).real)
    assert top0 == pytest.approx(2.0, rel=1e-10)
    # t <- 2t - t^2 sends 2 to 0: the top direction is annihilated after one step
    lam, vec = np.linalg.eigh(s)
    assert abs(vec[:, -1] @ ms[1] @ s @ vec[:, -1]) <= 1e-6


# --- CG / BFGS / L-BFGS ----------------------------------------------------

def test_identity_system_one_step():
    xs = np.eye(3)
    ys = np.array([1.0, -2.0, 0.5])
    for trace in (cg_run(xs, ys), bfgs_run(xs, ys), lbfgs_run(xs, ys, SolverConfig("lbfgs", 5, memory=1))):
        assert np.allclose(trace.steps[1], ys, atol=1e-14)


def test_finite_termination(iso_task):
    xs, ys = full(iso_task)
    ref = ols_fit(xs, ys)
    for runner in (cg_run, bfgs_run):
        assert steps_to(relative_errors(runner(xs, ys), ref), 1e-8) <= 22
    s, b = gram(xs, ys)
    w = cg_run(xs, ys, SolverConfig("cg", 20)).steps[20]
    assert np.linalg.norm(s @ w - b) <= 1e-8 * np.linalg.norm(b)


def test_cg_kappa_bound(ill_task):
    xs, ys = full(ill_task)
    errs = relative_errors(cg_run(xs, ys, SolverConfig("cg", 60)), ols_fit(xs, ys))
    assert steps_to(errs, 1e-4) <= 2 * math.ceil(math.sqrt(100) * math.log(1e4))


def test_cg_rank_deficient_gives_min_norm():
    task = sample_task(10, 4, seed=2)
    xs, ys = task.xs[:4], task.ys[:4]
    w = cg_run(xs, ys, SolverConfig("cg", 10)).final
    assert np.allclose(w, ols_fit(xs, ys), atol=1e-10)


def test_bfgs_inverse_hessian_estimate(iso_task):
    from icl_newton.solvers import _bfgs_single
    xs, ys = full(iso_task)
    s, b = gram(xs, ys)
    kept = []
    ws = _bfgs_single(s, b, 40, 25, kept)
    assert np.allclose(ws[-1], pinv_psd(s) @ b, rtol=1e-8)
    assert np.linalg.norm(kept[0] @ (s / 40) - np.eye(20)) <= 1e-4


def test_lbfgs_full_memory_matches_bfgs(iso_task):
    xs, ys = full(iso_task)
    ref = ols_fit(xs, ys)
    bfgs = steps_to(relative_errors(bfgs_run(xs, ys), ref), 1e-8)
    lbfgs = steps_to(relative_errors(lbfgs_run(xs, ys, SolverConfig("lbfgs", 30, memory=20)), ref), 1e-8)
    assert abs(lbfgs - bfgs) <= 2


# --- prediction ------------------------------------------------------------

def test_predict_examples(iso_task):
    trace = ols_run(np.eye(2), np.array([1.0, 2.0]))
    assert predict(trace, 0, [3.0, 4.0]) == pytest.approx(11)
    gd = gd_run(*full(iso_task), SolverConfig("gd", 3))
    assert predict(gd, 0, np.ones(20)) == 0
    newton = newton_run(*full(iso_task), SolverConfig("newton", 40))
    xq = iso_task.xs[-1]
    assert abs(predict(newton, 40, xq) - iso_task.w_star @ xq) <= 1e-7
    with pytest.raises(IndexOutOfRange):
        predict(gd, 4, np.ones(20))


def test_traces_read_only(iso_task):
    trace = run_solver(SolverConfig("newton", 2), *full(iso_task))
    with pytest.raises(ValueError):
        trace.steps[0, 0] = 1


# --- moment expansion ------------------------------------------------------

def test_moment_expansion_structure():
    for k in range(8):
        exp = moment_expansion(0.3, k)
        assert exp.max_power == 2 ** (k + 1) - 1
        assert all(s % 2 == 1 for s in exp.coefficients)
        assert max(exp.coefficients) == exp.max_power


@pytest.mark.parametrize("k", range(9))
def test_closed_form_matches_polynomial_recursion(k):
    exp = moment_expansion(1.0, k)
    assert {s: exp.integer_coefficient(s) for s in exp.powers} == moment_recursion(k)


def test_moment_coefficients_low_depth():
    alpha = Fraction(1, 8)
    one = moment_expansion(float(alpha), 1)
    # (2M0 - M0 S M0) with M0 = aS gives 2aS - a^2 S^3
    assert one.exact_coefficient(1) == 2 * alpha
    assert one.exact_coefficient(3) == -alpha ** 2
    two = moment_expansion(float(alpha), 2)
    assert [two.exact_coefficient(s) for s in (1, 3, 5, 7)] == [4 * alpha, -6 * alpha ** 2, 4 * alpha ** 3,
                                                                 -alpha ** 4]


@pytest.mark.parametrize("k", range(7))
def test_moment_expansion_matches_newton(k):
    rng = np.random.default_rng(k)
    x = rng.normal(size=(12, 6))
    s = x.T @ x
    alpha = newton_alpha(s)
    m_k = newton_matrices(s, alpha, k)[k]
    got = moment_expansion(alpha, k).evaluate(s)
    assert np.linalg.norm(got - m_k) <= 1e-6 * np.linalg.norm(m_k)


def test_moment_expansion_depth_limit():
    with pytest.raises(Overflow):
        moment_expansion(0.1, 21)
    assert moment_expansion(0.1, 20).max_power == 2 ** 21 - 1


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.floats(0.01, 2.0))
def test_scalar_moment_identity(k, scale):
    # on a 1x1 "matrix" the expansion must equal the scalar Newton-Schulz iterate
    alpha = 0.9 / scale ** 2
    m = alpha * scale
    for _ in range(k):
        m = 2 * m - m * scale * m
    got = moment_expansion(alpha, k).evaluate(np.array([[scale]]))[0, 0]
    assert got == pytest.approx(m, rel=1e-9)


def test_cg_breakdown_detection():
    # indefinite "Gram" with a zero-curvature direction triggers breakdown
    from icl_newton.solvers import _cg_single
    s = np.array([[1.0, 0.0], [0.0, -1.0]])
    b = np.array([1.0, 1.0])
    with pytest.raises(Breakdown):
        _cg_single(s, b, 2, 5)
